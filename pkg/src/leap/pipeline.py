"""End-to-end orchestration: dataset loading/synthesis, curation, staged
preprocessing and representation training with content-addressed caching,
split evaluation, ablation variants, and run manifests.

BLAS pools are pinned to one thread inside pipeline runs so results are
bitwise identical regardless of the worker-pool size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bundle import load_damae_set, save_damae_set, save_ensemble
from .config import RunConfig, config_to_dict
from .damae import DamaeConfig, DamaeModel, encode, train_seed_ensemble
from .data import (
    ExpressionMatrix,
    ResponseTable,
    curate,
    format_real,
    generate_synthetic,
    load_expression,
    load_responses,
    save_expression,
    save_responses,
)
from .ensemble import LeapEnsemble, fit_leap, predict, predict_partial
from .errors import ValidationError
from .evaluate import (
    EvaluationReport,
    MetricRow,
    SplitPlan,
    SplitRepeat,
    build_report,
    plan_leave_one_tissue_out,
    plan_repeated_holdout,
    plan_transfer,
    report_summary_json,
    report_to_csv,
    score,
)
from .preprocess import PreprocessModel, apply, fit, log_transform, select_genes
from .regress import TuneConfig, fit_knn, fit_lasso, predict_knn, tune_and_fit
from .seeding import derive_seed

log = logging.getLogger("leap")

ABLATION_STEPS = (
    "single_model",
    "fold_ensemble",
    "full_leap",
    "many_regressors_single_rep",
    "fit_population_train",
    "grouping_by_tissue",
    "ps_knn",
)


def digest_of(payload) -> str:
    """Content digest of a JSON-able object."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _matrix_digest(m: ExpressionMatrix) -> str:
    h = hashlib.sha256()
    h.update("|".join(m.sample_ids).encode())
    h.update("|".join(m.gene_ids).encode())
    h.update(m.stage.value.encode())
    h.update(m.values.tobytes())
    if m.tissue:
        h.update("|".join(m.tissue).encode())
    if m.dataset_tag:
        h.update("|".join(m.dataset_tag).encode())
    return h.hexdigest()


def _responses_digest(t: ResponseTable) -> str:
    h = hashlib.sha256()
    for r in t.records:
        h.update(f"{r.sample_id},{r.perturbation_id},{r.value!r},{r.study_tag};".encode())
    return h.hexdigest()


class StageCache:
    """Content-addressed stage outputs: a stage keyed by the digest of its
    inputs is rebuilt only when that digest changes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.events: list[dict] = []

    def get_or_build(self, stage: str, key_material: dict, filename: str, build):
        key = digest_of({"stage": stage, **key_material})
        stage_dir = self.root / f"{stage}-{key[:16]}"
        target = stage_dir / filename
        if target.exists():
            log.info("cache hit: %s (%s)", stage, key[:16])
            self.events.append({"stage": stage, "key": key, "hit": True})
            return target
        stage_dir.mkdir(parents=True, exist_ok=True)
        tmp = stage_dir / (filename + ".tmp")
        build(tmp)
        tmp.replace(target)
        log.info("cache build: %s (%s)", stage, key[:16])
        self.events.append({"stage": stage, "key": key, "hit": False})
        return target


# ---------------------------------------------------------------------------
# Dataset loading and curation
# ---------------------------------------------------------------------------

def synthesize_dataset(cfg: RunConfig) -> dict:
    """Write the synthetic dataset files named by the config; returns a
    ground-truth summary."""
    if cfg.synthetic is None:
        raise ValidationError("config has no synthetic section")
    expr, responses, latent = generate_synthetic(cfg.synthetic)
    save_expression(expr, cfg.expression_path, cfg.metadata_path)
    save_responses(responses, cfg.response_path)
    tissue_counts: dict[str, int] = {}
    for t in expr.tissue or ():
        tissue_counts[t] = tissue_counts.get(t, 0) + 1
    return {
        "n_samples": expr.n_samples,
        "n_genes": expr.n_genes,
        "n_latent": latent.shape[1],
        "n_perturbations": len(responses.perturbation_ids()),
        "planted_r2": cfg.synthetic.signal_r2,
        "tissue_counts": dict(sorted(tissue_counts.items())),
        "seed": cfg.synthetic.seed,
    }


def load_dataset(cfg: RunConfig) -> tuple[ExpressionMatrix, ResponseTable]:
    """Load expression/metadata/responses; when a synthetic section is
    configured and the expression file is absent, generate the files first.
    Applies the manual sample-exclusion list."""
    if cfg.synthetic is not None and not Path(cfg.expression_path).exists():
        log.info("expression file missing; generating synthetic dataset")
        synthesize_dataset(cfg)
    expr = load_expression(cfg.expression_path, cfg.metadata_path)
    responses = load_responses(cfg.response_path)
    if cfg.curation.sample_exclude:
        excluded = set(cfg.curation.sample_exclude)
        keep = [s for s in expr.sample_ids if s not in excluded]
        expr = expr.subset_samples(keep)
        responses = responses.restrict_samples(keep)
        log.info("excluded %d samples by config", len(excluded))
    unknown = sorted({r.sample_id for r in responses.records} - set(expr.sample_ids))
    if unknown:
        raise ValidationError(f"responses reference samples without expression: {unknown[:5]}")
    return expr, responses


def curate_responses(cfg: RunConfig, responses: ResponseTable) -> ResponseTable:
    priority = cfg.curation.study_priority or sorted({r.study_tag for r in responses.records})
    return curate(responses, priority, cfg.curation.min_samples, cfg.curation.min_label_sd)


# ---------------------------------------------------------------------------
# Preprocessing and representation stages
# ---------------------------------------------------------------------------

def prepare_standardized(
    expr_raw: ExpressionMatrix,
    cfg: RunConfig,
    fit_sample_ids: Sequence[str] | None = None,
) -> tuple[ExpressionMatrix, PreprocessModel]:
    """Log transform, per-dataset gene selection, standardization.

    ``fit_sample_ids`` restricts the population used for the standardization
    statistics (the train-split variant of the ablation); gene selection and
    the transform itself always cover the whole corpus. Genes selected in one
    dataset but absent from the fit matrix are dropped with a warning.
    """
    logged = log_transform(expr_raw)
    if logged.dataset_tag and len(set(logged.dataset_tag)) > 1:
        datasets = []
        for tag in sorted(set(logged.dataset_tag)):
            rows = [s for s, t in zip(logged.sample_ids, logged.dataset_tag) if t == tag]
            datasets.append(logged.subset_samples(rows))
    else:
        datasets = [logged]
    k = min(cfg.preprocess.k_per_dataset, min(d.n_genes for d in datasets))
    if k < cfg.preprocess.k_per_dataset:
        log.info("k_per_dataset clipped to %d (gene count)", k)
    genes = select_genes(datasets, k)

    fit_matrix = logged if fit_sample_ids is None else logged.subset_samples(list(fit_sample_ids))
    population = "full" if fit_sample_ids is None else f"train[{len(fit_sample_ids)}]"
    model = fit(fit_matrix, genes, population_tag=population)
    return apply(model, logged), model


def _damae_config(cfg: RunConfig, input_dim: int, seed: int) -> DamaeConfig:
    p = cfg.damae
    return DamaeConfig(
        input_dim=input_dim,
        hidden_dim=p.hidden_dim,
        latent_dim=p.latent_dim,
        dropout=p.dropout,
        mask_rate=p.mask_rate,
        noise_sd=p.noise_sd,
        max_epochs=p.max_epochs,
        patience=p.patience,
        min_delta=p.min_delta,
        holdout_fraction=p.holdout_fraction,
        batch_size=p.batch_size,
        learning_rate=p.learning_rate,
        beta1=p.beta1,
        beta2=p.beta2,
        epsilon=p.epsilon,
        seed=seed,
    )


def damae_seeds(cfg: RunConfig) -> list[int]:
    if cfg.ensemble.seeds is not None:
        if len(cfg.ensemble.seeds) != cfg.ensemble.n_representations:
            raise ValidationError("ensemble.seeds length must equal n_representations")
        return list(cfg.ensemble.seeds)
    return [
        derive_seed(cfg.master_seed, "damae", r) for r in range(cfg.ensemble.n_representations)
    ]


def _damae_key(data: ExpressionMatrix, cfg: RunConfig) -> dict:
    seeds = damae_seeds(cfg)
    return {
        "data": _matrix_digest(data),
        "config": dataclasses.asdict(_damae_config(cfg, data.n_genes, seeds[0])),
        "seeds": seeds,
    }


def train_representations(
    std: ExpressionMatrix,
    pre_model: PreprocessModel,
    cfg: RunConfig,
    cache: StageCache | None,
    workers: int,
    train_sample_ids: Sequence[str] | None = None,
) -> list[DamaeModel]:
    """Train (or load from cache) the seed ensemble of autoencoders on the
    configured population."""
    data = std if train_sample_ids is None else std.subset_samples(list(train_sample_ids))
    seeds = damae_seeds(cfg)
    base = _damae_config(cfg, std.n_genes, seeds[0])

    def build(path: Path) -> None:
        models = train_seed_ensemble(data, base, seeds, preprocess=pre_model, n_workers=workers)
        save_damae_set(path, models, pre_model)

    if cache is None:
        models = train_seed_ensemble(data, base, seeds, preprocess=pre_model, n_workers=workers)
        return models
    path = cache.get_or_build("damae", _damae_key(data, cfg), "damae.bundle", build)
    models, _, _ = load_damae_set(path)
    # the cache key pins the standardized data, so the current preprocess
    # model is the one these weights were trained under; share its instance
    for m in models:
        m.preprocess = pre_model
    return models


# ---------------------------------------------------------------------------
# Split plans and per-repeat evaluation
# ---------------------------------------------------------------------------

def build_split_plan(cfg: RunConfig, expr: ExpressionMatrix) -> SplitPlan:
    seed = derive_seed(cfg.master_seed, "split")
    task = cfg.task
    if task.challenge == "repeated_holdout":
        return plan_repeated_holdout(expr.sample_ids, task.fraction, task.repeats, seed)
    if task.challenge == "leave_one_tissue_out":
        if expr.tissue is None:
            raise ValidationError("leave_one_tissue_out requires tissue metadata")
        return plan_leave_one_tissue_out(
            expr.sample_ids, expr.tissue, task.test_subset_size, task.n_bootstrap, seed
        )
    if expr.dataset_tag is None or task.transfer_test_tag is None:
        raise ValidationError("transfer requires dataset_tag metadata and task.transfer_test_tag")
    test_dom = [s for s, t in zip(expr.sample_ids, expr.dataset_tag) if t == task.transfer_test_tag]
    train_dom = [s for s, t in zip(expr.sample_ids, expr.dataset_tag) if t != task.transfer_test_tag]
    if not test_dom:
        raise ValidationError(f"no samples carry dataset_tag {task.transfer_test_tag!r}")
    return plan_transfer(train_dom, test_dom, task.removed_per_repeat, task.repeats, seed)


def _tune_config(cfg: RunConfig) -> TuneConfig:
    t = cfg.tune
    return TuneConfig(
        n_folds=t.n_folds,
        grouping=t.grouping,
        n_alphas=t.n_alphas,
        alpha_eps=t.alpha_eps,
        cd_tolerance=t.cd_tolerance,
        cd_max_passes=t.cd_max_passes,
        l1_ratio=t.l1_ratio,
        seed=derive_seed(cfg.master_seed, "tune"),
    )


class _DictPredictions:
    """Minimal lookup-only prediction container for baselines."""

    def __init__(self, values: Mapping[tuple[str, str], float]):
        self._values = dict(values)

    def lookup(self, sample_id: str, perturbation_id: str) -> float:
        try:
            return self._values[(sample_id, perturbation_id)]
        except KeyError:
            raise ValidationError(
                f"no prediction for ({sample_id}, {perturbation_id})"
            ) from None


def _truth_for(
    curated: ResponseTable, test_ids: Sequence[str], pids: Sequence[str]
) -> ResponseTable:
    keep_pids = set(pids)
    picked = curated.restrict_samples(test_ids)
    return ResponseTable(tuple(r for r in picked.records if r.perturbation_id in keep_pids))


def evaluate_repeat(
    std: ExpressionMatrix,
    curated: ResponseTable,
    models: Sequence[DamaeModel],
    tune_cfg: TuneConfig,
    rep: SplitRepeat,
    workers: int,
    ens: LeapEnsemble | None = None,
) -> tuple[LeapEnsemble, tuple[MetricRow, ...]]:
    """Fit on the repeat's training samples, predict its test samples, and
    score against the held-out truth. Pass a pre-fitted ``ens`` when this
    repeat shares its training set with the previous one (bootstrap repeats
    of a held-out tissue)."""
    if ens is None:
        train_expr = std.subset_samples(rep.train_ids)
        train_resp = curated.restrict_samples(rep.train_ids)
        ens = fit_leap(train_expr, train_resp, models, tune_cfg, n_workers=workers)
    pids = ens.perturbation_ids()
    truth = _truth_for(curated, rep.test_ids, pids)
    if not truth.records:
        warnings.warn(f"{rep.label}: no labeled test pairs; emitting empty rows")
        return ens, ()
    preds = predict(ens, std.subset_samples(rep.test_ids), pids)
    return ens, score(truth, preds)


def knn_repeat(
    std: ExpressionMatrix,
    curated: ResponseTable,
    rep: SplitRepeat,
    k: int,
) -> tuple[MetricRow, ...]:
    """PS-KNN baseline scored on the same split: K nearest training samples
    by Euclidean distance over the standardized gene space."""
    row_of = std.row_index()
    train_set = set(rep.train_ids)
    preds: dict[tuple[str, str], float] = {}
    pids: list[str] = []
    for pid, records in sorted(curated.by_perturbation().items()):
        train_records = [r for r in records if r.sample_id in train_set]
        if len(train_records) < k:
            continue
        pids.append(pid)
        x_tr = std.values[[row_of[r.sample_id] for r in train_records]]
        y_tr = np.array([r.value for r in train_records])
        model = fit_knn(x_tr, y_tr, k)
        x_te = std.values[[row_of[s] for s in rep.test_ids]]
        for sid, value in zip(rep.test_ids, predict_knn(model, x_te)):
            preds[(sid, pid)] = float(value)
    truth = _truth_for(curated, rep.test_ids, pids)
    if not truth.records:
        return ()
    return score(truth, _DictPredictions(preds))


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    report: EvaluationReport
    knn_report: EvaluationReport | None
    output_dir: Path
    report_csv: Path
    summary_json: Path
    bundle_path: Path
    manifest_path: Path


def run_pipeline(cfg: RunConfig, workers: int | None = None) -> RunResult:
    """Curation -> preprocessing -> representation ensemble -> per-split
    fit/predict/score -> report + final full-data ensemble bundle + manifest.

    A stage failure leaves an INCOMPLETE marker naming the stage next to any
    partial outputs."""
    t_start = time.time()
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(outdir / "cache")
    workers = int(workers or cfg.workers)
    marker = outdir / "INCOMPLETE"
    stage = "load"
    try:
        with threadpool_limits(limits=1):
            expr_raw, responses = load_dataset(cfg)
            stage = "curate"
            curated = curate_responses(cfg, responses)
            if not curated.records:
                raise ValidationError("curation removed every response record")
            stage = "split"
            plan = build_split_plan(cfg, expr_raw)
            tune_cfg = _tune_config(cfg)

            stage = "preprocess"
            std_full, pre_full = prepare_standardized(expr_raw, cfg)
            stage = "train-damae"
            models_full = train_representations(std_full, pre_full, cfg, cache, workers)

            per_repeat_rows: list[tuple[str, tuple[MetricRow, ...]]] = []
            knn_rows: list[tuple[str, tuple[MetricRow, ...]]] = []
            refit_per_repeat = (
                cfg.preprocess.fit_population == "train"
                or cfg.damae.train_population == "train"
            )
            # bootstrap repeats of one held-out tissue share a training set,
            # so the fitted ensemble is reused until the training ids change
            memo_key: tuple | None = None
            memo_ens: LeapEnsemble | None = None
            for rep in plan.repeats:
                stage = f"evaluate[{rep.label}]"
                if refit_per_repeat:
                    fit_ids = rep.train_ids if cfg.preprocess.fit_population == "train" else None
                    std, pre = prepare_standardized(expr_raw, cfg, fit_ids)
                    train_ids = rep.train_ids if cfg.damae.train_population == "train" else None
                    models = train_representations(std, pre, cfg, cache, workers, train_ids)
                else:
                    std, models = std_full, models_full
                key = (rep.train_ids, id(models))
                ens, rows = evaluate_repeat(
                    std, curated, models, tune_cfg, rep, workers,
                    ens=memo_ens if key == memo_key else None,
                )
                memo_key, memo_ens = key, ens
                per_repeat_rows.append((rep.label, rows))
                log.info("repeat %s: %d rows", rep.label, len(rows))
                if cfg.baseline_knn:
                    knn_rows.append((rep.label, knn_repeat(std, curated, rep, cfg.knn_k)))

            stage = "report"
            groups = {r.label: r.group for r in plan.repeats if r.group is not None}
            report = build_report(f"{cfg.task.challenge}/leap", per_repeat_rows, groups or None)
            knn_report = (
                build_report(f"{cfg.task.challenge}/ps-knn", knn_rows, groups or None)
                if cfg.baseline_knn
                else None
            )

            # deployable ensemble fitted on every labeled sample
            stage = "fit"
            bundle_path = _fit_stage(cache, std_full, curated, models_full, tune_cfg,
                                     workers, cfg)
    except Exception as exc:
        marker.write_text(f"failed at stage {stage}: {exc}\n", encoding="utf-8")
        log.error("stage %s failed: %s", stage, exc)
        raise
    marker.unlink(missing_ok=True)

    report_csv = outdir / "report.csv"
    report_csv.write_text(report_to_csv(report), encoding="utf-8", newline="\n")
    summary_json = outdir / "summary.json"
    summary_payload = json.loads(report_summary_json(report))
    if knn_report is not None:
        (outdir / "report_knn.csv").write_text(report_to_csv(knn_report), encoding="utf-8", newline="\n")
        summary_payload = {"leap": summary_payload, "ps_knn": json.loads(report_summary_json(knn_report))}
    summary_json.write_text(
        json.dumps(summary_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )

    manifest_path = outdir / "manifest.json"
    manifest = {
        "config": config_to_dict(cfg),
        "config_digest": digest_of(config_to_dict(cfg)),
        "master_seed": cfg.master_seed,
        "derived_seeds": {
            "damae": damae_seeds(cfg),
            "split": derive_seed(cfg.master_seed, "split"),
            "tune": derive_seed(cfg.master_seed, "tune"),
        },
        "versions": {
            "package": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "workers": workers,
        "wall_clock_seconds": round(time.time() - t_start, 3),
        "cache_events": cache.events,
    }
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )
    return RunResult(
        report=report,
        knn_report=knn_report,
        output_dir=outdir,
        report_csv=report_csv,
        summary_json=summary_json,
        bundle_path=bundle_path,
        manifest_path=manifest_path,
    )


def _fit_stage(
    cache: StageCache,
    std: ExpressionMatrix,
    curated: ResponseTable,
    models: Sequence[DamaeModel],
    tune_cfg: TuneConfig,
    workers: int,
    cfg: RunConfig,
) -> Path:
    """Content-addressed full-data ensemble fit; the bundle lands at
    <output_dir>/ensemble.bundle."""

    def build(path: Path) -> None:
        ens = fit_leap(std, curated, models, tune_cfg, n_workers=workers)
        save_ensemble(path, ens, extra_meta={"config": config_to_dict(cfg)})

    key = {
        "std": _matrix_digest(std),
        "responses": _responses_digest(curated),
        "tune": dataclasses.asdict(tune_cfg),
        "damae": _damae_key(std, cfg),
    }
    cached = cache.get_or_build("ensemble", key, "ensemble.bundle", build)
    bundle_path = Path(cfg.output_dir) / "ensemble.bundle"
    if cached != bundle_path:
        bundle_path.write_bytes(cached.read_bytes())
    return bundle_path


def fit_full_ensemble(cfg: RunConfig, workers: int | None = None) -> Path:
    """The `fit` stage alone: ensemble trained on all labeled samples."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(outdir / "cache")
    workers = int(workers or cfg.workers)
    with threadpool_limits(limits=1):
        expr_raw, responses = load_dataset(cfg)
        curated = curate_responses(cfg, responses)
        std, pre = prepare_standardized(expr_raw, cfg)
        models = train_representations(std, pre, cfg, cache, workers)
        bundle_path = _fit_stage(cache, std, curated, models, _tune_config(cfg), workers, cfg)
    return bundle_path


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def save_predictions(preds, pairs: Sequence[tuple[str, str]], path) -> None:
    lines = ["sample_id,perturbation_id,value"]
    for sid, pid in pairs:
        lines.append(f"{sid},{pid},{format_real(preds.lookup(sid, pid))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_predictions(path) -> _DictPredictions:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "sample_id,perturbation_id,value":
        raise ValidationError(f"{path}: expected header 'sample_id,perturbation_id,value'")
    values: dict[tuple[str, str], float] = {}
    for line in lines[1:]:
        if not line:
            continue
        sid, pid, value = line.split(",")
        values[(sid, pid)] = float(value)
    return _DictPredictions(values)


def prediction_pids(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return sorted({line.split(",")[1] for line in lines[1:] if line})


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def run_ablation(
    cfg: RunConfig, steps: Sequence[str], workers: int | None = None
) -> dict[str, EvaluationReport]:
    """Run the requested pipeline variants on identical splits and return one
    report per step (also written as ablation.csv / ablation_summary.json).

    Steps: single_model (one regressor per perturbation, refit on the full
    training split at the CV-selected alpha), fold_ensemble (the n_folds CV
    regressors of one representation), full_leap (all representations),
    many_regressors_single_rep (as many regressors as full_leap but all from
    one representation, via repeated fold assignments),
    fit_population_train (standardization and representation training
    restricted to each training split), grouping_by_tissue (tissue-grouped
    CV folds for tuning), ps_knn (the K-nearest-neighbours baseline).
    """
    unknown = [s for s in steps if s not in ABLATION_STEPS]
    if unknown:
        raise ValidationError(f"unknown ablation steps: {unknown}; valid: {list(ABLATION_STEPS)}")
    steps = list(dict.fromkeys(steps))
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(outdir / "cache")
    workers = int(workers or cfg.workers)

    with threadpool_limits(limits=1):
        expr_raw, responses = load_dataset(cfg)
        curated = curate_responses(cfg, responses)
        plan = build_split_plan(cfg, expr_raw)
        tune_cfg = _tune_config(cfg)

        std_full, pre_full = prepare_standardized(expr_raw, cfg)
        models_full = train_representations(std_full, pre_full, cfg, cache, workers)
        row_of = std_full.row_index()

        base_steps = {"single_model", "fold_ensemble", "full_leap", "many_regressors_single_rep"}
        rows_by_step: dict[str, list[tuple[str, tuple[MetricRow, ...]]]] = {s: [] for s in steps}

        memo_key: tuple | None = None
        memo_ens: LeapEnsemble | None = None
        for rep in plan.repeats:
            test_expr = std_full.subset_samples(rep.test_ids)
            if base_steps & set(steps):
                ens, full_rows = evaluate_repeat(
                    std_full, curated, models_full, tune_cfg, rep, workers,
                    ens=memo_ens if rep.train_ids == memo_key else None,
                )
                memo_key, memo_ens = rep.train_ids, ens
                pids = ens.perturbation_ids()
                truth = _truth_for(curated, rep.test_ids, pids)
                if "full_leap" in steps:
                    rows_by_step["full_leap"].append((rep.label, full_rows))
                if "fold_ensemble" in steps and truth.records:
                    preds = predict_partial(ens, test_expr, pids, [0])
                    rows_by_step["fold_ensemble"].append((rep.label, score(truth, preds)))
                if "single_model" in steps and truth.records:
                    preds = _single_model_predictions(
                        ens, std_full, curated, rep, pids, row_of, tune_cfg
                    )
                    rows_by_step["single_model"].append((rep.label, score(truth, preds)))
                if "many_regressors_single_rep" in steps and truth.records:
                    preds = _many_regressors_predictions(
                        ens, std_full, curated, rep, pids, row_of, tune_cfg,
                        n_fold_sets=cfg.ensemble.n_representations,
                    )
                    rows_by_step["many_regressors_single_rep"].append(
                        (rep.label, score(truth, preds))
                    )
            if "ps_knn" in steps:
                rows_by_step["ps_knn"].append((rep.label, knn_repeat(std_full, curated, rep, cfg.knn_k)))
            if "fit_population_train" in steps:
                std_t, pre_t = prepare_standardized(expr_raw, cfg, rep.train_ids)
                models_t = train_representations(
                    std_t, pre_t, cfg, cache, workers, rep.train_ids
                )
                _, rows = evaluate_repeat(std_t, curated, models_t, tune_cfg, rep, workers)
                rows_by_step["fit_population_train"].append((rep.label, rows))
            if "grouping_by_tissue" in steps:
                grouped_cfg = replace(tune_cfg, grouping="grouped_by_tissue")
                _, rows = evaluate_repeat(std_full, curated, models_full, grouped_cfg, rep, workers)
                rows_by_step["grouping_by_tissue"].append((rep.label, rows))

    groups = {r.label: r.group for r in plan.repeats if r.group is not None}
    reports = {
        step: build_report(f"{cfg.task.challenge}/{step}", rows_by_step[step], groups or None)
        for step in steps
    }

    lines = ["step,repeat,perturbation_id,spearman,pearson,mse,n_pairs"]
    for step in steps:
        body = report_to_csv(reports[step]).splitlines()[1:]
        lines.extend(f"{step},{row}" for row in body)
    (outdir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    summary = {
        step: json.loads(report_summary_json(reports[step]))["aggregate"] for step in steps
    }
    (outdir / "ablation_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )
    return reports


def _single_model_predictions(
    ens: LeapEnsemble,
    std: ExpressionMatrix,
    curated: ResponseTable,
    rep: SplitRepeat,
    pids: Sequence[str],
    row_of: Mapping[str, int],
    tune_cfg: TuneConfig,
):
    """One regressor per perturbation: representation 0, refit on the whole
    training split at the CV-selected alpha."""
    emb_full = encode(ens.damae_models[0], std).values
    train_set = set(rep.train_ids)
    preds: dict[tuple[str, str], float] = {}
    test_rows = [row_of[s] for s in rep.test_ids]
    for pid in pids:
        fit0 = ens.fits[pid][0]
        train_records = [
            r for r in curated.by_perturbation()[pid] if r.sample_id in train_set
        ]
        x_tr = emb_full[[row_of[r.sample_id] for r in train_records]]
        y_tr = np.array([r.value for r in train_records])
        model = fit_lasso(
            x_tr, y_tr, fit0.best_alpha,
            tol=tune_cfg.cd_tolerance, max_passes=tune_cfg.cd_max_passes,
            l1_ratio=tune_cfg.l1_ratio,
        )
        values = model.predict(emb_full[test_rows])
        for sid, v in zip(rep.test_ids, values):
            preds[(sid, pid)] = float(v)
    return _DictPredictions(preds)


def _many_regressors_predictions(
    ens: LeapEnsemble,
    std: ExpressionMatrix,
    curated: ResponseTable,
    rep: SplitRepeat,
    pids: Sequence[str],
    row_of: Mapping[str, int],
    tune_cfg: TuneConfig,
    n_fold_sets: int,
):
    """Match full_leap's regressor count using only representation 0:
    n_fold_sets independent fold assignments x n_folds CV models, averaged."""
    emb_full = encode(ens.damae_models[0], std).values
    train_set = set(rep.train_ids)
    test_rows = [row_of[s] for s in rep.test_ids]
    preds: dict[tuple[str, str], float] = {}
    for pid in pids:
        train_records = [
            r for r in curated.by_perturbation()[pid] if r.sample_id in train_set
        ]
        rows = [row_of[r.sample_id] for r in train_records]
        ids = [r.sample_id for r in train_records]
        y = np.array([r.value for r in train_records])
        groups = [std.tissue[i] for i in rows] if std.tissue else None
        total = np.zeros(len(test_rows))
        count = 0
        for s in range(n_fold_sets):
            if s == 0:
                fit_s = ens.fits[pid][0]
            else:
                cfg_s = replace(
                    tune_cfg,
                    seed=derive_seed(tune_cfg.seed, "foldset", s, pid),
                )
                fit_s = tune_and_fit(
                    emb_full[rows], y, sample_ids=ids, groups=groups, cfg=cfg_s,
                    perturbation_id=pid, representation=0,
                )
            for model in fit_s.fold_models:
                total += model.predict(emb_full[test_rows])
                count += 1
        for sid, v in zip(rep.test_ids, total / count):
            preds[(sid, pid)] = float(v)
    return _DictPredictions(preds)
