"""Command-line driver.

    leap <subcommand> --config <path> [--seed N] [--workers N]
                      [--baseline knn] [--representations-subset 0,1,...]

Subcommands mirror the pipeline stages (synth, preprocess, train-damae, fit,
predict, evaluate, run, ablate) so partial reruns stay cheap; init-config
writes a fully populated default configuration. Exit codes: 0 success,
2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bundle import load_ensemble
from .config import RunConfig, default_config, load_config, save_config
from .data import ResponseTable, load_expression, load_responses
from .ensemble import predict as ensemble_predict
from .ensemble import predict_partial
from .errors import BundleError, NumericalError, ParseError, ValidationError
from .evaluate import build_report, report_summary_json, report_to_csv, score
from .pipeline import (
    ABLATION_STEPS,
    curate_responses,
    fit_full_ensemble,
    load_dataset,
    load_predictions,
    prediction_pids,
    prepare_standardized,
    run_ablation,
    run_pipeline,
    save_predictions,
    synthesize_dataset,
    train_representations,
    StageCache,
)
from .preprocess import apply, log_transform

log = logging.getLogger("leap")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _workers(args) -> int | None:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("LEAP_WORKERS")
    return int(env) if env else None


def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise ValidationError("this subcommand requires --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    if getattr(args, "baseline", None) == "knn":
        cfg = dataclasses.replace(cfg, baseline_knn=True)
    return cfg


def cmd_init_config(args) -> int:
    path = Path(args.out)
    save_config(default_config(), path)
    print(f"wrote default config to {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    summary = synthesize_dataset(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_run_config(args)
    expr_raw, _ = load_dataset(cfg)
    std, model = prepare_standardized(expr_raw, cfg)
    print(
        f"standardized matrix: {std.n_samples} samples x {std.n_genes} genes "
        f"({len(model.dropped_gene_ids)} constant genes dropped)"
    )
    return EXIT_OK


def cmd_train_damae(args) -> int:
    cfg = _load_run_config(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        expr_raw, _ = load_dataset(cfg)
        std, pre = prepare_standardized(expr_raw, cfg)
        cache = StageCache(outdir / "cache")
        models = train_representations(std, pre, cfg, cache, _workers(args) or cfg.workers)
    for i, m in enumerate(models):
        best = m.training_log[m.best_epoch]
        print(
            f"model {i} (seed {m.config.seed}): best epoch {m.best_epoch}, "
            f"val mse {best.val_mse:.6f}, stopped_early={m.stopped_early}"
        )
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_run_config(args)
    bundle_path = fit_full_ensemble(cfg, _workers(args))
    print(f"wrote ensemble bundle to {bundle_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.bundle:
        bundle_path = Path(args.bundle)
        expression_path = args.expression
        metadata_path = args.metadata
    else:
        cfg = _load_run_config(args)
        bundle_path = Path(cfg.output_dir) / "ensemble.bundle"
        expression_path = args.expression or cfg.expression_path
        metadata_path = args.metadata or cfg.metadata_path
    if expression_path is None:
        raise ValidationError("predict requires an expression file (--expression or config)")
    ens = load_ensemble(bundle_path)
    expr = load_expression(expression_path, metadata_path)
    pre = ens.damae_models[0].preprocess
    if pre is None:
        raise ValidationError("bundle carries no preprocessing model")
    std = apply(pre, log_transform(expr))
    pids = args.perturbations.split(",") if args.perturbations else ens.perturbation_ids()
    if args.representations_subset:
        reps = [int(r) for r in args.representations_subset.split(",")]
        preds = predict_partial(ens, std, pids, reps)
    else:
        preds = ensemble_predict(ens, std, pids)
    pairs = [(sid, pid) for sid in std.sample_ids for pid in pids]
    out = Path(args.out or "predictions.csv")
    save_predictions(preds, pairs, out)
    print(f"wrote {len(pairs)} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    predictions_path = args.predictions or str(Path(cfg.output_dir) / "predictions.csv")
    preds = load_predictions(predictions_path)
    truth = curate_responses(cfg, load_responses(cfg.response_path))
    pids = set(prediction_pids(predictions_path))
    truth = ResponseTable(tuple(r for r in truth.records if r.perturbation_id in pids))
    if not truth.records:
        raise ValidationError("no overlap between predictions and curated truth")
    rows = score(truth, preds)
    report = build_report("evaluate", [("all", rows)])
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.csv").write_text(report_to_csv(report), encoding="utf-8", newline="\n")
    (outdir / "summary.json").write_text(report_summary_json(report), encoding="utf-8", newline="\n")
    print(report_summary_json(report), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    result = run_pipeline(cfg, _workers(args))
    agg = result.report.aggregate
    print(
        f"task {result.report.task_label}: mean per-perturbation spearman = "
        f"{agg['mean_spearman_mean']:.4f} (sd {agg['mean_spearman_sd']:.4f}) "
        f"over {int(agg['n_repeats'])} repeats"
    )
    if result.knn_report is not None:
        kagg = result.knn_report.aggregate
        print(
            f"baseline ps-knn: mean per-perturbation spearman = "
            f"{kagg['mean_spearman_mean']:.4f} (sd {kagg['mean_spearman_sd']:.4f})"
        )
    print(f"report: {result.report_csv}")
    print(f"bundle: {result.bundle_path}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    steps = args.steps.split(",") if args.steps else ["fold_ensemble", "full_leap"]
    reports = run_ablation(cfg, steps, _workers(args))
    for step in steps:
        agg = reports[step].aggregate
        print(
            f"{step}: mean per-perturbation spearman = "
            f"{agg['mean_spearman_mean']:.4f} (sd {agg['mean_spearman_sd']:.4f})"
        )
    print(f"ablation table: {Path(cfg.output_dir) / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leap",
        description="Layered ensemble of autoencoder representations and "
        "perturbation-specific regressors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to the JSON run config")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="worker pool size (or env LEAP_WORKERS)")
        p.set_defaults(fn=fn)
        return p

    p = sub.add_parser("init-config", help="write a fully populated default config")
    p.add_argument("--out", default="leap_config.json")
    p.set_defaults(fn=cmd_init_config)

    add("synth", cmd_synth, "write synthetic dataset files from the config spec")
    add("preprocess", cmd_preprocess, "run curation and standardization only")
    add("train-damae", cmd_train_damae, "train the representation seed ensemble")
    add("fit", cmd_fit, "fit the full-data ensemble and write the bundle")
    pp = add("predict", cmd_predict, "predict with a saved ensemble bundle")
    pp.add_argument("--bundle", help="ensemble bundle path (default: <output_dir>/ensemble.bundle)")
    pp.add_argument("--expression", help="expression file to predict on")
    pp.add_argument("--metadata", help="optional metadata sidecar")
    pp.add_argument("--perturbations", help="comma-separated perturbation ids (default: all)")
    pp.add_argument("--representations-subset", help="comma-separated representation indices")
    pp.add_argument("--out", help="output predictions file")
    pe = add("evaluate", cmd_evaluate, "score a predictions file against curated truth")
    pe.add_argument("--predictions", help="predictions file (default: <output_dir>/predictions.csv)")
    pr = add("run", cmd_run, "full pipeline: curate, preprocess, train, fit, predict, score")
    pr.add_argument("--baseline", choices=["knn"], help="also score the PS-KNN baseline")
    pa = add("ablate", cmd_ablate, "run pipeline variants on identical splits")
    pa.add_argument("--steps", help=f"comma-separated subset of {','.join(ABLATION_STEPS)}")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="leap: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BundleError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
