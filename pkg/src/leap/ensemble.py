"""Layered ensemble orchestration: embed expression with R seed-varied
autoencoders, tune one regressor set per (representation, perturbation), and
predict by unweighted averaging over all R x n_folds linear models.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .damae import DamaeModel, encode
from .data import ExpressionMatrix, ResponseTable, Stage
from .errors import ValidationError
from .regress import PerturbationFit, TuneConfig, perturbation_seed, tune_and_fit


@dataclass(frozen=True)
class PredictionTable:
    """Dense predictions for the requested samples x perturbations."""

    sample_ids: tuple[str, ...]
    perturbation_ids: tuple[str, ...]
    values: np.ndarray  # (n_samples, n_perturbations)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.sample_ids), len(self.perturbation_ids)):
            raise ValidationError("prediction values shape mismatch")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_row", {s: i for i, s in enumerate(self.sample_ids)})
        object.__setattr__(self, "_col", {p: j for j, p in enumerate(self.perturbation_ids)})

    def lookup(self, sample_id: str, perturbation_id: str) -> float:
        row = self._row.get(sample_id)
        col = self._col.get(perturbation_id)
        if row is None or col is None:
            raise ValidationError(f"no prediction for ({sample_id}, {perturbation_id})")
        return float(self.values[row, col])


@dataclass(frozen=True)
class LeapEnsemble:
    damae_models: tuple[DamaeModel, ...]
    fits: dict[str, tuple[PerturbationFit, ...]]  # pid -> one fit per representation
    tune_config: TuneConfig
    skipped: tuple[tuple[str, str], ...] = ()

    @property
    def n_representations(self) -> int:
        return len(self.damae_models)

    def perturbation_ids(self) -> list[str]:
        return sorted(self.fits)


def fit_leap(
    expr: ExpressionMatrix,
    responses: ResponseTable,
    damae_models: Sequence[DamaeModel],
    tune_cfg: TuneConfig,
    n_workers: int = 1,
) -> LeapEnsemble:
    """Tune one PerturbationFit per (representation, perturbation).

    Fold assignment is derived from (tune seed, perturbation id), shared by
    all representations so results do not depend on execution order;
    perturbations with fewer labeled samples than folds are skipped with a
    warning record.
    """
    if expr.stage is not Stage.STANDARDIZED:
        raise ValidationError(f"fit_leap expects standardized expression, got {expr.stage.value}")
    if not damae_models:
        raise ValidationError("need at least one representation model")
    first_pre = damae_models[0].preprocess
    for m in damae_models[1:]:
        if m.preprocess is not first_pre:
            raise ValidationError("representation models must share one preprocess model")

    row_of = expr.row_index()
    unknown = sorted({r.sample_id for r in responses.records} - set(expr.sample_ids))
    if unknown:
        raise ValidationError(f"responses reference unknown samples: {unknown[:5]}")

    embeddings = [encode(m, expr).values for m in damae_models]
    by_pid = responses.by_perturbation()

    tasks = []
    skipped: list[tuple[str, str]] = []
    for pid in sorted(by_pid):
        records = by_pid[pid]
        if len(records) < tune_cfg.n_folds:
            reason = f"{len(records)} labeled samples < {tune_cfg.n_folds} folds"
            warnings.warn(f"skipping {pid}: {reason}")
            skipped.append((pid, reason))
            continue
        tasks.append(pid)

    def fit_one(pid: str) -> tuple[str, tuple[PerturbationFit, ...]]:
        records = by_pid[pid]
        rows = np.array([row_of[r.sample_id] for r in records])
        y = np.array([r.value for r in records])
        ids = [r.sample_id for r in records]
        groups = [expr.tissue[i] for i in rows] if expr.tissue else None
        cfg = replace(tune_cfg, seed=perturbation_seed(tune_cfg.seed, pid))
        fits = tuple(
            tune_and_fit(
                emb[rows], y, sample_ids=ids, groups=groups, cfg=cfg,
                perturbation_id=pid, representation=r,
            )
            for r, emb in enumerate(embeddings)
        )
        return pid, fits

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(fit_one, tasks))
    else:
        results = [fit_one(pid) for pid in tasks]

    return LeapEnsemble(
        damae_models=tuple(damae_models),
        fits=dict(results),
        tune_config=tune_cfg,
        skipped=tuple(skipped),
    )


def predict_partial(
    ens: LeapEnsemble,
    expr: ExpressionMatrix,
    perturbation_ids: Sequence[str],
    representations: Sequence[int],
) -> PredictionTable:
    """Averaging restricted to a subset of representations (the 5-vs-25
    ablation axis)."""
    reps = list(representations)
    if not reps:
        raise ValidationError("representation subset must be non-empty")
    bad = [r for r in reps if not 0 <= r < ens.n_representations]
    if bad:
        raise ValidationError(f"invalid representation indices: {bad}")
    unknown = [p for p in perturbation_ids if p not in ens.fits]
    if unknown:
        raise ValidationError(f"unknown perturbation ids: {unknown}")

    embeddings = {r: encode(ens.damae_models[r], expr).values for r in reps}
    values = np.zeros((expr.n_samples, len(perturbation_ids)))
    for j, pid in enumerate(perturbation_ids):
        fits = ens.fits[pid]
        total = np.zeros(expr.n_samples)
        count = 0
        for r in reps:
            emb = embeddings[r]
            for model in fits[r].fold_models:
                total += model.predict(emb)
                count += 1
        values[:, j] = total / count
    return PredictionTable(expr.sample_ids, tuple(perturbation_ids), values)


def predict(
    ens: LeapEnsemble, expr: ExpressionMatrix, perturbation_ids: Sequence[str]
) -> PredictionTable:
    """Unweighted mean over all R x n_folds regressors per perturbation."""
    return predict_partial(ens, expr, perturbation_ids, range(ens.n_representations))
