"""Expression preprocessing: log transform, variance-based gene selection,
and per-gene standardization with strict fit/apply separation.

The population used for ``fit`` is a configuration choice (training split vs
full corpus); the model records its provenance in ``fit_population_tag``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ExpressionMatrix, Stage
from .errors import ValidationError


@dataclass(frozen=True)
class PreprocessModel:
    """Per-gene standardization statistics over a named fit population."""

    selected_gene_ids: tuple[str, ...]
    per_gene_mean: np.ndarray
    per_gene_sd: np.ndarray
    fit_population_tag: str = ""
    dropped_gene_ids: tuple[str, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.per_gene_mean, dtype=np.float64)
        sd = np.asarray(self.per_gene_sd, dtype=np.float64)
        if mean.shape != (len(self.selected_gene_ids),) or sd.shape != mean.shape:
            raise ValidationError("mean/sd vectors must align with selected_gene_ids")
        if np.any(sd <= 0):
            raise ValidationError("all per-gene sds must be strictly positive")
        mean.setflags(write=False)
        sd.setflags(write=False)
        object.__setattr__(self, "selected_gene_ids", tuple(self.selected_gene_ids))
        object.__setattr__(self, "dropped_gene_ids", tuple(self.dropped_gene_ids))
        object.__setattr__(self, "per_gene_mean", mean)
        object.__setattr__(self, "per_gene_sd", sd)


def log_transform(m: ExpressionMatrix) -> ExpressionMatrix:
    """x -> log2(x + 1) on a raw-TPM matrix."""
    if m.stage is not Stage.RAW_TPM:
        raise ValidationError(f"log_transform expects stage=raw_tpm, got {m.stage.value}")
    if m.values.size and m.values.min() < 0:
        raise ValidationError("log_transform requires non-negative entries")
    return ExpressionMatrix(
        sample_ids=m.sample_ids,
        gene_ids=m.gene_ids,
        values=np.log2(m.values + 1.0),
        stage=Stage.LOG_TPM,
        tissue=m.tissue,
        dataset_tag=m.dataset_tag,
    )


def select_genes(matrices: Sequence[ExpressionMatrix], k_per_dataset: int) -> list[str]:
    """Union of each dataset's top-k genes by population variance of the
    log values. Ties at the top-k boundary go to the lexicographically
    smaller gene id; the union is returned sorted for determinism."""
    if not matrices:
        raise ValidationError("select_genes needs at least one matrix")
    if k_per_dataset < 1:
        raise ValidationError("k_per_dataset must be >= 1")
    for m in matrices:
        if m.stage is not Stage.LOG_TPM:
            raise ValidationError("select_genes expects log-transformed matrices")
        if k_per_dataset > m.n_genes:
            raise ValidationError(
                f"k_per_dataset={k_per_dataset} exceeds gene count {m.n_genes}"
            )
    union: set[str] = set()
    for m in matrices:
        variances = np.var(m.values, axis=0)
        ranked = sorted(zip(m.gene_ids, variances), key=lambda gv: (-gv[1], gv[0]))
        union.update(g for g, _ in ranked[:k_per_dataset])
    return sorted(union)


def fit(
    m: ExpressionMatrix, genes: Sequence[str], population_tag: str = ""
) -> PreprocessModel:
    """Per-gene mean and population sd over ``m`` restricted to ``genes``.

    Genes with zero variance in the fit population are dropped (recorded on
    the model and warned about) rather than clamped.
    """
    if m.stage is not Stage.LOG_TPM:
        raise ValidationError(f"fit expects stage=log_tpm, got {m.stage.value}")
    gene_pos = {g: j for j, g in enumerate(m.gene_ids)}
    missing = [g for g in genes if g not in gene_pos]
    if missing:
        raise ValidationError(f"genes not present in matrix: {missing[:5]}")
    cols = [gene_pos[g] for g in genes]
    sub = m.values[:, cols]
    mean = sub.mean(axis=0)
    sd = sub.std(axis=0)
    keep = sd > 0
    dropped = tuple(g for g, k in zip(genes, keep) if not k)
    if dropped:
        warnings.warn(f"dropping {len(dropped)} constant gene(s): {list(dropped)[:5]}")
    if not keep.any():
        raise ValidationError("all selected genes are constant in the fit population")
    return PreprocessModel(
        selected_gene_ids=tuple(g for g, k in zip(genes, keep) if k),
        per_gene_mean=mean[keep],
        per_gene_sd=sd[keep],
        fit_population_tag=population_tag,
        dropped_gene_ids=dropped,
    )


def apply(model: PreprocessModel, m: ExpressionMatrix) -> ExpressionMatrix:
    """Standardize with the model's statistics; columns come out in the
    model's gene order."""
    if m.stage is not Stage.LOG_TPM:
        raise ValidationError(f"apply expects stage=log_tpm, got {m.stage.value}")
    gene_pos = {g: j for j, g in enumerate(m.gene_ids)}
    missing = [g for g in model.selected_gene_ids if g not in gene_pos]
    if missing:
        raise ValidationError(f"matrix is missing model genes: {missing[:10]}")
    cols = [gene_pos[g] for g in model.selected_gene_ids]
    standardized = (m.values[:, cols] - model.per_gene_mean) / model.per_gene_sd
    return ExpressionMatrix(
        sample_ids=m.sample_ids,
        gene_ids=model.selected_gene_ids,
        values=standardized,
        stage=Stage.STANDARDIZED,
        tissue=m.tissue,
        dataset_tag=m.dataset_tag,
    )
