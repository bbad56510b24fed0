"""Core data model: expression matrices, response tables, file I/O, curation
rules, and the synthetic-data generator used to exercise the full pipeline at
desk scale.

File formats (UTF-8, comma-delimited, LF line endings, 17-significant-digit
reals so write -> load -> write is byte-identical):

* expression file: header ``sample_id,<gene_id>,...``, one row per sample
* metadata file:   header ``sample_id,tissue,dataset_tag``
* response file:   header ``sample_id,perturbation_id,value,study_tag``
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError


class Stage(str, enum.Enum):
    RAW_TPM = "raw_tpm"
    LOG_TPM = "log_tpm"
    STANDARDIZED = "standardized"
    LATENT = "latent"


def _check_unique(ids: Sequence[str], kind: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ValidationError(f"duplicate {kind} id: {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense samples x genes matrix with per-sample annotations.

    ``values`` is float64 and marked read-only; entries must be finite, and
    non-negative while ``stage`` is RAW_TPM.
    """

    sample_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]
    values: np.ndarray
    stage: Stage = Stage.RAW_TPM
    tissue: tuple[str, ...] | None = None
    dataset_tag: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.gene_ids, "gene")
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise ValidationError(
                f"values shape {values.shape} does not match "
                f"({len(self.sample_ids)}, {len(self.gene_ids)})"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("expression values must all be finite")
        stage = Stage(self.stage)
        if stage is Stage.RAW_TPM and values.size and values.min() < 0:
            raise ValidationError("raw TPM values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "stage", stage)
        for name in ("tissue", "dataset_tag"):
            ann = getattr(self, name)
            if ann is not None:
                ann = tuple(ann)
                if len(ann) != len(self.sample_ids):
                    raise ValidationError(f"{name} must have one entry per sample")
                object.__setattr__(self, name, ann)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    def row_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sample_ids)}

    def subset_samples(self, sample_ids: Sequence[str]) -> "ExpressionMatrix":
        """Rows restricted to ``sample_ids``, in the given order."""
        index = self.row_index()
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise ValidationError(f"unknown sample ids: {missing}")
        rows = [index[s] for s in sample_ids]
        return ExpressionMatrix(
            sample_ids=tuple(sample_ids),
            gene_ids=self.gene_ids,
            values=self.values[rows],
            stage=self.stage,
            tissue=tuple(self.tissue[r] for r in rows) if self.tissue else None,
            dataset_tag=tuple(self.dataset_tag[r] for r in rows) if self.dataset_tag else None,
        )


@dataclass(frozen=True)
class ResponseRecord:
    sample_id: str
    perturbation_id: str
    value: float
    study_tag: str


@dataclass(frozen=True)
class ResponseTable:
    """Sparse (sample, perturbation, value, study) observations."""

    records: tuple[ResponseRecord, ...]

    def __post_init__(self):
        records = tuple(self.records)
        for r in records:
            if not math.isfinite(r.value):
                raise ValidationError(
                    f"non-finite response for ({r.sample_id}, {r.perturbation_id})"
                )
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def perturbation_ids(self) -> list[str]:
        return sorted({r.perturbation_id for r in self.records})

    def sample_ids(self) -> list[str]:
        return sorted({r.sample_id for r in self.records})

    def by_perturbation(self) -> dict[str, list[ResponseRecord]]:
        groups: dict[str, list[ResponseRecord]] = {}
        for r in self.records:
            groups.setdefault(r.perturbation_id, []).append(r)
        return groups

    def restrict_samples(self, sample_ids: Iterable[str]) -> "ResponseTable":
        keep = set(sample_ids)
        return ResponseTable(tuple(r for r in self.records if r.sample_id in keep))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the desk-scale synthetic test-bed."""

    n_samples: int = 300
    n_genes: int = 200
    n_latent: int = 16
    n_perturbations: int = 20
    n_tissues: int = 3
    signal_r2: float = 0.5
    noise_sd_expression: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_genes < 1 or self.n_latent < 1:
            raise ValidationError("n_samples >= 2, n_genes >= 1, n_latent >= 1 required")
        if self.n_latent > self.n_genes:
            raise ValidationError("n_latent must not exceed n_genes")
        if self.n_tissues < 1:
            raise ValidationError("n_tissues must be >= 1")
        if not 0.0 < self.signal_r2 < 1.0:
            raise ValidationError("signal_r2 must lie strictly between 0 and 1")
        if self.noise_sd_expression < 0:
            raise ValidationError("noise_sd_expression must be >= 0")
        if self.n_perturbations < 1:
            raise ValidationError("n_perturbations must be >= 1")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def format_real(x: float) -> str:
    """17 significant digits: enough for exact float64 round-trips."""
    return f"{float(x):.17g}"


def _parse_cell(text: str, path, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}: line {line_no}: non-numeric cell {text!r}") from None


def load_expression(path, metadata_path=None) -> ExpressionMatrix:
    """Read an expression file (and optional metadata sidecar) as raw TPM."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "sample_id":
        raise ParseError(f"{path}: line 1: header must start with 'sample_id'")
    gene_ids = tuple(header[1:])
    sample_ids: list[str] = []
    rows: list[list[float]] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise ParseError(
                f"{path}: line {line_no}: expected {len(header)} cells, got {len(cells)}"
            )
        sample_ids.append(cells[0])
        rows.append([_parse_cell(c, path, line_no) for c in cells[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(sample_ids), len(gene_ids))

    tissue = dataset_tag = None
    if metadata_path is not None:
        tissue_map, tag_map = _load_metadata(metadata_path)
        missing = [s for s in sample_ids if s not in tissue_map]
        if missing:
            raise ValidationError(f"metadata missing for samples: {missing[:5]}")
        tissue = tuple(tissue_map[s] for s in sample_ids)
        dataset_tag = tuple(tag_map[s] for s in sample_ids)

    return ExpressionMatrix(
        sample_ids=tuple(sample_ids),
        gene_ids=gene_ids,
        values=values,
        stage=Stage.RAW_TPM,
        tissue=tissue,
        dataset_tag=dataset_tag,
    )


def _load_metadata(path) -> tuple[dict[str, str], dict[str, str]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "sample_id,tissue,dataset_tag":
        raise ParseError(f"{path}: expected header 'sample_id,tissue,dataset_tag'")
    tissue_map: dict[str, str] = {}
    tag_map: dict[str, str] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 3:
            raise ParseError(f"{path}: line {line_no}: expected 3 cells, got {len(cells)}")
        sid, tissue, tag = cells
        if sid in tissue_map:
            raise ValidationError(f"duplicate sample id: {sid!r}")
        tissue_map[sid] = tissue
        tag_map[sid] = tag
    return tissue_map, tag_map


def save_expression(m: ExpressionMatrix, path, metadata_path=None) -> None:
    path = Path(path)
    out = ["sample_id," + ",".join(m.gene_ids)]
    for i, sid in enumerate(m.sample_ids):
        out.append(sid + "," + ",".join(format_real(v) for v in m.values[i]))
    path.write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")
    if metadata_path is not None:
        if m.tissue is None or m.dataset_tag is None:
            raise ValidationError("matrix has no tissue/dataset_tag annotations to save")
        meta = ["sample_id,tissue,dataset_tag"]
        for sid, tis, tag in zip(m.sample_ids, m.tissue, m.dataset_tag):
            meta.append(f"{sid},{tis},{tag}")
        Path(metadata_path).write_text("\n".join(meta) + "\n", encoding="utf-8", newline="\n")


def load_responses(path) -> ResponseTable:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "sample_id,perturbation_id,value,study_tag":
        raise ParseError(f"{path}: expected header 'sample_id,perturbation_id,value,study_tag'")
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 4:
            raise ParseError(f"{path}: line {line_no}: expected 4 cells, got {len(cells)}")
        records.append(
            ResponseRecord(cells[0], cells[1], _parse_cell(cells[2], path, line_no), cells[3])
        )
    return ResponseTable(tuple(records))


def save_responses(table: ResponseTable, path) -> None:
    out = ["sample_id,perturbation_id,value,study_tag"]
    for r in table.records:
        out.append(f"{r.sample_id},{r.perturbation_id},{format_real(r.value)},{r.study_tag}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------

def aggregate_within_study(table: ResponseTable) -> ResponseTable:
    """Collapse same-study repeats of a (sample, perturbation) pair to their
    median value (even counts: mean of the two middle values)."""
    groups: dict[tuple[str, str, str], list[float]] = {}
    order: list[tuple[str, str, str]] = []
    for r in table.records:
        key = (r.study_tag, r.sample_id, r.perturbation_id)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r.value)
    records = [
        ResponseRecord(sid, pid, float(np.median(groups[(study, sid, pid)])), study)
        for (study, sid, pid) in order
    ]
    return ResponseTable(tuple(records))


def dedup_across_studies(table: ResponseTable, priority: Sequence[str]) -> ResponseTable:
    """Keep, per (sample, perturbation), only records from the highest-priority
    study in which the pair was observed."""
    rank = {study: i for i, study in enumerate(priority)}
    for r in table.records:
        if r.study_tag not in rank:
            raise ValidationError(f"study {r.study_tag!r} not present in priority list")
    best: dict[tuple[str, str], int] = {}
    for r in table.records:
        key = (r.sample_id, r.perturbation_id)
        rk = rank[r.study_tag]
        if key not in best or rk < best[key]:
            best[key] = rk
    records = tuple(
        r for r in table.records if rank[r.study_tag] == best[(r.sample_id, r.perturbation_id)]
    )
    return ResponseTable(records)


def filter_perturbations(
    table: ResponseTable, min_samples: int, min_label_sd: float | None = None
) -> ResponseTable:
    """Keep perturbations observed in >= ``min_samples`` distinct samples whose
    label population-sd exceeds ``min_label_sd`` (when given)."""
    if min_samples < 1:
        raise ValidationError("min_samples must be >= 1")
    samples: dict[str, set[str]] = {}
    values: dict[str, list[float]] = {}
    for r in table.records:
        samples.setdefault(r.perturbation_id, set()).add(r.sample_id)
        values.setdefault(r.perturbation_id, []).append(r.value)
    keep = set()
    for pid, sids in samples.items():
        if len(sids) < min_samples:
            continue
        if min_label_sd is not None and np.std(values[pid]) <= min_label_sd:
            continue
        keep.add(pid)
    return ResponseTable(tuple(r for r in table.records if r.perturbation_id in keep))


def curate(
    table: ResponseTable,
    priority: Sequence[str],
    min_samples: int,
    min_label_sd: float | None = None,
) -> ResponseTable:
    """Full curation pipeline: aggregate -> dedup -> filter. Idempotent."""
    return filter_perturbations(
        dedup_across_studies(aggregate_within_study(table), priority),
        min_samples,
        min_label_sd,
    )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, x)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[ExpressionMatrix, ResponseTable, np.ndarray]:
    """Build a latent-factor dataset where each perturbation's label is a
    sparse linear readout of the latent factors.

    Noise on each label is orthogonalized against the span of (1, Z) and
    rescaled, so the fraction of label variance explained by the latent
    factors equals ``spec.signal_r2`` exactly under an OLS fit on Z.
    Expression is a softplus-scaled readout of Z so raw values are
    non-negative TPM-like intensities. Deterministic given ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.n_latent
    if n <= k + 1:
        raise ValidationError("n_samples must exceed n_latent + 1 for exact noise scaling")

    tissue_idx = rng.permutation(np.arange(n) % spec.n_tissues)
    tissue_names = tuple(f"tissue_{t}" for t in tissue_idx)
    tissue_means = rng.normal(0.0, 1.0, size=(spec.n_tissues, k))

    latent = rng.standard_normal((n, k)) + tissue_means[tissue_idx]
    mixing = rng.standard_normal((k, spec.n_genes)) / np.sqrt(k)
    activity = latent @ mixing
    if spec.noise_sd_expression > 0:
        activity = activity + rng.normal(0.0, spec.noise_sd_expression, size=activity.shape)
    raw = _softplus(activity) * 20.0

    expr = ExpressionMatrix(
        sample_ids=tuple(f"s{i:04d}" for i in range(n)),
        gene_ids=tuple(f"g{j:04d}" for j in range(spec.n_genes)),
        values=raw,
        stage=Stage.RAW_TPM,
        tissue=tissue_names,
        dataset_tag=tuple("synthetic" for _ in range(n)),
    )

    # Orthonormal basis of span(1, Z) used to strip signal from label noise.
    design = np.concatenate([np.ones((n, 1)), latent], axis=1)
    q, _ = np.linalg.qr(design)

    n_active = max(1, k // 4)
    records = []
    for p in range(spec.n_perturbations):
        pid = f"pert_{p:03d}"
        support = rng.choice(k, size=n_active, replace=False)
        beta = np.zeros(k)
        beta[support] = rng.normal(0.0, 1.0, size=n_active)
        signal = latent @ beta
        signal_ss = float(np.sum((signal - signal.mean()) ** 2))

        eps = rng.standard_normal(n)
        eps -= q @ (q.T @ eps)
        eps *= np.sqrt(signal_ss * (1.0 - spec.signal_r2) / spec.signal_r2) / np.linalg.norm(eps)
        y = signal + eps
        for i in range(n):
            records.append(ResponseRecord(expr.sample_ids[i], pid, float(y[i]), "synthetic"))

    return expr, ResponseTable(tuple(records)), latent
