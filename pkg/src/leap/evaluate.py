"""Metrics (Spearman/Pearson/MSE, per perturbation and pooled), split
protocols for the three evaluation challenges, bootstrap summaries, and
report assembly.

Undefined correlations (constant inputs) are returned as NaN; report
aggregation excludes them from averages and counts them instead of silently
coercing to zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ResponseTable, format_real
from .errors import ValidationError

OVERALL_ID = "OVERALL"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank range."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValidationError("pearson needs at least 2 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0:
        return float("nan")
    return float((xc * yc).sum() / denom)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN when a rank vector is
    constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValidationError("spearman needs at least 2 observations")
    return pearson(average_ranks(x), average_ranks(y))


def mse(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 1:
        raise ValidationError("mse needs at least 1 observation")
    return float(np.mean((x - y) ** 2))


@dataclass(frozen=True)
class MetricRow:
    perturbation_id: str
    spearman: float
    pearson: float
    mse: float
    n_pairs: int


def score(truth: ResponseTable, predictions) -> tuple[MetricRow, ...]:
    """One row per perturbation over its matched (sample, perturbation)
    pairs, plus one pooled OVERALL row. Every truth pair must have a
    prediction. Perturbations with < 2 pairs get NaN correlations (their MSE
    is still reported)."""
    rows: list[MetricRow] = []
    all_true: list[float] = []
    all_pred: list[float] = []
    for pid, records in sorted(truth.by_perturbation().items()):
        t = np.array([r.value for r in records])
        p = np.array([predictions.lookup(r.sample_id, pid) for r in records])
        all_true.extend(t)
        all_pred.extend(p)
        if len(records) >= 2:
            rows.append(MetricRow(pid, spearman(t, p), pearson(t, p), mse(t, p), len(records)))
        else:
            rows.append(MetricRow(pid, float("nan"), float("nan"), mse(t, p), len(records)))
    if not rows:
        raise ValidationError("empty truth table")
    t = np.asarray(all_true)
    p = np.asarray(all_pred)
    overall = MetricRow(
        OVERALL_ID,
        spearman(t, p) if t.size >= 2 else float("nan"),
        pearson(t, p) if t.size >= 2 else float("nan"),
        mse(t, p),
        int(t.size),
    )
    return tuple(rows + [overall])


def summarize_rows(rows: Sequence[MetricRow]) -> dict:
    """Average the per-perturbation metrics of one repeat, excluding (and
    counting) perturbations whose correlations are undefined."""
    per = [r for r in rows if r.perturbation_id != OVERALL_ID]
    overall = [r for r in rows if r.perturbation_id == OVERALL_ID]
    defined = [r for r in per if not math.isnan(r.spearman)]
    out = {
        "n_perturbations": len(per),
        "n_undefined": len(per) - len(defined),
        "mean_spearman": float(np.mean([r.spearman for r in defined])) if defined else float("nan"),
        "mean_pearson": float(np.mean([r.pearson for r in defined])) if defined else float("nan"),
        "mean_mse": float(np.mean([r.mse for r in per])) if per else float("nan"),
    }
    if overall:
        out["overall_spearman"] = overall[0].spearman
        out["overall_pearson"] = overall[0].pearson
        out["overall_mse"] = overall[0].mse
        out["overall_n_pairs"] = overall[0].n_pairs
    return out


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitRepeat:
    label: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    group: str | None = None  # held-out tissue for leave-one-tissue-out plans

    def __post_init__(self):
        if not self.test_ids:
            raise ValidationError(f"repeat {self.label}: empty test set")
        if set(self.train_ids) & set(self.test_ids):
            raise ValidationError(f"repeat {self.label}: train and test overlap")


@dataclass(frozen=True)
class SplitPlan:
    strategy: str
    repeats: tuple[SplitRepeat, ...]
    seed: int


def plan_repeated_holdout(
    sample_ids: Sequence[str], fraction: float = 0.2, repeats: int = 10, seed: int = 0
) -> SplitPlan:
    """Repeatedly hold out round(fraction * n) samples, independently per
    repeat. Splits are by sample, never by pair."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("fraction must lie in (0, 1)")
    ids = sorted(sample_ids)
    n_test = int(round(fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids):
        raise ValidationError(f"fraction {fraction} leaves no usable test/train split")
    rng = np.random.default_rng(seed)
    out = []
    for r in range(repeats):
        perm = rng.permutation(len(ids))
        test = tuple(ids[i] for i in sorted(perm[:n_test]))
        train = tuple(ids[i] for i in sorted(perm[n_test:]))
        out.append(SplitRepeat(f"repeat_{r:02d}", train, test))
    return SplitPlan("repeated_holdout", tuple(out), seed)


def plan_leave_one_tissue_out(
    sample_ids: Sequence[str],
    tissues: Sequence[str],
    test_subset_size: int = 10,
    n_bootstrap: int = 1000,
    seed: int = 0,
) -> SplitPlan:
    """For each eligible tissue: train on everything else, test on bootstrap
    subsets built by removing ``test_subset_size`` of its samples at random.
    A tissue is eligible when it has at least test_subset_size + 5 samples."""
    if len(sample_ids) != len(tissues):
        raise ValidationError("tissues must align with sample_ids")
    by_tissue: dict[str, list[str]] = {}
    for sid, t in sorted(zip(sample_ids, tissues)):
        by_tissue.setdefault(t, []).append(sid)
    eligible = [t for t, sids in sorted(by_tissue.items()) if len(sids) >= test_subset_size + 5]
    if not eligible:
        raise ValidationError(
            f"no tissue has the required {test_subset_size + 5} samples"
        )
    rng = np.random.default_rng(seed)
    repeats = []
    for tissue in eligible:
        members = by_tissue[tissue]
        train = tuple(s for s in sorted(sample_ids) if s not in set(members))
        for b in range(n_bootstrap):
            removed = set(rng.choice(len(members), size=test_subset_size, replace=False))
            test = tuple(s for i, s in enumerate(members) if i not in removed)
            repeats.append(SplitRepeat(f"{tissue}/boot_{b:04d}", train, test, group=tissue))
    return SplitPlan("leave_one_tissue_out", tuple(repeats), seed)


def plan_transfer(
    train_domain: Sequence[str],
    test_domain: Sequence[str],
    removed_per_repeat: int = 10,
    repeats: int = 10,
    seed: int = 0,
) -> SplitPlan:
    """Fixed training domain; each repeat tests on the test domain minus
    ``removed_per_repeat`` randomly removed samples."""
    if set(train_domain) & set(test_domain):
        raise ValidationError("train and test domains overlap")
    test_ids = sorted(test_domain)
    if len(test_ids) < removed_per_repeat + 2:
        raise ValidationError(
            f"test domain has {len(test_ids)} samples, needs >= {removed_per_repeat + 2}"
        )
    train = tuple(sorted(train_domain))
    rng = np.random.default_rng(seed)
    out = []
    for r in range(repeats):
        removed = set(rng.choice(len(test_ids), size=removed_per_repeat, replace=False))
        test = tuple(s for i, s in enumerate(test_ids) if i not in removed)
        out.append(SplitRepeat(f"repeat_{r:02d}", train, test))
    return SplitPlan("transfer", tuple(out), seed)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    task_label: str
    repeat_rows: tuple[tuple[str, tuple[MetricRow, ...]], ...]  # (repeat label, rows)
    aggregate: Mapping[str, float]
    groups: tuple[tuple[str, str], ...] = ()  # (repeat label, group)
    bootstrap: Mapping[str, Mapping[str, float]] = field(default_factory=dict)


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def build_report(
    task_label: str,
    repeat_rows: Sequence[tuple[str, Sequence[MetricRow]]],
    groups: Mapping[str, str] | None = None,
) -> EvaluationReport:
    """Aggregate per-repeat summaries into mean/sd (ddof=1) across repeats.

    When ``groups`` maps repeat labels to a held-out tissue, per-group
    medians and 95% percentile intervals over the bootstrap replicates are
    reported alongside the plain mean/sd."""
    summaries = {label: summarize_rows(rows) for label, rows in repeat_rows}
    aggregate: dict[str, float] = {"n_repeats": float(len(summaries))}
    for key in ("mean_spearman", "mean_pearson", "mean_mse",
                "overall_spearman", "overall_pearson", "overall_mse"):
        vals = [s[key] for s in summaries.values() if key in s]
        m, sd = _mean_sd(vals)
        aggregate[f"{key}_mean"] = m
        aggregate[f"{key}_sd"] = sd

    bootstrap: dict[str, dict[str, float]] = {}
    if groups:
        per_group: dict[str, list[float]] = {}
        for label, s in summaries.items():
            g = groups.get(label)
            if g is not None and not math.isnan(s["mean_spearman"]):
                per_group.setdefault(g, []).append(s["mean_spearman"])
        for g, vals in sorted(per_group.items()):
            arr = np.asarray(vals)
            bootstrap[g] = {
                "median_spearman": float(np.median(arr)),
                "ci_low": float(np.percentile(arr, 2.5)),
                "ci_high": float(np.percentile(arr, 97.5)),
                "mean": float(arr.mean()),
                "sd": float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0,
                "n_replicates": float(arr.size),
            }

    return EvaluationReport(
        task_label=task_label,
        repeat_rows=tuple((label, tuple(rows)) for label, rows in repeat_rows),
        aggregate=aggregate,
        groups=tuple(sorted(groups.items())) if groups else (),
        bootstrap=bootstrap,
    )


def _cell(x: float) -> str:
    return "NA" if math.isnan(x) else format_real(x)


def report_to_csv(report: EvaluationReport) -> str:
    """One row per (repeat, perturbation-or-OVERALL); deterministic bytes."""
    lines = ["repeat,perturbation_id,spearman,pearson,mse,n_pairs"]
    for label, rows in report.repeat_rows:
        for r in rows:
            lines.append(
                f"{label},{r.perturbation_id},{_cell(r.spearman)},"
                f"{_cell(r.pearson)},{_cell(r.mse)},{r.n_pairs}"
            )
    return "\n".join(lines) + "\n"


def report_summary_json(report: EvaluationReport) -> str:
    payload = {
        "task": report.task_label,
        "aggregate": {k: (None if isinstance(v, float) and math.isnan(v) else v)
                      for k, v in sorted(report.aggregate.items())},
        "per_repeat": {
            label: {k: (None if isinstance(v, float) and math.isnan(v) else v)
                    for k, v in sorted(summarize_rows(rows).items())}
            for label, rows in report.repeat_rows
        },
        "bootstrap": {g: dict(sorted(v.items())) for g, v in sorted(report.bootstrap.items())},
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
