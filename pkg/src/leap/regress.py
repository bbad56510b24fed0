"""Perturbation-specific regressors on latent embeddings: LASSO by cyclic
coordinate descent with an automatic geometric regularization path, a
K-nearest-neighbours baseline, and the cross-validation tuner that maximizes
per-perturbation Spearman correlation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import LeapError, NumericalError, ValidationError
from .evaluate import spearman
from .seeding import derive_seed

GROUPINGS = ("by_sample", "grouped_by_tissue", "leave_one_tissue_out")


class DegenerateTarget(LeapError):
    """The response is constant; only a mean predictor is meaningful."""


@dataclass(frozen=True)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    alpha: float
    fold_id: int | None = None
    representation: int | None = None
    converged: bool = True

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=np.float64)
        if coef.ndim != 1 or not np.all(np.isfinite(coef)) or not np.isfinite(self.intercept):
            raise ValidationError("coefficients/intercept must be finite 1-d")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coefficients + self.intercept


@dataclass(frozen=True)
class TuneConfig:
    n_folds: int = 5
    grouping: str = "by_sample"
    n_alphas: int = 10
    alpha_eps: float = 1e-3
    cd_tolerance: float = 1e-4
    cd_max_passes: int = 1000
    l1_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValidationError("n_folds must be >= 2")
        if self.n_alphas < 1:
            raise ValidationError("n_alphas must be >= 1")
        if not 0.0 < self.alpha_eps < 1.0:
            raise ValidationError("alpha_eps must lie in (0, 1)")
        if self.grouping not in GROUPINGS:
            raise ValidationError(f"unknown grouping {self.grouping!r}")
        if not 0.0 < self.l1_ratio <= 1.0:
            raise ValidationError("l1_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class PerturbationFit:
    perturbation_id: str
    best_alpha: float
    fold_models: tuple[LinearModel, ...]
    cv_score: float
    representation: int | None = None
    degenerate: bool = False

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Unweighted mean over the fold models."""
        preds = np.stack([m.predict(x) for m in self.fold_models])
        return preds.mean(axis=0)


# ---------------------------------------------------------------------------
# LASSO / elastic net by coordinate descent
# ---------------------------------------------------------------------------

def soft_threshold(x: float, lam: float):
    """sign(x) * max(|x| - lam, 0); accepts scalars or arrays."""
    if np.any(np.asarray(lam) < 0):
        raise ValidationError("lambda must be >= 0")
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def alpha_path(
    X: np.ndarray, y: np.ndarray, n_alphas: int = 10, eps: float = 1e-3
) -> np.ndarray:
    """Geometric grid of n_alphas values from alpha_max down to
    eps * alpha_max, where alpha_max = max_j |<x_j, y - mean(y)>| / n is the
    smallest alpha with an all-zero solution."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size < 2:
        raise ValidationError("need at least 2 observations")
    if np.std(y) == 0:
        raise DegenerateTarget("response is constant")
    n = X.shape[0]
    alpha_max = float(np.max(np.abs(X.T @ (y - y.mean()))) / n)
    if alpha_max == 0.0:
        return np.zeros(n_alphas)
    if n_alphas == 1:
        return np.array([alpha_max])
    return np.geomspace(alpha_max, eps * alpha_max, n_alphas)


def lasso_objective(
    X: np.ndarray, y: np.ndarray, coef: np.ndarray, intercept: float,
    alpha: float, l1_ratio: float = 1.0,
) -> float:
    resid = y - X @ coef - intercept
    n = len(y)
    penalty = alpha * (
        l1_ratio * np.abs(coef).sum() + 0.5 * (1 - l1_ratio) * (coef**2).sum()
    )
    return float((resid @ resid) / (2.0 * n) + penalty)


def _cd_pass(
    gram: np.ndarray, cov_grad: np.ndarray, w: np.ndarray, lam1: float, lam2: float
) -> float:
    """One cyclic sweep over coordinates; returns the max absolute coordinate
    change. ``cov_grad`` holds X'(y - Xw)/n and is updated incrementally."""
    max_change = 0.0
    diag = gram.diagonal()
    for j in range(len(w)):
        gjj = diag[j]
        if gjj == 0.0:
            continue
        rho = cov_grad[j] + gjj * w[j]
        new = float(np.sign(rho) * max(abs(rho) - lam1, 0.0)) / (gjj + lam2)
        delta = new - w[j]
        if delta != 0.0:
            cov_grad -= gram[:, j] * delta
            w[j] = new
            if abs(delta) > max_change:
                max_change = abs(delta)
    return max_change


def _kkt_violation(cov_grad: np.ndarray, w: np.ndarray, lam1: float, lam2: float) -> float:
    """Max stationarity-condition violation at w, given the maintained
    gradient X'(y - Xw)/n."""
    grad = cov_grad - lam2 * w
    nonzero = w != 0
    viol_zero = np.maximum(np.abs(grad[~nonzero]) - lam1, 0.0)
    viol_active = np.abs(grad[nonzero] - lam1 * np.sign(w[nonzero]))
    pieces = [v for v in (viol_zero, viol_active) if v.size]
    return float(max(p.max() for p in pieces)) if pieces else 0.0


def _solve_trigger(pass_index: int, support_changed: bool, max_change: float, tol: float) -> bool:
    """Attempting the exact active-set solve every sweep is wasteful while the
    support is still churning; try it when the support held still, the sweep
    barely moved, or periodically as a fallback."""
    return (not support_changed) or max_change < 10.0 * tol or pass_index % 8 == 7


def _try_active_set_solve(
    gram: np.ndarray, cov: np.ndarray, w: np.ndarray, lam1: float, lam2: float
) -> tuple[np.ndarray, np.ndarray] | None:
    """Solve the stationarity system on the current active set with its
    current signs; a solution that keeps those signs and violates no
    inactive-coordinate bound is the exact global minimum (the problem is
    convex), which rescues slow sweeps on ill-conditioned data.

    When the guess is inconsistent the support is repaired (sign-flipped
    coordinates leave, the worst violating coordinate enters) a bounded
    number of times; acceptance always requires the exact optimality
    conditions, so a repaired solution is still the global minimum. Returns
    (w, gradient) or None to hand control back to the sweeps."""
    p = len(w)
    active_mask = w != 0
    signs = np.sign(w)
    slack = lam1 * 1e-9 + 1e-12
    for _ in range(max(8, p)):
        active = np.flatnonzero(active_mask)
        if active.size == 0:
            if np.all(np.abs(cov) <= lam1 + slack):
                return np.zeros_like(w), cov.copy()
            return None
        sub_signs = signs[active]
        system = gram[np.ix_(active, active)]
        if lam2 > 0.0:
            system = system + lam2 * np.eye(active.size)
        try:
            solution = np.linalg.solve(system, cov[active] - lam1 * sub_signs)
        except np.linalg.LinAlgError:
            return None
        flipped = np.sign(solution) != sub_signs
        if np.any(flipped):
            active_mask[active[flipped]] = False
            continue
        w_new = np.zeros_like(w)
        w_new[active] = solution
        grad_new = cov - gram @ w_new
        outside = grad_new - lam2 * w_new
        outside[active] = 0.0
        worst = int(np.argmax(np.abs(outside)))
        if abs(outside[worst]) > lam1 + slack:
            active_mask[worst] = True
            signs[worst] = np.sign(outside[worst])
            continue
        return w_new, grad_new
    return None


def fit_lasso(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    tol: float = 1e-4,
    max_passes: int = 1000,
    fit_intercept: bool = True,
    l1_ratio: float = 1.0,
    warm_start: np.ndarray | None = None,
) -> LinearModel:
    """Minimize (1/2n)||y - Xw - b||^2 + alpha * P(w) by cyclic coordinate
    descent on centered data, where P is the L1 norm (or the elastic-net
    mixture for l1_ratio < 1).

    Converged when a sweep changes no coordinate by >= tol and the
    stationarity conditions hold within tol; hitting max_passes first is
    flagged on the returned model.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"incompatible shapes {X.shape} / {y.shape}")
    if X.shape[0] < 2:
        raise ValidationError("need at least 2 observations")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericalError("non-finite inputs to fit_lasso")
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")

    n = X.shape[0]
    if fit_intercept:
        x_mean = X.mean(axis=0)
        y_mean = float(y.mean())
        xc = X - x_mean
        yc = y - y_mean
    else:
        x_mean = np.zeros(X.shape[1])
        y_mean = 0.0
        xc, yc = X, y

    gram = xc.T @ xc / n
    cov = xc.T @ yc / n
    if warm_start is None:
        w = np.zeros(X.shape[1])
    else:
        w = np.array(warm_start, dtype=np.float64)
        if w.shape != (X.shape[1],):
            raise ValidationError(f"warm_start shape {w.shape} != ({X.shape[1]},)")
    lam1 = alpha * l1_ratio
    lam2 = alpha * (1.0 - l1_ratio)
    cov_grad = cov - gram @ w

    converged = False
    prev_support = w != 0
    for pass_index in range(max_passes):
        change = _cd_pass(gram, cov_grad, w, lam1, lam2)
        support = w != 0
        support_changed = not np.array_equal(support, prev_support)
        prev_support = support
        if _solve_trigger(pass_index, support_changed, change, tol):
            solved = _try_active_set_solve(gram, cov, w, lam1, lam2)
            if solved is not None:
                w, cov_grad = solved
                converged = True
                break
        if change < tol and _kkt_violation(cov_grad, w, lam1, lam2) <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"coordinate descent hit max_passes={max_passes} (alpha={alpha:g})")

    intercept = y_mean - float(x_mean @ w) if fit_intercept else 0.0
    return LinearModel(w, intercept, alpha, converged=converged)


# ---------------------------------------------------------------------------
# K nearest neighbours baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnnModel:
    features: np.ndarray
    responses: np.ndarray
    k: int


def fit_knn(X: np.ndarray, y: np.ndarray, k: int = 5) -> KnnModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValidationError("X and y lengths differ")
    if k < 1 or k > X.shape[0]:
        raise ValidationError(f"k={k} must lie in [1, {X.shape[0]}]")
    return KnnModel(X, y, k)


def predict_knn(model: KnnModel, queries: np.ndarray) -> np.ndarray:
    """Unweighted mean response of the k nearest training rows (Euclidean);
    distance ties break toward the lower training-row index."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2 = ((q[:, None, :] - model.features[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, : model.k]
    return model.responses[nearest].mean(axis=1)


# ---------------------------------------------------------------------------
# Fold construction and tuning
# ---------------------------------------------------------------------------

def build_folds(
    sample_keys: Sequence[str],
    groups: Sequence[str] | None,
    cfg: TuneConfig,
) -> list[np.ndarray]:
    """Partition row indices into folds.

    by_sample: a seed-derived shuffle of the lexicographically sorted keys is
    split into n_folds near-equal folds, so assignment follows sample ids and
    not row positions. grouped_by_tissue: tissues are dealt greedily
    (largest first) onto n_folds folds balancing sample counts; a tissue is
    never split. leave_one_tissue_out: one fold per tissue.
    """
    n = len(sample_keys)
    if len(set(sample_keys)) != n:
        raise ValidationError("sample keys must be unique")
    if cfg.grouping == "by_sample":
        if n < cfg.n_folds:
            raise ValidationError(f"{n} samples cannot fill {cfg.n_folds} folds")
        canonical = sorted(range(n), key=lambda i: sample_keys[i])
        rng = np.random.default_rng(cfg.seed)
        shuffled = [canonical[i] for i in rng.permutation(n)]
        return [np.array(f, dtype=int) for f in np.array_split(shuffled, cfg.n_folds)]

    if groups is None:
        raise ValidationError(f"grouping {cfg.grouping!r} requires tissue labels")
    if len(groups) != n:
        raise ValidationError("groups must align with sample keys")
    by_tissue: dict[str, list[int]] = {}
    for i in sorted(range(n), key=lambda i: sample_keys[i]):
        by_tissue.setdefault(groups[i], []).append(i)
    if len(by_tissue) < 2:
        raise ValidationError("tissue-based grouping needs at least 2 distinct tissues")

    if cfg.grouping == "leave_one_tissue_out":
        return [np.array(by_tissue[t], dtype=int) for t in sorted(by_tissue)]

    # grouped_by_tissue: greedy largest-first onto the least-loaded fold
    folds: list[list[int]] = [[] for _ in range(cfg.n_folds)]
    loads = [0] * cfg.n_folds
    for tissue in sorted(by_tissue, key=lambda t: (-len(by_tissue[t]), t)):
        dest = loads.index(min(loads))
        folds[dest].extend(by_tissue[tissue])
        loads[dest] += len(by_tissue[tissue])
    return [np.array(f, dtype=int) for f in folds if f]


def tune_and_fit(
    X: np.ndarray,
    y: np.ndarray,
    sample_ids: Sequence[str] | None = None,
    groups: Sequence[str] | None = None,
    cfg: TuneConfig = TuneConfig(),
    perturbation_id: str = "",
    representation: int | None = None,
) -> PerturbationFit:
    """Grid search over the automatic alpha path by cross-validation,
    maximizing mean per-fold Spearman; ties prefer the larger (sparser)
    alpha. The returned fit keeps the CV-fold models refit at the best alpha
    (no final refit on all the data).

    Folds with constant truth score 0 with a warning; a globally constant
    response falls back to a mean predictor with cv_score 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n < cfg.n_folds:
        raise ValidationError(
            f"{perturbation_id or 'perturbation'}: {n} samples < {cfg.n_folds} folds"
        )
    keys = list(sample_ids) if sample_ids is not None else [f"{i:08d}" for i in range(n)]
    if len(keys) != n:
        raise ValidationError("sample_ids must align with X rows")

    try:
        alphas = alpha_path(X, y, cfg.n_alphas, cfg.alpha_eps)
    except DegenerateTarget:
        mean_model = LinearModel(np.zeros(X.shape[1]), float(y.mean()), 0.0,
                                 representation=representation)
        return PerturbationFit(
            perturbation_id=perturbation_id,
            best_alpha=0.0,
            fold_models=tuple(
                replace(mean_model, fold_id=f) for f in range(cfg.n_folds)
            ),
            cv_score=0.0,
            representation=representation,
            degenerate=True,
        )

    folds = build_folds(keys, groups, cfg)
    n_folds = len(folds)
    all_rows = np.arange(n)
    scores = np.zeros((len(alphas), n_folds))
    models: list[list[LinearModel]] = [[None] * n_folds for _ in alphas]  # type: ignore

    for f, fold in enumerate(folds):
        train_rows = np.setdiff1d(all_rows, fold)
        x_tr, y_tr = X[train_rows], y[train_rows]
        x_te, y_te = X[fold], y[fold]
        scorable = len(y_te) >= 2 and np.std(y_te) > 0
        if not scorable:
            warnings.warn(
                f"{perturbation_id or 'perturbation'}: fold {f} has constant truth; scoring it 0"
            )
        warm = None
        for a, alpha in enumerate(alphas):
            model = fit_lasso(
                x_tr, y_tr, float(alpha),
                tol=cfg.cd_tolerance, max_passes=cfg.cd_max_passes,
                l1_ratio=cfg.l1_ratio, warm_start=warm,
            )
            warm = model.coefficients
            models[a][f] = replace(model, fold_id=f, representation=representation)
            if scorable:
                rho = spearman(y_te, model.predict(x_te))
                scores[a, f] = 0.0 if np.isnan(rho) else rho

    mean_scores = scores.mean(axis=1)
    best = int(np.argmax(mean_scores))  # first max = largest alpha (path descends)
    return PerturbationFit(
        perturbation_id=perturbation_id,
        best_alpha=float(alphas[best]),
        fold_models=tuple(models[best]),
        cv_score=float(mean_scores[best]),
        representation=representation,
    )


def perturbation_seed(master_seed: int, perturbation_id: str) -> int:
    """Stable per-perturbation RNG stream so parallel execution order cannot
    change fold assignments."""
    return derive_seed(master_seed, "perturbation", perturbation_id)
