"""Synthetic benchmark: layered ensemble vs. its ablations and the PS-KNN
baseline on a latent-factor dataset with a planted signal level.

Runs the same pipeline variants on identical splits for several master seeds
and prints a per-seed table plus the seed-averaged summary.

    python scripts/synthetic_benchmark.py --seeds 5 --out /tmp/leap_bench
    python scripts/synthetic_benchmark.py --scale corpus   # ~2000-row corpus
"""

import argparse
import time
import warnings
from pathlib import Path

import numpy as np

from leap.config import (
    CurationConfig,
    DamaeParams,
    EnsembleParams,
    PreprocessConfig,
    RunConfig,
    TaskParams,
    TuneParams,
)
from leap.data import SyntheticSpec
from leap.pipeline import run_ablation

STEPS = ["full_leap", "fold_ensemble", "many_regressors_single_rep", "single_model", "ps_knn"]

SCALES = {
    # the desk-scale task used by the acceptance suite
    "desk": dict(
        spec=dict(n_samples=300, n_genes=200, n_latent=16, n_perturbations=20, n_tissues=3),
        damae=dict(hidden_dim=64, latent_dim=32, max_epochs=150, patience=15, batch_size=64),
    ),
    # a corpus-sized stand-in (~2000 rows, 5 representation models)
    "corpus": dict(
        spec=dict(n_samples=2000, n_genes=500, n_latent=32, n_perturbations=20, n_tissues=8),
        damae=dict(hidden_dim=128, latent_dim=64, max_epochs=200, patience=15, batch_size=128),
    ),
}


def build_config(out: Path, master_seed: int, scale: str) -> RunConfig:
    s = SCALES[scale]
    return RunConfig(
        expression_path=str(out / f"expr{master_seed}.csv"),
        metadata_path=str(out / f"meta{master_seed}.csv"),
        response_path=str(out / f"resp{master_seed}.csv"),
        output_dir=str(out / f"run{master_seed}"),
        synthetic=SyntheticSpec(signal_r2=0.5, noise_sd_expression=0.1,
                                seed=1000 + master_seed, **s["spec"]),
        curation=CurationConfig(min_samples=5),
        preprocess=PreprocessConfig(k_per_dataset=s["spec"]["n_genes"]),
        damae=DamaeParams(**s["damae"]),
        tune=TuneParams(n_folds=5, n_alphas=10),
        ensemble=EnsembleParams(n_representations=5),
        task=TaskParams(challenge="repeated_holdout", fraction=0.2, repeats=2),
        master_seed=master_seed,
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--scale", choices=sorted(SCALES), default="desk")
    parser.add_argument("--out", default="leap_benchmark")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    warnings.filterwarnings("ignore", category=UserWarning)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    t_all = time.time()
    for master_seed in range(args.seeds):
        t0 = time.time()
        cfg = build_config(out, master_seed, args.scale)
        reports = run_ablation(cfg, STEPS, workers=args.workers)
        row = {step: reports[step].aggregate["mean_spearman_mean"] for step in STEPS}
        rows.append(row)
        cells = "  ".join(f"{step}={row[step]:.4f}" for step in STEPS)
        print(f"seed {master_seed}: {cells}  ({time.time() - t0:.0f}s)", flush=True)

    print("-" * 88)
    for step in STEPS:
        vals = np.array([r[step] for r in rows])
        print(f"{step:>28}: mean spearman {vals.mean():.4f} (sd {vals.std(ddof=1):.4f})")
    print(f"total wall clock: {time.time() - t_all:.0f}s")


if __name__ == "__main__":
    main()
