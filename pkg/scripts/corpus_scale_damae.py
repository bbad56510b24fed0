"""Representation-ensemble training at corpus scale: trains the 5 seed-varied
autoencoders on a ~2000-row synthetic corpus and reports per-model wall time,
stopping epoch, and best held-out reconstruction loss.

    python scripts/corpus_scale_damae.py [--rows 2111] [--genes 500]
"""

import argparse
import time
import warnings

from threadpoolctl import threadpool_limits

from leap.damae import DamaeConfig, train_seed_ensemble
from leap.data import SyntheticSpec, generate_synthetic
from leap.preprocess import apply, fit, log_transform, select_genes


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=2111)  # 1920 + 191
    parser.add_argument("--genes", type=int, default=500)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    warnings.filterwarnings("ignore", category=UserWarning)

    spec = SyntheticSpec(
        n_samples=args.rows, n_genes=args.genes, n_latent=32,
        n_perturbations=1, n_tissues=8, signal_r2=0.5, seed=0,
    )
    expr, _, _ = generate_synthetic(spec)
    logged = log_transform(expr)
    model = fit(logged, select_genes([logged], args.genes))
    std = apply(model, logged)

    cfg = DamaeConfig(
        input_dim=std.n_genes, hidden_dim=128, latent_dim=64,
        batch_size=128, max_epochs=3000, patience=20, min_delta=1e-5, seed=0,
    )
    t0 = time.time()
    with threadpool_limits(limits=1):
        models = train_seed_ensemble(std, cfg, [0, 1, 2, 3, 4], preprocess=model,
                                     n_workers=args.workers)
    wall = time.time() - t0
    for i, m in enumerate(models):
        best = m.training_log[m.best_epoch]
        print(f"model {i}: stopped at epoch {m.training_log[-1].epoch} "
              f"(best {m.best_epoch}, val mse {best.val_mse:.4f}, early={m.stopped_early})")
    print(f"5 models on {std.n_samples} rows x {std.n_genes} genes: {wall:.0f}s total")


if __name__ == "__main__":
    main()
