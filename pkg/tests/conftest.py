import numpy as np
import pytest

from leap.damae import DamaeConfig, train
from leap.data import SyntheticSpec, generate_synthetic
from leap.preprocess import apply, fit, log_transform, select_genes


@pytest.fixture(scope="session")
def small_dataset():
    """120 samples x 60 genes, 8 latent dims, 6 perturbations, 3 tissues."""
    spec = SyntheticSpec(
        n_samples=120, n_genes=60, n_latent=8, n_perturbations=6,
        n_tissues=3, signal_r2=0.5, noise_sd_expression=0.05, seed=202,
    )
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_standardized(small_dataset):
    expr, responses, latent = small_dataset
    logged = log_transform(expr)
    model = fit(logged, select_genes([logged], 60), population_tag="full")
    return apply(model, logged), responses, model


@pytest.fixture(scope="session")
def small_damae(small_standardized):
    std, _, pre = small_standardized
    cfg = DamaeConfig(
        input_dim=std.n_genes, hidden_dim=24, latent_dim=12, batch_size=32,
        max_epochs=40, patience=6, seed=5,
    )
    return train(std, cfg, preprocess=pre)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
