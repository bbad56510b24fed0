"""Data-augmented masked auto-encoder for expression profiles.

Training corrupts each batch (per-entry Bernoulli masking with values swapped
in from other rows of the batch, then additive Gaussian noise) and learns to
reconstruct the clean batch under MSE. Early stopping monitors clean
reconstruction loss on a seed-determined holdout, and the best-epoch weights
are restored. Five seed-varied models form the representation ensemble.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import ExpressionMatrix, Stage
from .errors import NumericalError, ValidationError
from .nn import AdamState, DenseNet, adam_init, adam_step, backward, forward, mse_loss
from .preprocess import PreprocessModel


@dataclass(frozen=True)
class DamaeConfig:
    input_dim: int
    hidden_dim: int = 512
    latent_dim: int = 256
    dropout: float = 0.2
    mask_rate: float = 0.3
    noise_sd: float = 0.01
    max_epochs: int = 3000
    patience: int = 20
    min_delta: float = 1e-5
    holdout_fraction: float = 0.1
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.latent_dim < 1:
            raise ValidationError("layer dimensions must be positive")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValidationError("mask_rate must lie in [0, 1)")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        if not 0.0 < self.holdout_fraction < 0.5:
            raise ValidationError("holdout_fraction must lie in (0, 0.5)")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 2:
            raise ValidationError("max_epochs >= 1 and batch_size >= 2 required")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class DamaeModel:
    encoder: DenseNet
    decoder: DenseNet
    config: DamaeConfig
    preprocess: PreprocessModel | None
    training_log: tuple[EpochRecord, ...]
    best_epoch: int
    stopped_early: bool

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim


def corrupt(
    batch: np.ndarray, mask_rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Replace a Bernoulli(mask_rate) subset of entries with the same-column
    value of a uniformly chosen *other* row. Returns (corrupted, mask)."""
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    if n < 2:
        raise ValidationError("corrupt needs at least 2 rows to donate values")
    mask = rng.random(batch.shape) < mask_rate
    # offset in 1..n-1 makes the donor uniform over the other rows
    offsets = rng.integers(1, n, size=batch.shape)
    donor_rows = (np.arange(n)[:, None] + offsets) % n
    donors = np.take_along_axis(batch, donor_rows, axis=0)
    corrupted = np.where(mask, donors, batch)
    return corrupted, mask


def augment(batch: np.ndarray, noise_sd: float, rng: np.random.Generator) -> np.ndarray:
    """Additive i.i.d. Gaussian noise; identity at noise_sd=0."""
    if noise_sd < 0:
        raise ValidationError("noise_sd must be >= 0")
    batch = np.asarray(batch, dtype=np.float64)
    if noise_sd == 0:
        return batch.copy()
    return batch + rng.normal(0.0, noise_sd, size=batch.shape)


def _build_nets(cfg: DamaeConfig, rng: np.random.Generator) -> tuple[DenseNet, DenseNet]:
    encoder = DenseNet.build(
        [cfg.input_dim, cfg.hidden_dim, cfg.latent_dim],
        ["relu", "identity"],
        [cfg.dropout, 0.0],
        rng,
    )
    decoder = DenseNet.build(
        [cfg.latent_dim, cfg.hidden_dim, cfg.input_dim],
        ["relu", "identity"],
        [cfg.dropout, 0.0],
        rng,
    )
    return encoder, decoder


def _clean_mse(encoder: DenseNet, decoder: DenseNet, x: np.ndarray) -> float:
    z, _ = forward(encoder, x, training=False)
    out, _ = forward(decoder, z, training=False)
    return mse_loss(out, x)[0]


def _denoising_step(
    encoder: DenseNet,
    decoder: DenseNet,
    enc_state: AdamState,
    dec_state: AdamState,
    clean_batch: np.ndarray,
    cfg: DamaeConfig,
    rng: np.random.Generator,
) -> float:
    """One optimization step: corrupt, add noise, reconstruct the clean batch
    under MSE. Returns the batch loss."""
    corrupted, _ = corrupt(clean_batch, cfg.mask_rate, rng)
    noisy = augment(corrupted, cfg.noise_sd, rng)
    z, enc_cache = forward(encoder, noisy, training=True)
    out, dec_cache = forward(decoder, z, training=True)
    loss, loss_grad = mse_loss(out, clean_batch)
    if not np.isfinite(loss):
        raise NumericalError("non-finite reconstruction loss")
    dec_grads, dz = backward(decoder, dec_cache, loss_grad)
    enc_grads, _ = backward(encoder, enc_cache, dz)
    adam_step(decoder, dec_grads, dec_state)
    adam_step(encoder, enc_grads, enc_state)
    return loss


def _batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a single trailing row cannot be corrupted (no donor), fold it back
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(
    data: ExpressionMatrix,
    config: DamaeConfig,
    preprocess: PreprocessModel | None = None,
) -> DamaeModel:
    """Train on a standardized matrix with early stopping on a clean-input
    holdout. The training log starts with an epoch-0 record evaluated before
    any update, and the returned weights always achieve the minimum recorded
    validation loss."""
    if data.stage is not Stage.STANDARDIZED:
        raise ValidationError(f"train expects stage=standardized, got {data.stage.value}")
    if data.n_genes != config.input_dim:
        raise ValidationError(
            f"matrix has {data.n_genes} genes but config.input_dim={config.input_dim}"
        )
    n = data.n_samples
    if n < 4:
        raise ValidationError("need at least 4 samples to train")
    if n < 2 * config.batch_size:
        warnings.warn(f"only {n} rows for batch_size={config.batch_size}; consider shrinking")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.holdout_fraction * n)))
    val_rows, train_rows = perm[:n_val], perm[n_val:]
    x = data.values
    x_train, x_val = x[train_rows], x[val_rows]

    encoder, decoder = _build_nets(config, rng)
    enc_state = adam_init(encoder, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    dec_state = adam_init(decoder, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    log: list[EpochRecord] = [
        EpochRecord(0, _clean_mse(encoder, decoder, x_train), _clean_mse(encoder, decoder, x_val))
    ]
    best_val = log[0].val_mse
    best_epoch = 0
    best_weights = (encoder.snapshot(), decoder.snapshot())
    patience_best: float | None = None
    strikes = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_rows)
        losses = []
        for rows in _batch_slices(order, config.batch_size):
            losses.append(
                _denoising_step(encoder, decoder, enc_state, dec_state, x[rows], config, rng)
            )
        val_mse = _clean_mse(encoder, decoder, x_val)
        if not np.isfinite(val_mse):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        log.append(EpochRecord(epoch, float(np.mean(losses)), val_mse))

        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_weights = (encoder.snapshot(), decoder.snapshot())

        if patience_best is None or val_mse < patience_best - config.min_delta:
            patience_best = val_mse
            strikes = 0
        else:
            strikes += 1
            if strikes >= config.patience:
                stopped_early = True
                break

    encoder.restore(best_weights[0])
    decoder.restore(best_weights[1])
    return DamaeModel(
        encoder=encoder,
        decoder=decoder,
        config=config,
        preprocess=preprocess,
        training_log=tuple(log),
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )


def encode(model: DamaeModel, m: ExpressionMatrix) -> ExpressionMatrix:
    """Deterministic embedding (dropout off) of a standardized matrix whose
    columns match the model's preprocessing."""
    if m.stage is not Stage.STANDARDIZED:
        raise ValidationError(f"encode expects stage=standardized, got {m.stage.value}")
    if m.n_genes != model.config.input_dim:
        raise ValidationError(
            f"matrix has {m.n_genes} genes but model expects {model.config.input_dim}"
        )
    if model.preprocess is not None and m.gene_ids != model.preprocess.selected_gene_ids:
        raise ValidationError("matrix gene order does not match the model's preprocessing")
    z, _ = forward(model.encoder, m.values, training=False)
    return ExpressionMatrix(
        sample_ids=m.sample_ids,
        gene_ids=tuple(f"z{i:03d}" for i in range(z.shape[1])),
        values=z,
        stage=Stage.LATENT,
        tissue=m.tissue,
        dataset_tag=m.dataset_tag,
    )


def train_seed_ensemble(
    data: ExpressionMatrix,
    base_config: DamaeConfig,
    seeds: Sequence[int],
    preprocess: PreprocessModel | None = None,
    n_workers: int = 1,
) -> list[DamaeModel]:
    """Independent training runs on the same data, one per seed; results are
    ordered like ``seeds`` and identical whether run serially or in parallel."""
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be distinct")
    configs = [replace(base_config, seed=s) for s in seeds]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(lambda cfg: train(data, cfg, preprocess), configs))
    return [train(data, cfg, preprocess) for cfg in configs]
