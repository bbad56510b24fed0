"""Versioned single-file container for trained models.

Layout: magic, format version, section count, then named sections (canonical
JSON or shape-headed row-major float64 arrays), closed by a SHA-256 digest
over everything before it. Writing is fully deterministic, so identical
models produce identical bytes; any tampering is caught at load time.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .damae import DamaeConfig, DamaeModel, EpochRecord
from .data import ExpressionMatrix, Stage
from .ensemble import LeapEnsemble
from .errors import BundleError
from .nn import DenseNet, Layer
from .preprocess import PreprocessModel
from .regress import LinearModel, PerturbationFit, TuneConfig

MAGIC = b"LEAPBNDL"
FORMAT_VERSION = 1
_KIND_JSON = 0
_KIND_F64 = 1


def _encode_section(name: str, payload: bytes, kind: int) -> bytes:
    name_b = name.encode("utf-8")
    return b"".join(
        [struct.pack("<I", len(name_b)), name_b, struct.pack("<B", kind),
         struct.pack("<Q", len(payload)), payload]
    )


def _array_payload(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + arr.tobytes()


def save_bundle(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a bundle with one canonical-JSON 'meta' section plus the given
    float64 array sections (sorted by name for determinism)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", 1 + len(arrays))
    meta_json = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += _encode_section("meta", meta_json, _KIND_JSON)
    for name in sorted(arrays):
        blob += _encode_section(name, _array_payload(arrays[name]), _KIND_F64)
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and integrity-check a bundle; refuses tampered or truncated
    files."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 4 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise BundleError(f"{path}: not a bundle file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise BundleError(f"{path}: checksum mismatch; refusing to load")
    off = len(MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals[0]

    version = take("<I")
    if version != FORMAT_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {version}")
    n_sections = take("<I")
    meta: dict | None = None
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        name_len = take("<I")
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        kind = take("<B")
        payload_len = take("<Q")
        payload = body[off : off + payload_len]
        if len(payload) != payload_len:
            raise BundleError(f"{path}: truncated section {name!r}")
        off += payload_len
        if kind == _KIND_JSON:
            if name == "meta":
                meta = json.loads(payload.decode("utf-8"))
        elif kind == _KIND_F64:
            ndim = struct.unpack_from("<I", payload, 0)[0]
            dims = struct.unpack_from(f"<{ndim}Q", payload, 4)
            data = np.frombuffer(payload, dtype="<f8", offset=4 + 8 * ndim).copy()
            arrays[name] = data.reshape(dims)
        else:
            raise BundleError(f"{path}: unknown section kind {kind}")
    if meta is None:
        raise BundleError(f"{path}: missing meta section")
    if off != len(body):
        raise BundleError(f"{path}: trailing bytes after sections")
    return meta, arrays


# ---------------------------------------------------------------------------
# Domain object <-> sections
# ---------------------------------------------------------------------------

def expression_sections(prefix: str, m: ExpressionMatrix) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        "sample_ids": list(m.sample_ids),
        "gene_ids": list(m.gene_ids),
        "stage": m.stage.value,
        "tissue": list(m.tissue) if m.tissue else None,
        "dataset_tag": list(m.dataset_tag) if m.dataset_tag else None,
    }
    return meta, {f"{prefix}/values": m.values}


def expression_from_sections(
    meta: dict, arrays: dict[str, np.ndarray], prefix: str
) -> ExpressionMatrix:
    return ExpressionMatrix(
        sample_ids=tuple(meta["sample_ids"]),
        gene_ids=tuple(meta["gene_ids"]),
        values=arrays[f"{prefix}/values"],
        stage=Stage(meta["stage"]),
        tissue=tuple(meta["tissue"]) if meta["tissue"] else None,
        dataset_tag=tuple(meta["dataset_tag"]) if meta["dataset_tag"] else None,
    )


def preprocess_sections(model: PreprocessModel) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        "selected_gene_ids": list(model.selected_gene_ids),
        "fit_population_tag": model.fit_population_tag,
        "dropped_gene_ids": list(model.dropped_gene_ids),
    }
    return meta, {"preprocess/mean": model.per_gene_mean, "preprocess/sd": model.per_gene_sd}


def preprocess_from_sections(meta: dict, arrays: dict[str, np.ndarray]) -> PreprocessModel:
    return PreprocessModel(
        selected_gene_ids=tuple(meta["selected_gene_ids"]),
        per_gene_mean=arrays["preprocess/mean"],
        per_gene_sd=arrays["preprocess/sd"],
        fit_population_tag=meta["fit_population_tag"],
        dropped_gene_ids=tuple(meta["dropped_gene_ids"]),
    )


def _net_sections(prefix: str, net: DenseNet, arrays: dict[str, np.ndarray]) -> list[dict]:
    layer_meta = []
    for i, layer in enumerate(net.layers):
        arrays[f"{prefix}/{i}/weight"] = layer.weight
        arrays[f"{prefix}/{i}/bias"] = layer.bias
        layer_meta.append({"activation": layer.activation, "dropout": layer.dropout})
    return layer_meta


def _net_from_sections(
    prefix: str, layer_meta: list[dict], arrays: dict[str, np.ndarray], seed: int
) -> DenseNet:
    layers = [
        Layer(
            weight=arrays[f"{prefix}/{i}/weight"].copy(),
            bias=arrays[f"{prefix}/{i}/bias"].copy(),
            activation=lm["activation"],
            dropout=lm["dropout"],
        )
        for i, lm in enumerate(layer_meta)
    ]
    return DenseNet(layers, np.random.default_rng(seed))


def damae_sections(
    prefix: str, model: DamaeModel, arrays: dict[str, np.ndarray]
) -> dict:
    meta = {
        "config": asdict(model.config),
        "best_epoch": model.best_epoch,
        "stopped_early": model.stopped_early,
        "encoder_layers": _net_sections(f"{prefix}/encoder", model.encoder, arrays),
        "decoder_layers": _net_sections(f"{prefix}/decoder", model.decoder, arrays),
    }
    arrays[f"{prefix}/training_log"] = np.array(
        [[r.epoch, r.train_mse, r.val_mse] for r in model.training_log]
    ).reshape(len(model.training_log), 3)
    return meta


def damae_from_sections(
    prefix: str, meta: dict, arrays: dict[str, np.ndarray], preprocess: PreprocessModel | None
) -> DamaeModel:
    config = DamaeConfig(**meta["config"])
    log = tuple(
        EpochRecord(int(e), float(t), float(v)) for e, t, v in arrays[f"{prefix}/training_log"]
    )
    return DamaeModel(
        encoder=_net_from_sections(f"{prefix}/encoder", meta["encoder_layers"], arrays, config.seed),
        decoder=_net_from_sections(f"{prefix}/decoder", meta["decoder_layers"], arrays, config.seed),
        config=config,
        preprocess=preprocess,
        training_log=log,
        best_epoch=int(meta["best_epoch"]),
        stopped_early=bool(meta["stopped_early"]),
    )


def save_damae_set(
    path, models: list[DamaeModel], preprocess: PreprocessModel | None, extra_meta: dict | None = None
) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"kind": "damae_set", "n_models": len(models)}
    if preprocess is not None:
        pre_meta, pre_arrays = preprocess_sections(preprocess)
        meta["preprocess"] = pre_meta
        arrays.update(pre_arrays)
    meta["damae"] = [damae_sections(f"damae/{r}", m, arrays) for r, m in enumerate(models)]
    if extra_meta:
        meta["extra"] = extra_meta
    save_bundle(path, meta, arrays)


def load_damae_set(path) -> tuple[list[DamaeModel], PreprocessModel | None, dict]:
    meta, arrays = load_bundle(path)
    if meta.get("kind") != "damae_set":
        raise BundleError(f"{path}: expected a damae_set bundle, got {meta.get('kind')!r}")
    preprocess = preprocess_from_sections(meta["preprocess"], arrays) if "preprocess" in meta else None
    models = [
        damae_from_sections(f"damae/{r}", dm, arrays, preprocess)
        for r, dm in enumerate(meta["damae"])
    ]
    return models, preprocess, meta.get("extra", {})


def save_ensemble(path, ens: LeapEnsemble, extra_meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {
        "kind": "leap_ensemble",
        "tune_config": asdict(ens.tune_config),
        "skipped": [list(s) for s in ens.skipped],
        "n_representations": ens.n_representations,
    }
    preprocess = ens.damae_models[0].preprocess
    if preprocess is not None:
        pre_meta, pre_arrays = preprocess_sections(preprocess)
        meta["preprocess"] = pre_meta
        arrays.update(pre_arrays)
    meta["damae"] = [damae_sections(f"damae/{r}", m, arrays) for r, m in enumerate(ens.damae_models)]

    fits_meta: dict[str, list[dict]] = {}
    for pid in sorted(ens.fits):
        rep_fits = ens.fits[pid]
        entries = []
        for r, fit in enumerate(rep_fits):
            arrays[f"fits/{pid}/{r}/coef"] = np.stack([m.coefficients for m in fit.fold_models])
            arrays[f"fits/{pid}/{r}/intercept"] = np.array([m.intercept for m in fit.fold_models])
            entries.append(
                {
                    "best_alpha": fit.best_alpha,
                    "cv_score": fit.cv_score,
                    "degenerate": fit.degenerate,
                    "converged": [m.converged for m in fit.fold_models],
                    "fold_ids": [m.fold_id for m in fit.fold_models],
                }
            )
        fits_meta[pid] = entries
    meta["fits"] = fits_meta
    if extra_meta:
        meta["extra"] = extra_meta
    save_bundle(path, meta, arrays)


def load_ensemble(path) -> LeapEnsemble:
    meta, arrays = load_bundle(path)
    if meta.get("kind") != "leap_ensemble":
        raise BundleError(f"{path}: expected a leap_ensemble bundle, got {meta.get('kind')!r}")
    preprocess = preprocess_from_sections(meta["preprocess"], arrays) if "preprocess" in meta else None
    models = [
        damae_from_sections(f"damae/{r}", dm, arrays, preprocess)
        for r, dm in enumerate(meta["damae"])
    ]
    fits: dict[str, tuple[PerturbationFit, ...]] = {}
    for pid, entries in meta["fits"].items():
        rep_fits = []
        for r, entry in enumerate(entries):
            coef = arrays[f"fits/{pid}/{r}/coef"]
            intercept = arrays[f"fits/{pid}/{r}/intercept"]
            fold_models = tuple(
                LinearModel(
                    coefficients=coef[f],
                    intercept=float(intercept[f]),
                    alpha=entry["best_alpha"],
                    fold_id=entry["fold_ids"][f],
                    representation=r,
                    converged=entry["converged"][f],
                )
                for f in range(coef.shape[0])
            )
            rep_fits.append(
                PerturbationFit(
                    perturbation_id=pid,
                    best_alpha=entry["best_alpha"],
                    fold_models=fold_models,
                    cv_score=entry["cv_score"],
                    representation=r,
                    degenerate=entry["degenerate"],
                )
            )
        fits[pid] = tuple(rep_fits)
    return LeapEnsemble(
        damae_models=tuple(models),
        fits=fits,
        tune_config=TuneConfig(**meta["tune_config"]),
        skipped=tuple((p, r) for p, r in meta["skipped"]),
    )
