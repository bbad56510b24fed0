import dataclasses
import json

import pytest

from leap.bundle import load_ensemble
from leap.cli import main
from leap.config import (
    CurationConfig,
    DamaeParams,
    EnsembleParams,
    PreprocessConfig,
    RunConfig,
    TaskParams,
    TuneParams,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
    save_config,
)
from leap.data import SyntheticSpec, load_expression
from leap.errors import ValidationError
from leap.pipeline import load_predictions

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def write_config(tmp_path, **overrides):
    base = dict(
        expression_path=str(tmp_path / "expr.csv"),
        metadata_path=str(tmp_path / "meta.csv"),
        response_path=str(tmp_path / "resp.csv"),
        output_dir=str(tmp_path / "out"),
        synthetic=SyntheticSpec(
            n_samples=70, n_genes=30, n_latent=5, n_perturbations=3,
            n_tissues=2, signal_r2=0.5, noise_sd_expression=0.05, seed=12,
        ),
        curation=CurationConfig(min_samples=3),
        preprocess=PreprocessConfig(k_per_dataset=30),
        damae=DamaeParams(hidden_dim=12, latent_dim=6, max_epochs=6, patience=2, batch_size=32),
        tune=TuneParams(n_folds=3, n_alphas=3),
        ensemble=EnsembleParams(n_representations=2),
        task=TaskParams(challenge="repeated_holdout", fraction=0.2, repeats=1),
        master_seed=3,
    )
    base.update(overrides)
    cfg = RunConfig(**base)
    path = tmp_path / "config.json"
    save_config(cfg, path)
    return cfg, path


# ---------------------------------------------------------------------------
# config round trips
# ---------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg, path = write_config(tmp_path)
    assert load_config(path) == cfg


def test_default_config_documents_every_hyperparameter(tmp_path):
    cfg = default_config()
    payload = config_to_dict(cfg)
    for field in dataclasses.fields(DamaeParams):
        assert field.name in payload["damae"]
    for field in dataclasses.fields(TuneParams):
        assert field.name in payload["tune"]
    assert payload["damae"]["mask_rate"] == 0.3
    assert payload["damae"]["noise_sd"] == 0.01
    assert payload["damae"]["hidden_dim"] == 512
    assert payload["damae"]["latent_dim"] == 256
    assert payload["damae"]["dropout"] == 0.2
    assert payload["damae"]["max_epochs"] == 3000
    assert payload["damae"]["patience"] == 20
    assert payload["damae"]["min_delta"] == 1e-5
    assert payload["tune"]["n_folds"] == 5
    assert payload["tune"]["n_alphas"] == 10
    assert payload["ensemble"]["n_representations"] == 5


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError, match="unknown"):
        config_from_dict({"no_such_field": 1})


def test_config_rejects_bad_enum():
    with pytest.raises(ValidationError):
        config_from_dict({"task": {"challenge": "bogus"}})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def test_init_config_subcommand(tmp_path, capsys):
    out = tmp_path / "cfg.json"
    assert main(["init-config", "--out", str(out)]) == 0
    loaded = load_config(out)
    assert loaded.damae.latent_dim == 256


def test_synth_subcommand_deterministic(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["synth", "--config", str(path)]) == 0
    first = (tmp_path / "expr.csv").read_bytes()
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_samples"] == 70
    assert main(["synth", "--config", str(path)]) == 0
    assert (tmp_path / "expr.csv").read_bytes() == first
    m = load_expression(cfg.expression_path, cfg.metadata_path)
    assert m.n_samples == 70


def test_preprocess_subcommand(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["synth", "--config", str(path)]) == 0
    capsys.readouterr()
    assert main(["preprocess", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "70 samples x 30 genes" in out


def test_train_damae_subcommand_and_cache(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["train-damae", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert out.count("model ") == 2
    assert "val mse" in out
    # second invocation reuses the cached stage
    assert main(["train-damae", "--config", str(path)]) == 0
    assert (tmp_path / "out" / "cache").exists()


def test_run_subcommand_end_to_end(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["run", "--config", str(path), "--baseline", "knn"]) == 0
    out = capsys.readouterr().out
    assert "mean per-perturbation spearman" in out
    assert "ps-knn" in out
    assert (tmp_path / "out" / "report.csv").exists()
    assert (tmp_path / "out" / "report_knn.csv").exists()
    assert (tmp_path / "out" / "summary.json").exists()
    assert (tmp_path / "out" / "ensemble.bundle").exists()


def test_fit_predict_evaluate_flow(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["fit", "--config", str(path)]) == 0
    bundle_path = tmp_path / "out" / "ensemble.bundle"
    assert bundle_path.exists()

    pred_path = tmp_path / "out" / "predictions.csv"
    assert main([
        "predict", "--config", str(path), "--out", str(pred_path),
    ]) == 0
    preds = load_predictions(pred_path)

    # CLI predictions equal library-level predictions bitwise (17g round trip)
    from leap.ensemble import predict as lib_predict
    from leap.preprocess import apply, log_transform

    ens = load_ensemble(bundle_path)
    expr = load_expression(cfg.expression_path, cfg.metadata_path)
    std = apply(ens.damae_models[0].preprocess, log_transform(expr))
    table = lib_predict(ens, std, ens.perturbation_ids())
    for i, sid in enumerate(std.sample_ids[:20]):
        for j, pid in enumerate(ens.perturbation_ids()):
            assert preds.lookup(sid, pid) == table.values[i, j]

    assert main(["evaluate", "--config", str(path), "--predictions", str(pred_path)]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert "aggregate" in summary


def test_predict_representations_subset(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["fit", "--config", str(path)]) == 0
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    assert main(["predict", "--config", str(path), "--out", str(out_a)]) == 0
    assert main([
        "predict", "--config", str(path), "--out", str(out_b),
        "--representations-subset", "0",
    ]) == 0
    assert out_a.read_bytes() != out_b.read_bytes()


def test_predict_rejects_tampered_bundle(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["fit", "--config", str(path)]) == 0
    bundle_path = tmp_path / "out" / "ensemble.bundle"
    raw = bytearray(bundle_path.read_bytes())
    raw[100] ^= 0x01
    bundle_path.write_bytes(bytes(raw))
    rc = main(["predict", "--config", str(path), "--out", str(tmp_path / "p.csv")])
    assert rc == 4
    assert "checksum" in capsys.readouterr().err


def test_ablate_subcommand(tmp_path, capsys):
    cfg, path = write_config(tmp_path, output_dir=str(tmp_path / "abl"))
    rc = main(["ablate", "--config", str(path), "--steps", "fold_ensemble,full_leap"])
    assert rc == 0
    assert (tmp_path / "abl" / "ablation.csv").exists()
    out = capsys.readouterr().out
    assert "fold_ensemble" in out and "full_leap" in out


def test_ablate_unknown_step_exit_code(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["ablate", "--config", str(path), "--steps", "bogus"]) == 2


def test_missing_config_is_validation_error(capsys):
    assert main(["run"]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_file_is_io_or_validation(tmp_path, capsys):
    cfg, path = write_config(tmp_path, synthetic=None)
    assert main(["run", "--config", str(path)]) == 4


def test_seed_override_changes_report(tmp_path, capsys):
    cfg, path = write_config(tmp_path)
    assert main(["run", "--config", str(path)]) == 0
    first = (tmp_path / "out" / "report.csv").read_bytes()
    assert main(["run", "--config", str(path), "--seed", "99"]) == 0
    assert (tmp_path / "out" / "report.csv").read_bytes() != first


def test_workers_env_fallback(monkeypatch):
    from leap.cli import _workers

    class Args:
        workers = None

    monkeypatch.setenv("LEAP_WORKERS", "3")
    assert _workers(Args()) == 3
    Args.workers = 2
    assert _workers(Args()) == 2
    monkeypatch.delenv("LEAP_WORKERS")
    Args.workers = None
    assert _workers(Args()) is None
