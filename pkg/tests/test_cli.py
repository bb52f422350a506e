import csv
import json

import numpy as np
import pytest

from kia import cli
from kia.config import ExperimentConfig
from kia.data import load_dataset, save_dataset
from kia.errors import ConfigurationError

SMALL = {
    "pendulum": {"n_points": 200, "t_span": [0.0, 20.0], "substeps": 10, "embed_dim": 8, "lengths": [40, 60, 100]},
    "model": {"latent_dim": 4, "encoder_hidden": [8], "decoder_hidden": [8]},
    "train": {"max_epochs": 3, "k_steps": 2},
    "evaluate": {"horizon": 50, "inits": 5},
}

SMALL_CLIMATE = {
    "kind": "climate",
    "climate": {"H": 4, "W": 4, "years": 3},
    "model": {"latent_dim": 4, "encoder_hidden": [8], "decoder_hidden": [8]},
    "train": {"max_epochs": 2},
    "evaluate": {"horizon": 30, "inits": 5},
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(tmp, config, seed=0, variant="KIA"):
    data, model, ev = tmp / "data", tmp / f"train_{variant}", tmp / f"eval_{variant}"
    assert run("simulate", "--config", config, "--seed", seed, "--out", data) == 0
    assert run("train", "--config", config, "--seed", seed, "--data", data / "dataset.bin",
               "--variant", variant, "--out", model) == 0
    assert run("evaluate", "--config", config, "--data", data / "dataset.bin",
               "--model", model / "model.ckpt", "--out", ev) == 0
    return data, model, ev


# -- config -----------------------------------------------------------------


def test_config_defaults_follow_hyperparameter_table():
    cfg = ExperimentConfig()
    spec = cfg.model_spec(64, 0)
    assert spec.latent_dim == 8 and spec.encoder_hidden == (128, 64)
    tc = cfg.train_config()
    assert (tc.batch_size, tc.learning_rate, tc.max_epochs, tc.patience) == (64, 1e-3, 500, 20)
    w = cfg.loss_weights()
    assert (w.recon, w.fwd, w.bwd) == (1.0, 1.0, 0.5)
    assert cfg.horizon == 2000 and cfg.raw["evaluate"]["inits"] == 30


def test_config_task_dependent_defaults():
    pend, clim = ExperimentConfig(), ExperimentConfig.from_dict({"kind": "climate"})
    assert (pend.depth, pend.train_config().k_steps, pend.horizon) == (1, 16, 2000)
    assert (clim.depth, clim.train_config().k_steps, clim.horizon) == (2, 4, 180)
    assert ExperimentConfig.from_dict({"kind": "climate", "model": {"depth": 3}}).depth == 3
    eff = ExperimentConfig.from_dict({"variant": "KAE"}).effective()
    assert eff["model"]["koopman_init"] == "glorot" and eff["model"]["depth"] == 1


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="trian"):
        ExperimentConfig.from_dict({"trian": {}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"train": {"epochs": 3}})


def test_config_override_and_echo():
    cfg = ExperimentConfig.from_dict({"seed": 4}).override("train.k_steps", 16)
    assert cfg.train_config().k_steps == 16
    eff = json.loads(cfg.to_json())
    assert eff["seed"] == 4 and eff["train"]["k_steps"] == 16


def test_kae_refuses_explicit_backward_weight():
    with pytest.raises(ConfigurationError, match="KAE"):
        ExperimentConfig.from_dict({"variant": "KAE", "weights": {"bwd": 0.5}})
    ExperimentConfig.from_dict({"variant": "KAE"})  # default weight is pinned to 0 during training


# -- simulate ---------------------------------------------------------------


def test_simulate_default_shape(tmp_path):
    assert run("simulate", "--out", tmp_path, "--theta0", 2.4) == 0
    ds = load_dataset(tmp_path / "dataset.bin")
    assert ds.observations.shape == (4000, 64)
    assert ds.meta["theta0"] == 2.4
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["config"]["pendulum"]["theta0"] == 2.4
    assert meta["format_versions"]["dataset"] == 1


def test_simulate_bitwise_repeatable(tmp_path, small_config):
    for d in ("a", "b"):
        assert run("simulate", "--config", small_config, "--seed", 3, "--noise", 0.1, "--out", tmp_path / d) == 0
    assert (tmp_path / "a/dataset.bin").read_bytes() == (tmp_path / "b/dataset.bin").read_bytes()


def test_simulate_invalid_params_exit_code(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, "--noise", -1) == cli.EXIT_CONFIG
    assert "noise" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run("simulate", "--config", p, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--config", tmp_path / "missing.json", "--out", tmp_path) == cli.EXIT_CONFIG


# -- train / evaluate -------------------------------------------------------


def test_train_writes_artifacts(tmp_path, small_config, capsys):
    data, model, ev = pipeline(tmp_path, small_config)
    for f in ("model.ckpt", "history.csv", "metadata.json"):
        assert (model / f).exists()
    with open(model / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "L_recon", "L_fwd", "L_bwd", "L_total_train", "L_total_val"]
    assert 1 <= len(rows) - 1 <= 3
    out = capsys.readouterr().out
    assert "# config " in out
    summary = json.loads((ev / "report.json").read_text())
    assert summary["horizon"] == 50 and summary["n_inits"] == 5
    assert summary["meta"]["variant"] == "KIA"
    assert "KIA | " in out


def test_train_kae_rejects_backward_weight(tmp_path, small_config, capsys):
    run("simulate", "--config", small_config, "--out", tmp_path / "d")
    code = run("train", "--config", small_config, "--data", tmp_path / "d/dataset.bin",
               "--variant", "KAE", "--lambda-bwd", 0.5, "--out", tmp_path / "m")
    assert code == cli.EXIT_CONFIG
    assert "lambda_bwd" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path, small_config, capsys):
    run("simulate", "--config", small_config, "--out", tmp_path / "d")
    ds = load_dataset(tmp_path / "d/dataset.bin")
    ds.observations = ds.observations * 1e200  # squared errors overflow
    save_dataset(ds, tmp_path / "d/huge.bin")
    code = run("train", "--config", small_config, "--data", tmp_path / "d/huge.bin", "--out", tmp_path / "m")
    assert code == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
    meta = json.loads((tmp_path / "m/metadata.json").read_text())
    assert meta["status"] == "diverged"


def test_evaluate_shape_mismatch_names_shapes(tmp_path, small_config, capsys):
    data, model, _ = pipeline(tmp_path, small_config)
    run("simulate", "--kind", "climate", "--out", tmp_path / "sst")
    code = run("evaluate", "--data", tmp_path / "sst/dataset.bin", "--model", model / "model.ckpt",
               "--out", tmp_path / "x")
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "8" in err and "64" in err


def test_evaluate_rerun_identical(tmp_path, small_config):
    data, model, ev = pipeline(tmp_path, small_config)
    assert run("evaluate", "--config", small_config, "--data", data / "dataset.bin",
               "--model", model / "model.ckpt", "--out", tmp_path / "again") == 0
    for f in ("report.csv", "report.json"):
        assert (ev / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_climate_baselines_and_k_day(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL_CLIMATE))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "d") == 0
    for b in ("persistence", "climatology"):
        assert run("evaluate", "--config", cfg, "--data", tmp_path / "d/dataset.bin", "--baseline", b,
                   "--k-day", "1,7,14,21,30", "--out", tmp_path / b) == 0
    with open(tmp_path / "climatology/kday.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "region", "K1", "K7", "K14", "K21", "K30"]
    vals = [float(v) for v in rows[1][2:]]
    assert max(vals) - min(vals) <= 1e-12


def test_climatology_baseline_needs_grid(tmp_path, small_config):
    run("simulate", "--config", small_config, "--out", tmp_path / "d")
    assert run("evaluate", "--data", tmp_path / "d/dataset.bin", "--baseline", "climatology",
               "--out", tmp_path / "e") == cli.EXIT_CONFIG


# -- report -----------------------------------------------------------------


def test_report_three_variants(tmp_path, small_config, capsys):
    evs = [pipeline(tmp_path, small_config, variant=v)[2] for v in ("KIA", "KAE", "CKAE")]
    out = tmp_path / "rep"
    assert run("report", *evs, tmp_path / "missing", "--out", out, "--log") == 0
    captured = capsys.readouterr()
    assert "skipping" in captured.err
    with open(out / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "setting", "all", "first100", "last100"]
    assert [r[0] for r in rows[1:]] == ["KIA", "KAE", "CKAE"]
    figs = json.loads((out / "figures.json").read_text())
    assert len(figs) == 1 and figs[0]["curves"] == ["KIA", "KAE", "CKAE"]
    svg = (out / figs[0]["file"]).read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert "xlink:href=\"http" not in svg


def test_report_single_run_and_deterministic_svg(tmp_path, small_config):
    _, _, ev = pipeline(tmp_path, small_config)
    assert run("report", ev, "--out", tmp_path / "r1") == 0
    assert run("report", ev, "--out", tmp_path / "r2") == 0
    figs = json.loads((tmp_path / "r1/figures.json").read_text())
    assert figs[0]["curves"] == ["KIA"]
    assert (tmp_path / "r1/errors_1.svg").read_bytes() == (tmp_path / "r2/errors_1.svg").read_bytes()


def test_report_without_runs(tmp_path):
    assert run("report", tmp_path / "nothing", "--out", tmp_path / "r") == cli.EXIT_EMPTY


# -- ablation ---------------------------------------------------------------


def test_ablation_rows(tmp_path, small_config):
    assert run("ablation", "--config", small_config, "--sizes", "20,30,40", "--out", tmp_path) == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert [int(r[0]) for r in rows[1:]] == [20, 30, 40]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])


def test_ablation_size_too_large(tmp_path, small_config, capsys):
    assert run("ablation", "--config", small_config, "--sizes", "20,80", "--out", tmp_path) == cli.EXIT_CONFIG
    assert "exceeds" in capsys.readouterr().err
