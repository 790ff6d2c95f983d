import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from ctkae import autodiff
from ctkae.autodiff import Primitive
from ctkae.cli import main
from ctkae.config import dumps, load
from ctkae.data import linear_oracle_system, load_dataset
from ctkae.linalg import matrix_exp

GEN = {"generator": {"kind": "linear_oracle", "nz_true": 4, "n_d": 16, "n_traj": 4, "T": 20,
                     "splits": {"train": 0, "test": 1}}}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate", "--config", write_cfg(d / "gen.json", GEN), "--out", str(d)]) == 0
    return d


def train_cfg(data_dir, **train):
    return {"dataset": {"train": str(data_dir / "train.kaed"), "test": str(data_dir / "test.kaed")},
            "model": {"nz": 6, "hidden": [16], "rank": 2},
            "train": {"epochs": 2, "warmup_epochs": 1, "horizon": 4, "batch_size": 16, **train},
            "eval": {"horizon": 4}}


@pytest.fixture(scope="module")
def trained_dir(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", write_cfg(d / "t.json", train_cfg(data_dir)), "--out", str(d)]) == 0
    return d


# -- generate -------------------------------------------------------------------------

def test_generate_writes_loadable_oracle_data(data_dir):
    ds = load_dataset(data_dir / "train.kaed")
    assert ds.n_traj == 4 and ds.length == 20 and ds.n_d == 16
    gen, G = linear_oracle_system(0, 4, 16)
    x = ds.trajectories[0].reshape(20, -1)
    A = G @ matrix_exp(gen(ds.phis[0]) * ds.dt) @ np.linalg.pinv(G)
    assert np.max(np.abs(x[1:] - x[:-1] @ A.T)) < 1e-10
    resolved = json.loads((data_dir / "resolved_config.json").read_text())
    assert resolved["generator"]["dt"] == 0.1 and resolved["command"] == "generate"


def test_generate_is_byte_deterministic(tmp_path, data_dir):
    assert main(["generate", "--config", write_cfg(tmp_path / "g.json", GEN), "--out", str(tmp_path)]) == 0
    for name in ("train.kaed", "test.kaed"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_generate_seed_flag_changes_data(tmp_path, data_dir):
    assert main(["generate", "--config", write_cfg(tmp_path / "g.json", GEN), "--seed", "5",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train.kaed").read_bytes() != (data_dir / "train.kaed").read_bytes()


def test_generate_missing_key_named(tmp_path, capsys):
    rc = main(["generate", "--config", write_cfg(tmp_path / "g.json", {"generator": {"T": 4}}),
               "--out", str(tmp_path)])
    assert rc == 1
    assert "generator.kind" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    rc = main(["generate", "--config", write_cfg(tmp_path / "g.json", {**GEN, "bogus": 1}), "--out", str(tmp_path)])
    assert rc == 1 and "bogus" in capsys.readouterr().err


# -- train -----------------------------------------------------------------------------

def test_train_smoke_run_is_fast(data_dir, tmp_path):
    t0 = time.perf_counter()
    rc = main(["train", "--config", write_cfg(tmp_path / "t.json", train_cfg(data_dir)), "--out", str(tmp_path)])
    assert rc == 0 and time.perf_counter() - t0 < 60
    rows = read_csv(tmp_path / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert {"total", "recon", "pred", "lr"} <= set(rows[0])
    assert (tmp_path / "checkpoint.kaew").exists() and (tmp_path / "eval_rk4.csv").exists()
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["train"]["lr_peak"] == 5e-4 and resolved["loss"]["alpha"] == 1.0


def test_resume_reproduces_next_epoch_loss(data_dir, tmp_path):
    cfg = train_cfg(data_dir, epochs=3)
    full, part, rest = tmp_path / "full", tmp_path / "part", tmp_path / "rest"
    assert main(["train", "--config", write_cfg(tmp_path / "a.json", cfg), "--out", str(full)]) == 0
    assert main(["train", "--config", write_cfg(tmp_path / "b.json", {**cfg, "stop_epoch": 2}),
                 "--out", str(part)]) == 0
    resume = {**cfg, "checkpoint": str(part / "checkpoint.kaew")}
    assert main(["train", "--config", write_cfg(tmp_path / "c.json", resume), "--out", str(rest)]) == 0
    expected = read_csv(full / "metrics.csv")[2]
    got = read_csv(rest / "metrics.csv")
    assert len(got) == 1 and got[0] == expected
    assert (rest / "checkpoint.kaew").read_bytes() == (full / "checkpoint.kaew").read_bytes()


def test_negative_loss_weight_is_config_error(data_dir, tmp_path, capsys):
    cfg = {**train_cfg(data_dir), "loss": {"beta": -0.5}}
    assert main(["train", "--config", write_cfg(tmp_path / "t.json", cfg), "--out", str(tmp_path)]) == 1
    assert "beta" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path):
    cfg = {"dataset": {"train": str(tmp_path / "nope.kaed")}}
    assert main(["train", "--config", write_cfg(tmp_path / "t.json", cfg), "--out", str(tmp_path)]) == 2


def test_corrupt_dataset_is_data_error(data_dir, tmp_path):
    raw = bytearray((data_dir / "train.kaed").read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "bad.kaed").write_bytes(bytes(raw))
    cfg = {"dataset": {"train": str(tmp_path / "bad.kaed")}}
    assert main(["train", "--config", write_cfg(tmp_path / "t.json", cfg), "--out", str(tmp_path)]) == 2


def test_divergent_training_is_numeric_error(data_dir, tmp_path, capsys):
    cfg = train_cfg(data_dir, lr_peak=1e6, scheme="euler")
    cfg["model"]["dissipation"] = [0.01, 0.1]
    rc = main(["train", "--config", write_cfg(tmp_path / "t.json", cfg), "--out", str(tmp_path)])
    assert rc == 3
    assert "non-finite" in capsys.readouterr().err


# -- eval ----------------------------------------------------------------------------------

@pytest.mark.parametrize("scheme,name", [("euler", "euler"), ("rk4", "rk4"), ("midpoint", "implicit_midpoint"),
                                         ("exp", "exp")])
def test_eval_every_scheme(data_dir, trained_dir, tmp_path, scheme, name):
    cfg = {"dataset": {"test": str(data_dir / "test.kaed")}, "checkpoint": str(trained_dir / "checkpoint.kaew"),
           "eval": {"horizon": 6}}
    rc = main(["eval", "--config", write_cfg(tmp_path / "e.json", cfg), "--scheme", scheme, "--out", str(tmp_path)])
    assert rc == 0
    rows = read_csv(tmp_path / f"eval_{name}.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert all(float(r["mse"]) >= 0 for r in rows)


def test_eval_rk4_and_exp_agree(data_dir, trained_dir, tmp_path):
    cfg = {"dataset": {"test": str(data_dir / "test.kaed")}, "checkpoint": str(trained_dir / "checkpoint.kaew")}
    path = write_cfg(tmp_path / "e.json", cfg)
    mse = {}
    for scheme in ("rk4", "exp"):
        assert main(["eval", "--config", path, "--scheme", scheme, "--out", str(tmp_path)]) == 0
        mse[scheme] = np.array([float(r["mse"]) for r in read_csv(tmp_path / f"eval_{scheme}.csv")])
    np.testing.assert_allclose(mse["rk4"], mse["exp"], rtol=5e-5)


def test_eval_missing_checkpoint(data_dir, tmp_path):
    cfg = {"dataset": {"test": str(data_dir / "test.kaed")}, "checkpoint": str(tmp_path / "none.kaew")}
    assert main(["eval", "--config", write_cfg(tmp_path / "e.json", cfg), "--out", str(tmp_path)]) == 2


def test_eval_requires_checkpoint_key(data_dir, tmp_path, capsys):
    cfg = {"dataset": {"test": str(data_dir / "test.kaed")}}
    assert main(["eval", "--config", write_cfg(tmp_path / "e.json", cfg), "--out", str(tmp_path)]) == 1
    assert "checkpoint" in capsys.readouterr().err


# -- check-integrators -------------------------------------------------------------------------

def test_check_integrators_on_untrained_weights(data_dir, trained_dir, tmp_path):
    cfg = {"dataset": {"test": str(data_dir / "test.kaed")}, "checkpoint": str(trained_dir / "checkpoint.kaew"),
           "integrators": {"n_steps": 12}}
    assert main(["check-integrators", "--config", write_cfg(tmp_path / "c.json", cfg), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "integrators_summary.json").read_text())
    assert summary["n_steps"] == 12
    assert summary["max_latent_rel_l2_rk4_vs_exp"] >= 0
    rows = read_csv(tmp_path / "integrators_rk4_vs_exp.csv")
    assert len(rows) == 4 * 12
    align = read_csv(tmp_path / "integrators_dt_alignment.csv")
    times = sorted({round(float(r["time"]), 6) for r in align})
    assert times == [round(0.2 * k, 6) for k in range(1, 11)]
    assert {"rk4_dt0.05_vs_rk4_dt0.1", "rk4_dt0.1_vs_rk4_dt0.2", "rk4_dt0.05_vs_rk4_dt0.2"} <= set(align[0])


# -- gradcheck -----------------------------------------------------------------------------------

def test_gradcheck_default_passes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert len(rows) == 20
    assert all(r["pass"] == "1" and float(r["max_rel_error"]) < 1e-4 for r in rows)


def _scaled_softplus_vjp(monkeypatch, factor):
    good = autodiff.PRIMITIVES["softplus"]
    bad = Primitive(good.forward, lambda g, o, a: tuple(factor * x for x in good.vjp(g, o, a)))
    monkeypatch.setitem(autodiff.PRIMITIVES, "softplus", bad)


def test_gradcheck_names_corrupted_parameter(tmp_path, monkeypatch, capsys):
    _scaled_softplus_vjp(monkeypatch, 2.0)
    assert main(["gradcheck", "--out", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "koopman.d" in err
    failed = {r["parameter"] for r in read_csv(tmp_path / "gradcheck.csv") if r["pass"] == "0"}
    assert failed == {"koopman.d"}


def test_gradcheck_tolerance_flag(tmp_path, monkeypatch):
    _scaled_softplus_vjp(monkeypatch, 1.001)
    assert main(["gradcheck", "--tolerance", "1e-6", "--out", str(tmp_path / "a")]) == 3
    assert main(["gradcheck", "--tolerance", "1e-2", "--out", str(tmp_path / "b")]) == 0


def test_gradcheck_rejects_non_positive_tolerance(tmp_path):
    assert main(["gradcheck", "--tolerance", "0", "--out", str(tmp_path)]) == 1


# -- general contract -----------------------------------------------------------------------------

def test_every_command_prints_resolved_config(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "3", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert dumps(resolved) in printed
    assert resolved["seed"] == 3 and resolved["train"]["seed"] == 3
    assert resolved["gradcheck"]["tolerance"] == 1e-4


def test_unknown_command_exits_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["plot"])
    assert exc.value.code == 2


@pytest.mark.parametrize("name,command", [("generate", "generate"), ("generate_vortex", "generate"),
                                          ("train", "train"), ("smoke", "train"), ("eval", "eval"),
                                          ("check_integrators", "check-integrators")])
def test_shipped_configs_resolve(name, command):
    root = Path(__file__).resolve().parents[1]
    cfg = load(root / "configs" / f"{name}.json", command)
    assert cfg["command"] == command
