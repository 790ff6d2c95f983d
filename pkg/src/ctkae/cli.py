"""``kae`` command line: generate | train | eval | check-integrators | gradcheck.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .autodiff import NonFiniteError, ShapeError
from .data import DatasetFormatError, TrajectoryDataset, generate_linear_oracle, load_dataset, save_dataset
from .linalg import ConvergenceError, SingularMatrixError
from .losses import LossWeights
from .model import CheckpointError, KoopmanAutoencoder, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (AdamState, TrainConfig, TrainingError, TrainState, _write_rows, check_integrators, evaluate,
                      gradcheck, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class GradcheckFailure(ArithmeticError):
    pass


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg, out: Path):
    text = C.dumps(cfg)
    (out / "resolved_config.json").write_text(text + "\n")
    print(text)


def _load_data(path) -> TrajectoryDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DatasetFormatError(f"dataset not found: {path}") from None


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(**cfg["train"], loss=LossWeights(**cfg["loss"]))


def _model_config(cfg, n_d) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "n_d": n_d})


def _load_model(path):
    try:
        arrays, snapshot = load_checkpoint(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    model = KoopmanAutoencoder(ModelConfig.from_dict(snapshot["model"]))
    model.load_state_dict(arrays)
    return model, arrays, snapshot


def cmd_generate(cfg) -> int:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    gen = dict(cfg["generator"])
    kind, splits = gen.pop("kind"), gen.pop("splits")
    for name, split in splits.items():
        ds = C.GENERATORS[kind](**gen, split=int(split))
        path = out / f"{name}.kaed"
        save_dataset(ds, path)
        print(f"wrote {path} ({ds.n_traj} trajectories x {ds.length} frames, state {ds.state_shape})")
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    ds = _load_data(cfg["dataset"]["train"])
    tcfg = _train_config(cfg)
    state = TrainState()
    if cfg["checkpoint"]:
        model, arrays, snapshot = _load_model(cfg["checkpoint"])
        if model.cfg.n_d != ds.n_d:
            raise DatasetFormatError(f"checkpoint expects n_d={model.cfg.n_d}, dataset has {ds.n_d}")
        state = TrainState(epoch=int(snapshot.get("epoch", 0)), adam=AdamState.from_arrays(arrays))
    else:
        model = KoopmanAutoencoder(_model_config(cfg, ds.n_d))
    record, state = train(ds, model, tcfg, state=state, stop_epoch=cfg["stop_epoch"],
                          log=lambda r: print(f"epoch {r['epoch']:4d} lr {r['lr']:.3e} loss {r['total']:.6g}"))
    snapshot = {"model": model.cfg.to_dict(), "train": tcfg.to_dict(), "epoch": state.epoch}
    save_checkpoint(out / "checkpoint.kaew", {**model.state_dict(), **state.adam.to_arrays()}, snapshot)
    if record.epochs:
        record.write_csv(out / "metrics.csv")
    if cfg["dataset"]["test"]:
        ev = cfg["eval"]
        test = _load_data(cfg["dataset"]["test"])
        res = evaluate(test, model, ev["horizon"], ev["scheme"], ev["stride"])
        _write_rows(out / f"eval_{ev['scheme']}.csv", res.rows(test.dt))
        print(f"eval {ev['scheme']}: mean MSE {res.mean_mse:.6g}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    model, _, _ = _load_model(cfg["checkpoint"])
    test = _load_data(cfg["dataset"]["test"])
    ev = cfg["eval"]
    res = evaluate(test, model, ev["horizon"], ev["scheme"], ev["stride"])
    path = out / f"eval_{ev['scheme']}.csv"
    _write_rows(path, res.rows(test.dt))
    print(f"eval {ev['scheme']}: mean MSE {res.mean_mse:.6g} over {res.n_windows} windows -> {path}")
    return EXIT_OK


def cmd_check_integrators(cfg) -> int:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    model, _, _ = _load_model(cfg["checkpoint"])
    test = _load_data(cfg["dataset"]["test"])
    ic = cfg["integrators"]
    rep = check_integrators(model, test, n_steps=ic["n_steps"], step_sizes=ic["step_sizes"],
                            t_end=ic["t_end"], align_every=ic["align_every"])
    _write_rows(out / "integrators_rk4_vs_exp.csv", rep["rk4_vs_exp"])
    _write_rows(out / "integrators_dt_alignment.csv", rep["dt_alignment"])
    (out / "integrators_summary.json").write_text(json.dumps(rep["summary"], indent=2, sort_keys=True) + "\n")
    print(json.dumps(rep["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    g = cfg["gradcheck"]
    seed = cfg["seed"] or 0
    if cfg["dataset"]["train"]:
        ds = _load_data(cfg["dataset"]["train"])
    else:
        ds = generate_linear_oracle(seed=seed, nz_true=min(2, g["nz"]), n_d=g["n_d"], T=g["horizon"] + 3, n_traj=2)
    mcfg = ModelConfig(n_d=ds.n_d, nz=g["nz"], hidden=tuple(g["hidden"]), rank=g["rank"],
                       hyper_hidden=g["hyper_hidden"], embed_count=g["embed_count"], seed=seed)
    model = KoopmanAutoencoder(mcfg)
    # lora_B starts at zero, which would hide the low-rank and hypernetwork paths
    lora_B = model.params["koopman.lora_B"]
    lora_B.data = np.random.default_rng([seed, 7]).normal(scale=0.3, size=lora_B.shape)
    tcfg = TrainConfig(**{**cfg["train"], "horizon": g["horizon"]}, loss=LossWeights(**cfg["loss"]))
    errors = gradcheck(model, ds, tcfg, n_windows=g["n_windows"], h=g["h"], eps=g["eps"])
    rows = [{"parameter": k, "max_rel_error": v, "pass": int(v < g["tolerance"])} for k, v in errors.items()]
    _write_rows(out / "gradcheck.csv", rows)
    for r in rows:
        print(f"{'ok  ' if r['pass'] else 'FAIL'} {r['parameter']:28s} {r['max_rel_error']:.3e}")
    failed = [r["parameter"] for r in rows if not r["pass"]]
    if failed:
        raise GradcheckFailure(f"gradient check failed at tolerance {g['tolerance']:g} for: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-integrators": cmd_check_integrators,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kae", description="Continuous-time Koopman autoencoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--scheme", choices=["euler", "rk4", "midpoint", "exp"], help="evaluation integrator")
        p.add_argument("--tolerance", type=float, help="gradcheck relative tolerance")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = C.load(args.config, args.command, seed=args.seed, out=args.out)
        else:
            cfg = C.resolve({}, args.command, seed=args.seed, out=args.out)
        if args.scheme:
            cfg["eval"]["scheme"] = "implicit_midpoint" if args.scheme == "midpoint" else args.scheme
        if args.tolerance is not None:
            if not args.tolerance > 0:
                raise C.ConfigError("--tolerance must be positive")
            cfg["gradcheck"]["tolerance"] = args.tolerance
        return COMMANDS[args.command](cfg)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError, GradcheckFailure, ConvergenceError, SingularMatrixError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"config error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
