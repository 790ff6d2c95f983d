"""Rollout training with AdamW and a cosine warm-up schedule, plus evaluation.

One training batch: encode the AR-2 context, reconstruct the present
frame, integrate N latent steps with the configured scheme, decode every
step and combine all objectives with :func:`losses.loss_total`.
"""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import losses as L
from .autodiff import Graph, NonFiniteError, Tensor, concat, finite_difference_check
from .data import TrajectoryDataset, gather_windows, window_index
from .dynamics import STEPS, koopman_matrix, step_rk4
from .linalg import matrix_exp
from .model import KoopmanAutoencoder

TRAIN_SCHEMES = ("euler", "rk4")
EVAL_SCHEMES = ("euler", "rk4", "implicit_midpoint", "exp")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    horizon: int = 8
    lr_peak: float = 5e-4
    lr_final: float = 1e-5
    warmup_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 0.0  # global-norm cap; 0 disables
    scheme: str = "rk4"
    stride: int = 1
    seed: int = 0
    loss: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = L.LossWeights(**self.loss)
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.horizon < 1 or self.stride < 1:
            raise ValueError("epochs, batch_size, horizon and stride must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warm-up epochs must be smaller than the epoch count")
        if not (self.lr_peak > 0 and self.lr_final > 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight decay and gradient clip must be >= 0")
        if self.scheme not in TRAIN_SCHEMES:
            raise ValueError(f"training scheme must be one of {TRAIN_SCHEMES}, got {self.scheme!r}")
        if self.horizon < 2 and self.loss.temporal == "cosine":
            raise ValueError("cosine temporal weights need horizon >= 2")
        self.loss.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over the warm-up epochs, then cosine peak -> final."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_peak * epoch / cfg.warmup_epochs
    span = cfg.epochs - 1 - cfg.warmup_epochs
    if span == 0:
        return cfg.lr_peak
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step)])}
        out.update({f"adam.m.{k}": a for k, a in self.m.items()})
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "AdamState":
        st = cls(step=int(arrays["adam.step"][0]))
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                st.m[k[len("adam.m."):]] = a.copy()
            elif k.startswith("adam.v."):
                st.v[k[len("adam.v."):]] = a.copy()
        return st


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, never biases or the dissipation vector."""
    return not (name.endswith("bias") or name.endswith(".b1") or name.endswith(".b2") or name == "koopman.d")


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                   cfg: TrainConfig, lr: float):
    """AdamW: bias-corrected moments plus decoupled weight decay.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient of {name!r} has {bad} non-finite entries; step aborted")
    if cfg.grad_clip > 0:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / total) for k, g in grads.items()}
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        with np.errstate(over="ignore", invalid="ignore"):
            m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
            v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            upd = p * (1.0 - lr * cfg.weight_decay) if decays(name) else p
            new_params[name] = upd - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if not (np.all(np.isfinite(new_params[name])) and np.all(np.isfinite(v))):
            raise NonFiniteError(f"update of {name!r} overflowed (max |grad| {np.max(np.abs(g)):.3g}); step aborted")
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# -- batch objective -------------------------------------------------------------

def batch_loss(model: KoopmanAutoencoder, context: np.ndarray, targets: np.ndarray, phi: np.ndarray,
               dt: float, cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> L.LossReport:
    """Full objective for a stacked batch: context (B, 2, C, H, W), targets (B, N, C, H, W)."""
    B, N = targets.shape[:2]
    shape = targets.shape[2:]
    n_d = int(np.prod(shape))
    w = cfg.loss
    step = STEPS[cfg.scheme]
    x_prev = context[:, 0].reshape(B, n_d)
    x_cur = context[:, 1].reshape(B, n_d)
    X = np.ascontiguousarray(np.swapaxes(targets, 0, 1))  # (N, B, C, H, W)

    z0 = model.encode(x_cur, x_prev)
    x0_hat = model.decode(z0)
    gen = model.operator.action(phi, rng=rng)
    z, zs = z0, []
    for _ in range(N):
        z = step(gen, z, dt)
        zs.append(z)
    Z = concat(zs, axis=0)  # (N*B, Nz) step-major
    Xh = model.decode(Z).reshape((N, B) + shape)

    comps = {"recon": L.loss_recon(x0_hat.reshape((B,) + shape), x_cur.reshape((B,) + shape), channel_axis=1)}
    if w.alpha > 0:
        comps["pred"] = L.loss_pred(Xh, X, L.cosine_weights(N, w.temporal), time_axis=0, channel_axis=2)
    if w.beta > 0:
        E = model.encode_present(X.reshape(N * B, n_d))
        if w.detach_latent_targets:
            E = Tensor(E.data)
        nz = E.shape[-1]
        comps["consistency"] = L.loss_latent_consistency(Z.reshape(N, B, nz), E.reshape(N, B, nz), time_axis=0)
        starts = concat([z0, E[:(N - 1) * B]], axis=0) if N > 1 else z0
        comps["lin"] = L.loss_linearity(starts, E, gen.tile(N) if N > 1 else gen, dt=dt, step=step)
        comps["cos"] = L.loss_cosine_dir(Z, E)
        prev = concat([z0, Z[:(N - 1) * B]], axis=0) if N > 1 else z0
        comps["energy"] = L.loss_energy(prev, Z)
    if w.lambda_phys > 0:
        seq_h = concat([x0_hat.reshape((1, B) + shape), Xh], axis=0)
        seq = np.concatenate([x_cur.reshape((1, B) + shape), X], axis=0)
        comps["time"] = L.loss_sobolev_time(seq_h, seq, time_axis=0, state_ndim=len(shape))
        if len(shape) >= 2 and shape[-1] >= 2 and shape[-2] >= 2:
            comps["space"] = L.loss_sobolev_space(Xh, X, channel_axis=2)
        comps["spectral"] = L.loss_spectral(Xh, X, channel_axis=2)
    return L.loss_total(comps, w)


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricsRecord:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    steps: List[Dict[str, float]] = field(default_factory=list)
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["total"] for r in self.epochs])

    def write_csv(self, path) -> None:
        rows = self.epochs if self.epochs else self.steps
        _write_rows(path, rows)


def _write_rows(path, rows: Sequence[Dict[str, float]]):
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)


def train(ds: TrajectoryDataset, model: KoopmanAutoencoder, cfg: TrainConfig,
          state: Optional[TrainState] = None, stop_epoch: Optional[int] = None,
          log: Optional[Callable[[Dict[str, float]], None]] = None):
    """Train in place from ``state.epoch`` up to ``stop_epoch`` (default: all epochs).

    Returns ``(MetricsRecord, TrainState)``.  Window order is reshuffled every
    epoch from ``(seed, epoch)``, so a resumed run repeats exactly what an
    uninterrupted one would have done.
    """
    cfg.validate()
    state = state or TrainState()
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    index = window_index(ds, 2, cfg.horizon, cfg.stride)
    if len(index) == 0:
        raise ValueError(f"no training windows: trajectories of length {ds.length} < {2 + cfg.horizon}")
    params = model.params
    record = MetricsRecord()
    for epoch in range(state.epoch, stop):
        lr = lr_schedule(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = index[rng.permutation(len(index))]
        sums: Dict[str, float] = {}
        n_seen = 0
        n_steps = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            ctx, tgt, phi = gather_windows(ds, batch, 2, cfg.horizon)
            try:
                report = batch_loss(model, ctx, tgt, phi, ds.dt, cfg, rng=rng)
                model.zero_grad()
                report.tensor.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
                new, state.adam = optimizer_step({k: p.data for k, p in params.items()}, grads, state.adam, cfg, lr)
            except NonFiniteError as exc:
                where = ", ".join(f"traj {i} start {s}" for i, s in batch[:8])
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b0 // cfg.batch_size} "
                                    f"({where}{', ...' if len(batch) > 8 else ''}): {exc}") from exc
            for k, p in params.items():
                p.data = new[k]
            n = len(batch)
            for k, v in report.row().items():
                sums[k] = sums.get(k, 0.0) + v * n
            n_seen += n
            n_steps += 1
        row = {"epoch": epoch, "lr": lr, "steps": n_steps}
        row.update({k: v / n_seen for k, v in sums.items()})
        record.epochs.append(row)
        state.epoch = epoch + 1
        if log:
            log(row)
    return record, state


# -- evaluation ----------------------------------------------------------------

def _numpy(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def encode_numpy(model: KoopmanAutoencoder, x_cur: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    B = x_cur.shape[0]
    return _numpy(model.encode(x_cur.reshape(B, -1), x_prev.reshape(B, -1)))


def decode_numpy(model: KoopmanAutoencoder, z: np.ndarray) -> np.ndarray:
    return _numpy(model.decode(np.asarray(z)))


def latent_rollout(K: np.ndarray, z0: np.ndarray, n_steps: int, dt: float, scheme: str) -> np.ndarray:
    """(n_steps, B, Nz) latent states; ``exp`` evaluates exp(K j dt) z0 directly."""
    if scheme == "exp":
        return np.stack([z0 @ matrix_exp(K * (j * dt)).T for j in range(1, n_steps + 1)])
    if scheme not in STEPS:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {EVAL_SCHEMES}")
    step = STEPS[scheme]
    out, z = [], z0
    for j in range(n_steps):
        z = step(K, z, dt)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite latent state at rollout step {j + 1}")
        out.append(z)
    return np.stack(out)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("KAE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EvalResult:
    scheme: str
    per_step_mse: np.ndarray
    persistence_mse: np.ndarray
    latent_discrepancy: np.ndarray  # max over windows of ||z_scheme - z_exp|| / ||z_exp|| per step
    timing: Dict[str, float]
    n_windows: int

    @property
    def mean_mse(self) -> float:
        return float(self.per_step_mse.mean())

    def rows(self, dt: float) -> List[Dict[str, float]]:
        return [{"step": j + 1, "time": (j + 1) * dt, "mse": float(self.per_step_mse[j]),
                 "persistence_mse": float(self.persistence_mse[j]),
                 "latent_rel_l2_vs_exp": float(self.latent_discrepancy[j])}
                for j in range(len(self.per_step_mse))]

    def record(self, dt: float) -> MetricsRecord:
        return MetricsRecord(steps=self.rows(dt), timing=dict(self.timing))


def evaluate(ds: TrajectoryDataset, model: KoopmanAutoencoder, horizon: int = 8, scheme: str = "rk4",
             stride: int = 1, dt: Optional[float] = None) -> EvalResult:
    """Per-step rollout MSE over every test window, plus persistence and exp reference."""
    if scheme not in EVAL_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {EVAL_SCHEMES}")
    dt = ds.dt if dt is None else dt
    index = window_index(ds, 2, horizon, stride)
    if len(index) == 0:
        raise ValueError(f"test trajectories of length {ds.length} are too short for horizon {horizon}")
    groups = [index[index[:, 0] == i] for i in range(ds.n_traj)]
    groups = [g for g in groups if len(g)]

    def run(g):
        ctx, tgt, phi = gather_windows(ds, g, 2, horizon)
        K = koopman_matrix(model.operator, phi[0])
        z0 = encode_numpy(model, ctx[:, 1], ctx[:, 0])
        t0 = time.perf_counter()
        zs = latent_rollout(K, z0, horizon, dt, scheme)
        t1 = time.perf_counter()
        ze = latent_rollout(K, z0, horizon, dt, "exp") if scheme != "exp" else zs
        t2 = time.perf_counter()
        N, B = zs.shape[:2]
        xh = decode_numpy(model, zs.reshape(N * B, -1)).reshape((N, B) + tgt.shape[2:])
        X = np.swapaxes(tgt, 0, 1)
        err = ((xh - X) ** 2).reshape(N, B, -1).mean(axis=2).sum(axis=1)
        pers = ((ctx[None, :, 1] - X) ** 2).reshape(N, B, -1).mean(axis=2).sum(axis=1)
        den = np.maximum(np.linalg.norm(ze, axis=2), 1e-300)
        disc = (np.linalg.norm(zs - ze, axis=2) / den).max(axis=1)
        return err, pers, disc, t1 - t0, t2 - t1, B

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, groups))
    n = sum(r[5] for r in results)
    err = sum(r[0] for r in results) / n
    pers = sum(r[1] for r in results) / n
    disc = np.max(np.stack([r[2] for r in results]), axis=0)
    timing = {"rollout_s": sum(r[3] for r in results), "exp_s": sum(r[4] for r in results)}
    return EvalResult(scheme, err, pers, disc, timing, n)


# -- integrator checks -------------------------------------------------------------

def _rel_l2(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_integrators(model: KoopmanAutoencoder, ds: TrajectoryDataset, n_steps: int = 60, dt: Optional[float] = None,
                      step_sizes: Sequence[float] = (0.05, 0.1, 0.2), t_end: float = 2.0,
                      align_every: float = 0.2) -> Dict[str, object]:
    """RK4 vs exp over a long rollout, and rollouts at several step sizes aligned in time.

    Uses the first AR-2 context of every trajectory.  Decoded MSE against the
    ground truth is reported when the trajectories are long enough.
    """
    dt = ds.dt if dt is None else dt
    rows_a, rows_b = [], []
    worst_latent = 0.0
    mse = {"rk4": [], "exp": []}
    worst_pair = 0.0
    have_truth = ds.length >= n_steps + 2
    aligned_times = np.round(np.arange(1, int(round(t_end / align_every)) + 1) * align_every, 12)
    for i in range(ds.n_traj):
        K = koopman_matrix(model.operator, ds.phis[i])
        x = ds.trajectories[i]
        z0 = encode_numpy(model, x[1][None], x[0][None])
        zr = latent_rollout(K, z0, n_steps, dt, "rk4")[:, 0]
        ze = latent_rollout(K, z0, n_steps, dt, "exp")[:, 0]
        xr = decode_numpy(model, zr)
        xe = decode_numpy(model, ze)
        for j in range(n_steps):
            rel = _rel_l2(zr[j], ze[j])
            worst_latent = max(worst_latent, rel)
            row = {"traj": i, "step": j + 1, "time": (j + 1) * dt, "latent_rel_l2": rel}
            if have_truth:
                truth = x[2 + j].reshape(-1)
                row["mse_rk4"] = float(np.mean((xr[j] - truth) ** 2))
                row["mse_exp"] = float(np.mean((xe[j] - truth) ** 2))
                mse["rk4"].append(row["mse_rk4"])
                mse["exp"].append(row["mse_exp"])
            rows_a.append(row)
        decoded = {}
        for h in step_sizes:
            per = int(round(align_every / h))
            if not math.isclose(per * h, align_every, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"step size {h} does not divide the alignment interval {align_every}")
            zs = latent_rollout(K, z0, per * len(aligned_times), h, "rk4")[per - 1::per, 0]
            decoded[f"rk4_dt{h:g}"] = decode_numpy(model, zs)
        decoded["exp"] = decode_numpy(model, np.stack([(z0 @ matrix_exp(K * t).T)[0] for t in aligned_times]))
        names = list(decoded)
        for k, t in enumerate(aligned_times):
            row = {"traj": i, "time": float(t)}
            for a_i, a in enumerate(names):
                for b in names[a_i + 1:]:
                    rel = _rel_l2(decoded[a][k], decoded[b][k])
                    row[f"{a}_vs_{b}"] = rel
                    if not (a == "exp" or b == "exp"):
                        worst_pair = max(worst_pair, rel)
            rows_b.append(row)
    summary = {"max_latent_rel_l2_rk4_vs_exp": worst_latent, "max_pairwise_dt_rel_l2": worst_pair,
               "n_steps": n_steps, "dt": dt}
    if have_truth:
        summary["mse_rk4"] = float(np.mean(mse["rk4"]))
        summary["mse_exp"] = float(np.mean(mse["exp"]))
    return {"summary": summary, "rk4_vs_exp": rows_a, "dt_alignment": rows_b}


def rollout_timing(K: np.ndarray, z0: np.ndarray, t_end: float = 24.0, dt: float = 0.1, repeats: int = 5):
    """Best-of-``repeats`` wall time: one exp(K t_end) z0 vs t_end/dt RK4 steps."""
    n = int(round(t_end / dt))
    best_exp = best_rk4 = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        z_exp = z0 @ matrix_exp(K * t_end).T
        t1 = time.perf_counter()
        z = z0
        for _ in range(n):
            z = step_rk4(K, z, dt)
        t2 = time.perf_counter()
        best_exp, best_rk4 = min(best_exp, t1 - t0), min(best_rk4, t2 - t1)
    return {"exp_s": best_exp, "rk4_s": best_rk4, "speedup": best_rk4 / best_exp, "steps": n,
            "rel_l2": _rel_l2(z, z_exp)}


# -- gradient check --------------------------------------------------------------------

def gradcheck(model: KoopmanAutoencoder, ds: TrajectoryDataset, cfg: TrainConfig, n_windows: int = 2,
              h: float = 1e-5, eps: float = 1e-6) -> Dict[str, float]:
    """Max relative finite-difference error of the full objective, per parameter tensor."""
    index = window_index(ds, 2, cfg.horizon, cfg.stride)[:n_windows]
    ctx, tgt, phi = gather_windows(ds, index, 2, cfg.horizon)
    report = batch_loss(model, ctx, tgt, phi, ds.dt, cfg)
    graph = Graph({"loss": report.tensor})
    return {name: finite_difference_check(graph, "loss", name, h=h, eps=eps) for name in model.params}
