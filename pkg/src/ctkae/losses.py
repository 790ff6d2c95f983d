"""Training objectives: reconstruction, weighted rollout, latent regularizers
and the physics-informed (Sobolev / spectral) penalties.

All losses accept numpy arrays or Tensors and return a scalar Tensor.
Reduction convention: mean over batch and spatial extent, sum over channels
and (weighted) time.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, Mapping, Optional

import numpy as np

from .autodiff import ShapeError, Tensor
from .dynamics import KoopmanOperator, step_rk4
from .linalg import dft_matrix

COS_EPS = 1e-8
TEMPORAL_MODES = ("uniform", "cosine")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _mean_all(x: Tensor) -> Tensor:
    return x.mean() if x.ndim else x


def _axis(a, ndim):
    return None if a is None else a % ndim


def loss_recon(x_hat, x, channel_axis: Optional[int] = None) -> Tensor:
    """Sum over channels of the MSE over every other axis."""
    _same_shape(x_hat, x, "loss_recon")
    d2 = (_t(x_hat) - x).square()
    ch = _axis(channel_axis, d2.ndim)
    if ch is None:
        return d2.mean()
    axes = tuple(a for a in range(d2.ndim) if a != ch)
    return (d2.mean(axis=axes) if axes else d2).sum()


def raw_cosine_weights(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("cosine temporal weights need a horizon N >= 2")
    j = np.arange(1, n + 1)
    return 0.5 * (1.0 + np.cos(np.pi * (j - 1) / (n - 1)))


def cosine_weights(n: int, mode: str = "cosine") -> np.ndarray:
    """Normalized temporal weights over a rollout horizon of ``n`` steps."""
    if mode == "uniform":
        if n < 1:
            raise ValueError("horizon must be >= 1")
        return np.full(n, 1.0 / n)
    if mode != "cosine":
        raise ValueError(f"unknown temporal weight mode {mode!r}")
    raw = raw_cosine_weights(n)
    return raw / raw.sum()


def loss_pred(x_hat, x, weights, time_axis: int = 0, channel_axis: Optional[int] = None) -> Tensor:
    """sum_q sum_j w_j MSE_{j,q} for predictions stacked along ``time_axis``."""
    _same_shape(x_hat, x, "loss_pred")
    weights = np.asarray(weights, dtype=np.float64)
    d2 = (_t(x_hat) - x).square()
    ta = _axis(time_axis, d2.ndim)
    if weights.shape != (d2.shape[ta],):
        raise ShapeError(f"loss_pred: {weights.size} weights for horizon {d2.shape[ta]}")
    ch = _axis(channel_axis, d2.ndim)
    axes = tuple(a for a in range(d2.ndim) if a not in (ta, ch))
    m = d2.mean(axis=axes, keepdims=True) if axes else d2
    wshape = [1] * d2.ndim
    wshape[ta] = weights.size
    return (m * weights.reshape(wshape)).sum()


def loss_latent_consistency(z_hat, z_target, time_axis: int = -2) -> Tensor:
    """sum_j ||z_hat_j - E_present(x_j)||^2, averaged over any batch axes.

    Latents are (..., N, Nz) by default; ``time_axis`` says where N sits.
    """
    _same_shape(z_hat, z_target, "loss_latent_consistency")
    d2 = (_t(z_hat) - z_target).square()
    ta = _axis(time_axis, d2.ndim)
    axes = tuple(sorted({ta, d2.ndim - 1}))
    return _mean_all(d2.sum(axis=axes))


def _generator(op, phi):
    if isinstance(op, KoopmanOperator):
        return op.generator(phi)
    return op


def loss_linearity(z_t, z_next, op, phi=None, dt: float = 0.1, step=step_rk4) -> Tensor:
    """||step(z_t, dt) - z_next||^2 + ||step(z_next, -dt) - z_t||^2.

    ``op`` is a KoopmanOperator (with ``phi``), a dense generator or a
    generator action.  Zero latents satisfy the constraint trivially, so it
    only guards against shrink-to-zero operators on nonzero data.
    """
    if not dt > 0:
        raise ValueError("loss_linearity needs dt > 0")
    _same_shape(z_t, z_next, "loss_linearity")
    K = _generator(op, phi)
    z_t, z_next = _t(z_t), _t(z_next)
    fwd = (step(K, z_t, dt) - z_next).square().sum(axis=-1)
    bwd = (step(K, z_next, -dt) - z_t).square().sum(axis=-1)
    return _mean_all(fwd + bwd)


def _norm(z: Tensor) -> Tensor:
    return z.square().sum(axis=-1).sqrt()


def loss_cosine_dir(z_hat, z_target) -> Tensor:
    """1 - cos(angle) with an epsilon in the denominator; two zero vectors give 1."""
    _same_shape(z_hat, z_target, "loss_cosine_dir")
    a, b = _t(z_hat), _t(z_target)
    cos = (a * b).sum(axis=-1) / (_norm(a) * _norm(b) + COS_EPS)
    return _mean_all(1.0 - cos)


def loss_energy(z_t, z_next) -> Tensor:
    """(||z_next|| - ||z_t||)^2 averaged over batch axes."""
    _same_shape(z_t, z_next, "loss_energy")
    return _mean_all((_norm(_t(z_next)) - _norm(_t(z_t))).square())


def _reduce_state(d2: Tensor, state_axes) -> Tensor:
    s = d2.sum(axis=tuple(state_axes)) if state_axes else d2
    return _mean_all(s)


def loss_sobolev_time(x_hat_seq, x_seq, time_axis: int = 0, state_ndim: Optional[int] = None) -> Tensor:
    """Mean over adjacent frame pairs of ||(xh_{t+1} - xh_t) - (x_{t+1} - x_t)||^2.

    The squared norm sums over the trailing ``state_ndim`` axes (default:
    every axis after ``time_axis``); other axes are averaged.
    """
    _same_shape(x_hat_seq, x_seq, "loss_sobolev_time")
    e = _t(x_hat_seq) - x_seq
    ta = _axis(time_axis, e.ndim)
    if e.shape[ta] < 2:
        raise ValueError("temporal Sobolev loss needs at least two frames")
    lo = [slice(None)] * e.ndim
    hi = [slice(None)] * e.ndim
    lo[ta], hi[ta] = slice(0, -1), slice(1, None)
    d2 = (e[tuple(hi)] - e[tuple(lo)]).square()
    if state_ndim is None:
        state_axes = range(ta + 1, e.ndim)
    else:
        state_axes = range(e.ndim - state_ndim, e.ndim)
    return _reduce_state(d2, state_axes)


def _field_axes(ndim, channel_axis):
    axes = {ndim - 2, ndim - 1}
    if channel_axis is not None:
        axes.add(channel_axis % ndim)
    return sorted(axes)


def loss_sobolev_space(x_hat, x, channel_axis: Optional[int] = None) -> Tensor:
    """Forward-difference gradient mismatch summed over each (H, W) field."""
    _same_shape(x_hat, x, "loss_sobolev_space")
    if len(x.shape) < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError(f"spatial Sobolev loss needs 2-D fields with extents >= 2, got {tuple(x.shape)}")
    e = _t(x_hat) - x
    gx = (e[..., :, 1:] - e[..., :, :-1]).square()
    gy = (e[..., 1:, :] - e[..., :-1, :]).square()
    axes = _field_axes(e.ndim, channel_axis)
    return _reduce_state(gx, axes) + _reduce_state(gy, axes)


@lru_cache(maxsize=32)
def _dft_parts(n: int):
    F = dft_matrix(n)
    return np.ascontiguousarray(F.real), np.ascontiguousarray(F.imag)


def spectrum(x):
    """(Re, Im) of the unnormalized 2-D DFT over the last two axes, differentiably."""
    x = _t(x)
    ch, sh = _dft_parts(x.shape[-2])
    cw, sw = _dft_parts(x.shape[-1])
    a = x @ cw.T
    b = x @ sw.T
    re = ch @ a - sh @ b
    im = sh @ a + ch @ b
    return re, im


def loss_spectral(x_hat, x, channel_axis: Optional[int] = None) -> Tensor:
    """L1 amplitude mismatch plus squared real and imaginary mismatches of the 2-D DFT."""
    _same_shape(x_hat, x, "loss_spectral")
    if len(x.shape) < 2:
        raise ValueError("spectral loss needs 2-D fields")
    re_h, im_h = spectrum(x_hat)
    re, im = spectrum(x)
    amp_h = (re_h.square() + im_h.square()).sqrt()
    amp = (re.square() + im.square()).sqrt()
    axes = _field_axes(re.ndim, channel_axis)
    return (_reduce_state((amp_h - amp).abs(), axes)
            + _reduce_state((re_h - re).square(), axes)
            + _reduce_state((im_h - im).square(), axes))


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    lambda_phys: float = 0.1
    w_consistency: float = 1.0
    w_cos: float = 0.1
    w_time: float = 1.0
    w_space: float = 1.0
    w_spectral: float = 1.0
    temporal: str = "cosine"
    detach_latent_targets: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for k, v in asdict(self).items():
            if isinstance(v, bool) or isinstance(v, str):
                continue
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k!r} must be finite and >= 0, got {v}")
        if self.temporal not in TEMPORAL_MODES:
            raise ValueError(f"temporal weight mode must be one of {TEMPORAL_MODES}, got {self.temporal!r}")

    def to_dict(self) -> dict:
        return asdict(self)


COMPONENTS = ("recon", "pred", "consistency", "lin", "cos", "energy", "time", "space", "spectral")


@dataclass
class LossReport:
    total: float
    components: Dict[str, float] = field(default_factory=dict)
    tensor: Optional[Tensor] = None

    def recombine(self, w: LossWeights) -> float:
        c = self.components
        return c["recon"] + w.alpha * c["pred"] + w.beta * c["latent"] + w.lambda_phys * c["phys"]

    def row(self) -> Dict[str, float]:
        return {"total": self.total, **self.components}


def loss_total(components: Mapping[str, object], weights: LossWeights) -> LossReport:
    """recon + alpha pred + beta latent + lambda_phys phys.

    latent = w_consistency consistency + lin + w_cos cos + energy and
    phys = w_time time + w_space space + w_spectral spectral.  Absent
    components count as zero.
    """
    weights.validate()
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    c = {k: _t(components[k]) if k in components else Tensor(0.0) for k in COMPONENTS}
    for k, v in c.items():
        if v.size != 1:
            raise ShapeError(f"loss component {k!r} is not scalar")
    latent = weights.w_consistency * c["consistency"] + c["lin"] + weights.w_cos * c["cos"] + c["energy"]
    phys = weights.w_time * c["time"] + weights.w_space * c["space"] + weights.w_spectral * c["spectral"]
    total = c["recon"] + weights.alpha * c["pred"] + weights.beta * latent + weights.lambda_phys * phys
    values = {k: float(v.data) for k, v in c.items()}
    values["latent"] = float(latent.data)
    values["phys"] = float(phys.data)
    return LossReport(total=float(total.data), components=values, tensor=total)
