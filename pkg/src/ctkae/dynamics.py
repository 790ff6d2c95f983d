"""Parameter-conditioned continuous-time Koopman generator and latent integrators.

The generator is K(phi) = K0 + B diag(c(phi)) A, where
K0 = (S - S^T)/2 - diag(softplus(d)) is dissipative by construction and
c(phi) = scales(phi) * gate(phi) comes from a small hyper-network fed with
the RBF embedding of phi.

Step functions take ``K`` as a dense matrix (numpy array or Tensor) or as
any callable mapping row-vector states ``z (..., Nz)`` to ``K z``.  Written
with plain operators, they serve numpy arrays and autodiff Tensors alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Union

import numpy as np

from .autodiff import NonFiniteError, Tensor, concat
from .embedding import ParamEmbedding
from .linalg import matrix_exp, solve_linear

SCHEMES = ("euler", "rk4", "implicit_midpoint")


@dataclass
class LatentState:
    z: Union[np.ndarray, Tensor]
    t: float = 0.0


@dataclass
class LatentTrajectory:
    states: List[LatentState] = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def array(self) -> np.ndarray:
        """States stacked on a new leading axis (numpy values)."""
        return np.stack([s.z.data if isinstance(s.z, Tensor) else np.asarray(s.z) for s in self.states])


class GeneratorAction:
    """Batched, differentiable ``z -> K(phi) z`` using the low-rank structure.

    ``coef`` has one row per batch sample (shape (B, r)); states are (B, Nz).
    """

    def __init__(self, K0: Tensor, A: Tensor, B: Tensor, coef: Tensor):
        self.K0, self.A, self.B, self.coef = K0, A, B, coef

    def __call__(self, z):
        return z @ self.K0.T + ((z @ self.A.T) * self.coef) @ self.B.T

    def tile(self, n: int) -> "GeneratorAction":
        """Same generators for ``n`` stacked copies of the batch."""
        return GeneratorAction(self.K0, self.A, self.B, concat([self.coef] * n, axis=0))


class KoopmanOperator:
    """Learnable K0 plus a hyper-network-predicted low-rank correction."""

    def __init__(
        self,
        nz: int,
        rank: int,
        embedding: ParamEmbedding,
        hyper_hidden: int = 16,
        seed: int = 0,
        dissipation: Sequence[float] = (0.01, 0.1),
        skew_scale: float = 0.1,
    ):
        if not 1 <= rank <= nz:
            raise ValueError(f"adaptation rank must satisfy 1 <= r <= Nz, got r={rank}, Nz={nz}")
        self.nz, self.rank, self.embedding = nz, rank, embedding
        self.hyper_hidden = hyper_hidden
        rng = np.random.default_rng(seed)
        ke = embedding.count
        diss = rng.uniform(dissipation[0], dissipation[1], nz)
        b2 = np.zeros(rank + 1)
        b2[:rank] = 1.0
        init = {
            "S": rng.normal(scale=skew_scale, size=(nz, nz)),
            "d": np.log(np.expm1(diss)),  # softplus^{-1}
            "lora_A": rng.normal(size=(rank, nz)) / math.sqrt(nz),
            "lora_B": np.zeros((nz, rank)),
            "hyper.W1": rng.normal(size=(hyper_hidden, ke)) / math.sqrt(ke),
            "hyper.b1": np.zeros(hyper_hidden),
            "hyper.W2": rng.normal(size=(rank + 1, hyper_hidden)) * 0.1 / math.sqrt(hyper_hidden),
            "hyper.b2": b2,
        }
        self.params: Dict[str, Tensor] = {
            f"koopman.{k}": Tensor(v, requires_grad=True, name=f"koopman.{k}") for k, v in init.items()
        }

    def __getitem__(self, key) -> Tensor:
        return self.params[f"koopman.{key}"]

    def base_generator(self) -> Tensor:
        S, d = self["S"], self["d"]
        return 0.5 * (S - S.T) - np.eye(self.nz) * d.softplus().reshape(1, self.nz)

    def coefficients(self, emb) -> Tensor:
        """Per-rank correction weights scales(phi) * gate(phi), shape (batch, r)."""
        h = (emb @ self["hyper.W1"].T + self["hyper.b1"]).tanh()
        out = h @ self["hyper.W2"].T + self["hyper.b2"]
        r = self.rank
        return out[:, :r] * out[:, r:].sigmoid()

    def _embed(self, phi, rng=None):
        phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
        emb = self.embedding(phi, rng=rng)
        if emb.shape[-1] != self.embedding.count:
            raise ValueError("parameter embedding width mismatch")
        return emb

    def action(self, phi, rng=None) -> GeneratorAction:
        """Differentiable generator action for a batch of parameters ``phi``."""
        emb = self._embed(phi, rng)
        return GeneratorAction(self.base_generator(), self["lora_A"], self["lora_B"], self.coefficients(emb))

    def generator(self, phi) -> Tensor:
        """Dense K(phi) as a Tensor (scalar phi)."""
        coef = self.coefficients(self._embed(phi)[:1])  # (1, r)
        return self.base_generator() + (self["lora_B"] * coef) @ self["lora_A"]

    def matrix(self, phi) -> np.ndarray:
        return self.generator(phi).data.copy()


def koopman_matrix(op: KoopmanOperator, phi) -> np.ndarray:
    """K0 + B diag(scales(phi)) A gate(phi) as a dense numpy matrix."""
    if np.ndim(phi) > 0 and np.size(phi) != 1:
        raise ValueError("koopman_matrix expects a scalar parameter")
    return op.matrix(float(np.asarray(phi).reshape(-1)[0]))


def _action(K) -> Callable:
    if callable(K):
        return K
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"generator must be square, got shape {K.shape}")
    n = K.shape[0]
    KT = K.T

    def f(z):
        if z.shape[-1] != n:
            raise ValueError(f"state dimension {z.shape[-1]} does not match generator {n}")
        with np.errstate(over="ignore", invalid="ignore"):  # callers check finiteness per step
            return z @ KT

    return f


def step_euler(K, z, dt: float):
    f = _action(K)
    return z + dt * f(z)


def step_rk4(K, z, dt: float):
    f = _action(K)
    k1 = f(z)
    k2 = f(z + (0.5 * dt) * k1)
    k3 = f(z + (0.5 * dt) * k2)
    k4 = f(z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_implicit_midpoint(K, z, dt: float):
    """Cayley map (I - dt/2 K)^{-1} (I + dt/2 K) z; dense K only, no gradients."""
    if callable(K):
        raise TypeError("implicit midpoint needs a dense generator matrix")
    K = K.data if isinstance(K, Tensor) else np.asarray(K, dtype=np.float64)
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"generator must be square, got shape {K.shape}")
    n = K.shape[0]
    if z.shape[-1] != n:
        raise ValueError(f"state dimension {z.shape[-1]} does not match generator {n}")
    eye = np.eye(n)
    rhs = (eye + 0.5 * dt * K) @ z.reshape(-1, n).T
    return solve_linear(eye - 0.5 * dt * K, rhs).T.reshape(z.shape)


STEPS = {"euler": step_euler, "rk4": step_rk4, "implicit_midpoint": step_implicit_midpoint}


def _resolve_generator(op, phi, differentiable: bool):
    if isinstance(op, KoopmanOperator):
        if differentiable:
            return op.generator(phi)
        return koopman_matrix(op, phi)
    if isinstance(op, Tensor):
        return op if differentiable else op.data
    return np.asarray(op, dtype=np.float64)


def _finite(z):
    return np.all(np.isfinite(z.data if isinstance(z, Tensor) else z))


def rollout(op, phi, z0: LatentState, n_steps: int, dt: float, scheme: str = "rk4",
            differentiable: bool = False) -> LatentTrajectory:
    """``n_steps`` fixed steps from ``z0``; returns the states at t0 + j dt, j = 1..n_steps.

    ``op`` is a :class:`KoopmanOperator` (``phi`` selects the generator) or a
    dense generator matrix.  With ``differentiable`` the states are Tensors
    tied to the operator parameters.
    """
    if n_steps < 1:
        raise ValueError("rollout needs at least one step")
    if scheme not in STEPS:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if differentiable and scheme == "implicit_midpoint":
        raise ValueError("implicit midpoint rollout is not differentiable")
    K = _resolve_generator(op, phi, differentiable)
    step = STEPS[scheme]
    z = z0.z
    out = LatentTrajectory()
    for j in range(1, n_steps + 1):
        try:
            z = step(K, z, dt)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite latent state at rollout step {j}") from exc
        if not _finite(z):
            raise NonFiniteError(f"non-finite latent state at rollout step {j}")
        out.states.append(LatentState(z, z0.t + j * dt))
    return out


def rollout_exp(op, phi, z0: LatentState, times: Sequence[float]) -> LatentTrajectory:
    """Closed-form states exp(K tau) z0 at each offset tau (inference only)."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-D sequence")
    if np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be positive and strictly increasing")
    K = _resolve_generator(op, phi, differentiable=False)
    z = z0.z.data if isinstance(z0.z, Tensor) else np.asarray(z0.z, dtype=np.float64)
    if z.shape[-1] != K.shape[0]:
        raise ValueError(f"state dimension {z.shape[-1]} does not match generator {K.shape[0]}")
    out = LatentTrajectory()
    for tau in times:
        out.states.append(LatentState(z @ matrix_exp(K * tau).T, z0.t + float(tau)))
    return out
