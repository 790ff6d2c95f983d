"""Radial-basis expansion of scalar physical parameters (Reynolds-number analogs)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class ParamEmbedding:
    """Gaussian bumps at ``centers`` with common bandwidth ``sigma``.

    ``noise_scale`` > 0 perturbs phi with Gaussian noise when an rng is
    passed to :meth:`__call__` (training-time conditioning noise).
    """

    centers: Sequence[float]
    sigma: float
    noise_scale: float = 0.0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 1 or self.centers.size < 1:
            raise ValueError("centers must be a non-empty 1-D sequence")
        if np.any(np.diff(self.centers) <= 0):
            raise ValueError("centers must be strictly increasing")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def spanning(cls, lo: float, hi: float, count: int = 8, noise_scale: float = 0.0):
        """``count`` centers evenly covering [lo, hi], sigma equal to their spacing."""
        if count == 1 or hi == lo:
            return cls([0.5 * (lo + hi)], sigma=max(abs(hi - lo), 1.0), noise_scale=noise_scale)
        centers = np.linspace(lo, hi, count)
        return cls(centers, sigma=float(centers[1] - centers[0]), noise_scale=noise_scale)

    @property
    def count(self) -> int:
        return int(self.centers.size)

    def __call__(self, phi, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return embed_params(phi, self, rng=rng)

    def to_dict(self) -> dict:
        return {"centers": [float(c) for c in self.centers], "sigma": float(self.sigma),
                "noise_scale": float(self.noise_scale)}


def embed_params(phi, pe: ParamEmbedding, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """exp(-(phi - c_k)^2 / (2 sigma^2)) for each center; phi scalar or 1-D batch."""
    phi = np.asarray(phi, dtype=np.float64)
    if rng is not None and pe.noise_scale > 0:
        phi = phi + pe.noise_scale * rng.standard_normal(phi.shape)
    diff = phi[..., None] - pe.centers
    return np.exp(-(diff * diff) / (2.0 * pe.sigma ** 2))
