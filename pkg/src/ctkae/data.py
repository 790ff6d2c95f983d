"""Synthetic trajectory generators, exhaustive sliding windows and the KAED format.

KAED layout (all little-endian)::

    b"KAED" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    | payload: n_traj x (T, C, H, W) float64 | u64 checksum of the payload

The checksum is an 8-byte BLAKE2b digest of the payload bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .linalg import matrix_exp

KAED_MAGIC = b"KAED"
KAED_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass
class TrajectoryDataset:
    trajectories: np.ndarray  # (n_traj, T, C, H, W)
    phis: np.ndarray  # (n_traj,)
    dt: float
    channel_names: List[str]
    generator: str = "custom"
    seed: int = 0
    config: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.phis = np.asarray(self.phis, dtype=np.float64).reshape(-1)
        if self.trajectories.ndim != 5:
            raise ValueError(f"trajectories must be (n_traj, T, C, H, W), got shape {self.trajectories.shape}")
        if self.phis.size != self.trajectories.shape[0]:
            raise ValueError("one parameter value is required per trajectory")
        if len(self.channel_names) != self.trajectories.shape[2]:
            raise ValueError("channel names do not match the channel count")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n_traj(self) -> int:
        return self.trajectories.shape[0]

    @property
    def length(self) -> int:
        return self.trajectories.shape[1]

    @property
    def state_shape(self) -> Tuple[int, int, int]:
        return tuple(self.trajectories.shape[2:])

    @property
    def n_d(self) -> int:
        return int(np.prod(self.state_shape))

    def metadata(self) -> dict:
        return {
            "dt": self.dt,
            "channel_names": list(self.channel_names),
            "generator": self.generator,
            "seed": self.seed,
            "phis": [float(p) for p in self.phis],
            "shape": list(self.trajectories.shape),
            "config": self.config,
        }

    def equals(self, other: "TrajectoryDataset") -> bool:
        """Bit-level equality of payload and metadata."""
        return (self.metadata() == other.metadata()
                and self.trajectories.tobytes() == other.trajectories.tobytes())


@dataclass
class WindowBatch:
    context: np.ndarray  # (2, C, H, W): x_{t-1}, x_t
    targets: np.ndarray  # (N, C, H, W): x_{t+1} .. x_{t+N}
    phi: float
    traj: int
    start: int


def default_field_shape(n_d: int) -> Tuple[int, int, int]:
    """(1, H, W) with H the largest divisor of n_d not exceeding sqrt(n_d)."""
    h = max(d for d in range(1, int(math.isqrt(n_d)) + 1) if n_d % d == 0)
    return (1, h, n_d // h)


# -- linear-latent oracle ----------------------------------------------------

def linear_oracle_system(seed: int, nz_true: int, n_d: int, freq_range=(0.2, 1.0),
                         dissipation=(0.02, 0.1), phi_coupling: float = 0.3):
    """The generator family K_true(phi) and lifting G drawn for ``seed``.

    K_true(phi) = Q blockdiag(w_k J) Q^T - D with entry (0, 1) raised and
    (1, 0) lowered by ``phi_coupling * phi``: the skew part stays skew, so
    the spectral abscissa never exceeds -min(D).
    """
    if not 1 <= nz_true <= n_d:
        raise ValueError(f"need 1 <= nz_true <= n_d, got nz_true={nz_true}, n_d={n_d}")
    rng = np.random.default_rng([seed, 0])
    Q, _ = np.linalg.qr(rng.normal(size=(nz_true, nz_true)))
    J = np.zeros((nz_true, nz_true))
    for k in range(nz_true // 2):
        w = rng.uniform(*freq_range)
        J[2 * k, 2 * k + 1] = w
        J[2 * k + 1, 2 * k] = -w
    skew = Q @ J @ Q.T
    skew = 0.5 * (skew - skew.T)
    D = np.diag(rng.uniform(*dissipation, nz_true))
    G = rng.normal(size=(n_d, nz_true)) / math.sqrt(nz_true)

    def generator(phi: float) -> np.ndarray:
        K = skew - D
        if nz_true > 1:
            K = K.copy()
            K[0, 1] += phi_coupling * phi
            K[1, 0] -= phi_coupling * phi
        return K

    return generator, G


def generate_linear_oracle(seed: int = 0, nz_true: int = 8, n_d: int = 64, T: int = 40, dt: float = 0.1,
                           n_traj: int = 8, phi_range: Sequence[float] = (0.0, 1.0), split: int = 0,
                           shape: Optional[Sequence[int]] = None, subsample: int = 1,
                           freq_range=(0.2, 1.0), dissipation=(0.02, 0.1),
                           phi_coupling: float = 0.3) -> TrajectoryDataset:
    """Exactly linear-latent data x = G exp(K_true(phi) t) z0.

    ``seed`` fixes the system (K_true family and G); ``split`` selects an
    independent set of initial conditions and parameters for the same
    system, so train and held-out sets share dynamics.
    """
    if T < 1 or n_traj < 1 or subsample < 1:
        raise ValueError("T, n_traj and subsample must be >= 1")
    shape = tuple(shape) if shape is not None else default_field_shape(n_d)
    if int(np.prod(shape)) != n_d or len(shape) != 3:
        raise ValueError(f"field shape {shape} does not hold n_d={n_d} values")
    generator, G = linear_oracle_system(seed, nz_true, n_d, freq_range, dissipation, phi_coupling)
    rng = np.random.default_rng([seed, 1, split])
    phis = rng.uniform(phi_range[0], phi_range[1], n_traj)
    fine = np.arange(T * subsample) * (dt / subsample)
    times = fine[::subsample]
    out = np.empty((n_traj, T) + shape)
    for i in range(n_traj):
        z0 = rng.normal(size=nz_true)
        K = generator(phis[i])
        z = np.stack([matrix_exp(K * t) @ z0 for t in times])
        out[i] = (z @ G.T).reshape((T,) + shape)
    config = {"nz_true": nz_true, "n_d": n_d, "T": T, "n_traj": n_traj, "phi_range": list(phi_range),
              "split": split, "subsample": subsample, "freq_range": list(freq_range),
              "dissipation": list(dissipation), "phi_coupling": phi_coupling}
    return TrajectoryDataset(out, phis, dt, [f"u{c}" for c in range(shape[0])] if shape[0] > 1 else ["u"],
                             generator="linear_oracle", seed=seed, config=config)


# -- vortex street -----------------------------------------------------------

def vortex_street_params(phi, freq=(0.5, 1.0), decay=(0.05, 0.05)):
    """Shedding frequency (Hz) and amplitude decay rate (1/s), both affine in phi."""
    return freq[0] + freq[1] * phi, decay[0] + decay[1] * phi


def generate_vortex_street(seed: int = 0, H: int = 16, W: int = 32, T: int = 60, dt: float = 0.1,
                           n_traj: int = 8, phi_range: Sequence[float] = (0.0, 1.0), split: int = 0,
                           subsample: int = 1, vortices_per_row: int = 4, circulation: float = 1.5,
                           freestream: float = 1.0, freq=(0.5, 1.0), decay=(0.05, 0.05)) -> TrajectoryDataset:
    """Two rows of counter-rotating Gaussian vortices advecting periodically in x.

    The pattern repeats every 1/f seconds (f the shedding frequency); the
    vortex strength decays as exp(-decay * t).  Channels are (vx, vy),
    clipped to [-3, 3].
    """
    if H < 8 or W < 8:
        raise ValueError("vortex street needs H, W >= 8")
    if W % vortices_per_row:
        raise ValueError("W must be a multiple of vortices_per_row for periodic wrap")
    rng = np.random.default_rng([seed, 1, split])
    phis = rng.uniform(phi_range[0], phi_range[1], n_traj)
    offsets = rng.uniform(0.0, W, n_traj)
    a = W / vortices_per_row
    rc = a / 4.0
    half_gap = H / 6.0
    Y, X = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    times = (np.arange(T * subsample) * (dt / subsample))[::subsample]
    out = np.empty((n_traj, T, 2, H, W))
    for i in range(n_traj):
        f, gamma = vortex_street_params(phis[i], freq, decay)
        U = a * f
        for n, t in enumerate(times):
            amp = circulation * math.exp(-gamma * t)
            vx = np.full((H, W), freestream)
            vy = np.zeros((H, W))
            for row, sign, stagger in ((H / 2 + half_gap, 1.0, 0.0), (H / 2 - half_gap, -1.0, 0.5 * a)):
                for k in range(vortices_per_row):
                    xc = (offsets[i] + stagger + k * a + U * t) % W
                    dx = (X - xc + W / 2) % W - W / 2
                    dy = Y - row
                    g = np.exp(-(dx * dx + dy * dy) / (2 * rc * rc)) * (sign * amp / rc)
                    vx -= dy * g
                    vy += dx * g
            out[i, n, 0] = vx
            out[i, n, 1] = vy
    np.clip(out, -3.0, 3.0, out=out)
    config = {"H": H, "W": W, "T": T, "n_traj": n_traj, "phi_range": list(phi_range), "split": split,
              "subsample": subsample, "vortices_per_row": vortices_per_row, "circulation": circulation,
              "freestream": freestream, "freq": list(freq), "decay": list(decay)}
    return TrajectoryDataset(out, phis, dt, ["vx", "vy"], generator="vortex_street", seed=seed, config=config)


# -- windows -----------------------------------------------------------------

def window_count(T: int, context: int = 2, horizon: int = 8, stride: int = 1) -> int:
    span = context + horizon
    return 0 if T < span else (T - span) // stride + 1


def window_index(ds: TrajectoryDataset, context: int = 2, horizon: int = 8, stride: int = 1) -> np.ndarray:
    """(traj, start) pairs in deterministic order; ``start`` indexes x_{t-1}."""
    if context != 2:
        raise ValueError("only AR-2 context (context=2) is supported")
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be >= 1")
    n = window_count(ds.length, context, horizon, stride)
    return np.array([(i, s * stride) for i in range(ds.n_traj) for s in range(n)], dtype=np.int64).reshape(-1, 2)


def sliding_windows(ds: TrajectoryDataset, context: int = 2, horizon: int = 8, stride: int = 1) -> Iterator[WindowBatch]:
    for i, s in window_index(ds, context, horizon, stride):
        seq = ds.trajectories[i, s:s + context + horizon]
        yield WindowBatch(seq[:context], seq[context:], float(ds.phis[i]), int(i), int(s))


def gather_windows(ds: TrajectoryDataset, index: np.ndarray, context: int = 2, horizon: int = 8):
    """Stack windows into (context (B, 2, C, H, W), targets (B, N, C, H, W), phi (B,))."""
    span = context + horizon
    seqs = np.stack([ds.trajectories[i, s:s + span] for i, s in index])
    return seqs[:, :context], seqs[:, context:], ds.phis[index[:, 0]]


# -- KAED I/O ------------------------------------------------------------------

def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_dataset(ds: TrajectoryDataset, path) -> None:
    meta = json.dumps(ds.metadata(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(ds.trajectories, dtype="<f8").tobytes()
    blob = b"".join([KAED_MAGIC, struct.pack("<I", KAED_VERSION), struct.pack("<Q", len(meta)), meta,
                     payload, struct.pack("<Q", _checksum(payload))])
    Path(path).write_bytes(blob)


def load_dataset(path) -> TrajectoryDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != KAED_MAGIC:
        raise DatasetFormatError("bad magic: not a KAED dataset")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != KAED_VERSION:
        raise DatasetVersionError(f"KAED format version {version} is not supported (reader is {KAED_VERSION})")
    (n_meta,) = struct.unpack_from("<Q", buf, 8)
    start = 16 + n_meta
    if start > len(buf):
        raise DatasetFormatError("truncated metadata block")
    meta = json.loads(buf[16:start].decode("utf-8"))
    shape = tuple(meta["shape"])
    n_payload = 8 * int(np.prod(shape))
    end = start + n_payload
    if end + 8 > len(buf):
        raise DatasetFormatError(f"truncated payload: need {end + 8} bytes, file has {len(buf)}")
    if end + 8 != len(buf):
        raise DatasetFormatError(f"{len(buf) - end - 8} unexpected trailing bytes")
    payload = buf[start:end]
    (stored,) = struct.unpack_from("<Q", buf, end)
    if _checksum(payload) != stored:
        raise ChecksumError(f"payload checksum mismatch over bytes [{start}, {end}) of {path}")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return TrajectoryDataset(data, np.array(meta["phis"]), meta["dt"], meta["channel_names"],
                             generator=meta["generator"], seed=meta["seed"], config=meta.get("config", {}))
