"""Dual-stream dense encoder, decoder and the bundled Koopman autoencoder.

Checkpoints use the "KAEW" binary layout:

    b"KAEW" | u32 version | u32 len + UTF-8 JSON config | u32 count |
    count x (u16 len + UTF-8 name | u8 ndim | ndim x u32 extent | f64 LE values)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor
from .dynamics import KoopmanOperator, LatentState
from .embedding import ParamEmbedding

CHECKPOINT_MAGIC = b"KAEW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class MLP:
    """Dense layers with SiLU between them (none after the last layer)."""

    def __init__(self, widths: Sequence[int], prefix: str, rng: np.random.Generator, linear: bool = False):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.prefix = prefix
        self.linear = linear
        self.params: Dict[str, Tensor] = {}
        for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = rng.normal(size=(n_out, n_in)) * math.sqrt(2.0 / (n_in + n_out))
            self.params[f"{prefix}.{i}.weight"] = Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight")
            self.params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{prefix}.{i}.bias")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def __call__(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"{self.prefix}: expected last dimension {self.widths[0]}, got {x.shape[-1]}")
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"{self.prefix}.{i}.weight"].T + self.params[f"{self.prefix}.{i}.bias"]
            if i < self.n_layers - 1 and not self.linear:
                h = h.silu()
        return h


class EncoderPair:
    """Independent present-state and history-state encoders, N_d -> Nz."""

    def __init__(self, n_d: int, nz: int, hidden: Sequence[int] = (256,), seed: int = 0, linear: bool = False):
        rng = np.random.default_rng([seed, 1])
        widths = [n_d, *hidden, nz]
        self.present = MLP(widths, "encoder.present", rng, linear=linear)
        self.history = MLP(widths, "encoder.history", rng, linear=linear)

    @property
    def params(self) -> Dict[str, Tensor]:
        return {**self.present.params, **self.history.params}


class Decoder(MLP):
    def __init__(self, nz: int, n_d: int, hidden: Sequence[int] = (256,), seed: int = 0, linear: bool = False):
        super().__init__([nz, *hidden, n_d], "decoder", np.random.default_rng([seed, 2]), linear=linear)


def encode(x_t, x_prev, enc: EncoderPair):
    """AR-2 initial latent: mean of present(x_t) and history(x_prev)."""
    if x_prev is None:
        raise ValueError("AR-2 encoding needs the previous state")
    if x_t.shape != x_prev.shape:
        raise ShapeError(f"context states differ in shape: {x_t.shape} vs {x_prev.shape}")
    return 0.5 * (enc.present(x_t) + enc.history(x_prev))


def encode_present(x_t, enc: EncoderPair):
    return enc.present(x_t)


def decode(z, dec: Decoder):
    if isinstance(z, LatentState):
        z = z.z
    return dec(z)


@dataclass
class ModelConfig:
    n_d: int
    nz: int = 64
    hidden: Tuple[int, ...] = (256,)
    rank: int = 4
    hyper_hidden: int = 16
    embed_count: int = 8
    phi_range: Tuple[float, float] = (0.0, 1.0)
    embed_noise: float = 0.0
    dissipation: Tuple[float, float] = (0.01, 0.1)
    linear: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["phi_range"] = list(self.phi_range)
        d["dissipation"] = list(self.dissipation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("hidden", "phi_range", "dissipation"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class KoopmanAutoencoder:
    """Encoders, decoder and conditioned Koopman operator sharing one parameter table."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.embedding = ParamEmbedding.spanning(*cfg.phi_range, count=cfg.embed_count, noise_scale=cfg.embed_noise)
        self.encoders = EncoderPair(cfg.n_d, cfg.nz, cfg.hidden, seed=cfg.seed, linear=cfg.linear)
        self.decoder = Decoder(cfg.nz, cfg.n_d, cfg.hidden, seed=cfg.seed, linear=cfg.linear)
        self.operator = KoopmanOperator(
            cfg.nz, cfg.rank, self.embedding, hyper_hidden=cfg.hyper_hidden,
            seed=cfg.seed + 3, dissipation=cfg.dissipation,
        )

    @property
    def params(self) -> Dict[str, Tensor]:
        return {**self.encoders.params, **self.decoder.params, **self.operator.params}

    def encode(self, x_t, x_prev):
        return encode(x_t, x_prev, self.encoders)

    def encode_present(self, x_t):
        return encode_present(x_t, self.encoders)

    def decode(self, z):
        return decode(z, self.decoder)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        params = self.params
        missing = set(params) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise CheckpointError(f"parameter {k!r} has shape {a.shape}, model expects {p.data.shape}")
            p.data = a.copy()


def save_checkpoint(path, arrays: Dict[str, np.ndarray], config: dict) -> None:
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a KAEW checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader is {CHECKPOINT_VERSION})")
    (n_text,) = struct.unpack("<I", take(4))
    config = json.loads(take(n_text).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after parameter table")
    return arrays, config
