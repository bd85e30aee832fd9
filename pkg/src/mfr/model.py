"""MLP embedding network applied functionally at arbitrary parameter values."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .tensor import DimensionError, freeze

ACTIVATIONS = ("tanh",)


class AlignmentError(ValueError):
    """Gradient list does not line up with a ParameterSet."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...] = (128, 128)
    output_dim: int = 64
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(w) <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d.get("hidden", (128, 128))),
            output_dim=int(d.get("output_dim", 64)),
            activation=d.get("activation", "tanh"),
        )


class ParameterSet:
    """Ordered, named parameters. Values are tensors or autodiff Vars."""

    def __init__(self, entries: Sequence[tuple[str, object]]):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._names = tuple(names)
        self._values = tuple(v for _, v in entries)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def values(self) -> tuple:
        return self._values

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, object]]:
        return iter(zip(self._names, self._values))

    def __getitem__(self, name: str):
        return self._values[self._names.index(name)]

    def shapes(self) -> list[tuple[int, ...]]:
        return [_raw(v).shape for v in self._values]

    def tensors(self) -> list[np.ndarray]:
        return [_raw(v) for v in self._values]

    def detach(self) -> "ParameterSet":
        return ParameterSet([(n, freeze(np.array(_raw(v)))) for n, v in self])

    def to_leaves(self, tape: ad.Tape) -> "ParameterSet":
        return ParameterSet([(n, tape.leaf(_raw(v))) for n, v in self])

    def num_params(self) -> int:
        return int(sum(_raw(v).size for v in self._values))

    def flat(self) -> np.ndarray:
        return np.concatenate([_raw(v).ravel() for v in self._values])

    def unflatten(self, vec: np.ndarray) -> "ParameterSet":
        out, at = [], 0
        for n, v in self:
            shape = _raw(v).shape
            size = int(np.prod(shape))
            out.append((n, freeze(vec[at : at + size].reshape(shape))))
            at += size
        return ParameterSet(out)

    def equal(self, other: "ParameterSet") -> bool:
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def _raw(v):
    return v.value if isinstance(v, ad.Var) else v


def init_params(arch: Architecture, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases; deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    entries = []
    widths = arch.widths
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries.append((f"layer{k}.weight", freeze(w)))
        entries.append((f"layer{k}.bias", freeze(np.zeros((1, fan_out)))))
    return ParameterSet(entries)


def apply(theta: ParameterSet, x) -> ad.Var:
    """Forward pass ``x @ W0 + b0 -> tanh -> ... -> linear``; not normalized."""
    h = ad.as_var(x)
    vals = theta.values
    if len(vals) % 2:
        raise DimensionError("parameter set must hold (weight, bias) pairs")
    in_dim = _raw(vals[0]).shape[0]
    if h.value.ndim != 2 or h.value.shape[1] != in_dim:
        raise DimensionError(
            f"input of shape {h.value.shape} does not match input dim {in_dim}"
        )
    n_layers = len(vals) // 2
    for k in range(n_layers):
        w, b = ad.as_var(vals[2 * k]), ad.as_var(vals[2 * k + 1])
        h = ad.add(ad.matmul(h, w), b)
        if k < n_layers - 1:
            h = ad.tanh(h)
    return h


def axpy(theta: ParameterSet, scale: float, g: Sequence) -> ParameterSet:
    """Return ``theta + scale * g`` entrywise, recorded when inputs are Vars."""
    if len(g) != len(theta):
        raise AlignmentError(f"{len(g)} gradients for {len(theta)} parameters")
    out = []
    for (name, v), gi in zip(theta, g):
        if _raw(v).shape != _raw(gi).shape:
            raise AlignmentError(
                f"{name}: gradient shape {_raw(gi).shape} != {_raw(v).shape}"
            )
        if isinstance(v, ad.Var) or isinstance(gi, ad.Var):
            out.append((name, ad.add(v, ad.mul(scale, gi))))
        else:
            out.append((name, freeze(v + scale * gi)))
    return ParameterSet(out)


# -- checkpoints ------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"MFRCKPT\0"
#   u32       format version
#   u32       header length L
#   L bytes   UTF-8 JSON header: architecture, config_hash, meta,
#             entries [{"name", "shape"}] in buffer order
#   ...       each entry as little-endian f64, row-major
#   32 bytes  SHA-256 of every preceding byte

CKPT_MAGIC = b"MFRCKPT\0"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParameterSet
    arch: Architecture
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = [(f"param/{n}", v) for n, v in zip(ckpt.params.names, ckpt.params.tensors())]
    entries += [(f"extra/{n}", v) for n, v in ckpt.extra.items()]
    header = {
        "architecture": ckpt.arch.to_dict(),
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "entries": [{"name": n, "shape": list(np.shape(v))} for n, v in entries],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(hbytes))
    buf += hbytes
    for _, v in entries:
        buf += np.ascontiguousarray(v, dtype="<f8").tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    at = 16
    header = json.loads(body[at : at + hlen].decode())
    at += hlen
    params, extra = [], {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=at).astype(np.float64)
        at += 8 * n
        arr = freeze(arr.reshape(shape))
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params.append((name, arr))
        else:
            extra[name] = arr
    if at != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return Checkpoint(
        params=ParameterSet(params),
        arch=Architecture.from_dict(header["architecture"]),
        config_hash=header["config_hash"],
        meta=header["meta"],
        extra=extra,
    )
