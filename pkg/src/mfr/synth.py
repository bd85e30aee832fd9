"""Synthetic multi-domain identity data with a controllable domain shift.

Each identity is a unit latent ``z`` in R^d_id. Domain ``k`` observes it
through ``T_k = (1 - delta) * E + delta * Q_k`` where ``E`` zero-pads into
R^D_obs and ``Q_k`` has random orthonormal columns, plus isotropic noise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import freeze


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    num_domains: int = 5
    identities_per_domain: int = 300
    observations_per_identity: int = 2
    latent_dim: int = 16
    obs_dim: int = 64
    noise: float = 0.1
    shift: float = 0.6
    seed: int = 0

    def validate(self) -> "GeneratorConfig":
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if self.identities_per_domain < 1:
            raise ConfigError("identities_per_domain must be >= 1")
        if self.observations_per_identity < 2:
            raise ConfigError("observations_per_identity must be >= 2")
        if not 1 <= self.latent_dim <= self.obs_dim:
            raise ConfigError("need 1 <= latent_dim <= obs_dim")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError("shift must lie in [0, 1]")
        return self


@dataclass
class DomainDataset:
    domain_id: int
    identity_ids: np.ndarray
    observations: list[np.ndarray]

    def __post_init__(self):
        self.identity_ids = np.asarray(self.identity_ids, dtype=np.int64)
        if len(self.identity_ids) != len(self.observations):
            raise ValueError("one observation block per identity is required")
        for obs in self.observations:
            if obs.ndim != 2 or obs.shape[0] < 2:
                raise ValueError("every identity needs at least 2 observations")

    @property
    def num_identities(self) -> int:
        return len(self.identity_ids)

    @property
    def obs_dim(self) -> int:
        return self.observations[0].shape[1]

    def equal(self, other: "DomainDataset") -> bool:
        return (
            self.domain_id == other.domain_id
            and np.array_equal(self.identity_ids, other.identity_ids)
            and len(self.observations) == len(other.observations)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.observations, other.observations)
            )
        )


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diagonal(r))


def domain_transforms(cfg: GeneratorConfig, rng: np.random.Generator) -> list[np.ndarray]:
    embed = np.zeros((cfg.obs_dim, cfg.latent_dim))
    embed[: cfg.latent_dim, : cfg.latent_dim] = np.eye(cfg.latent_dim)
    return [
        (1.0 - cfg.shift) * embed + cfg.shift * random_orthonormal(rng, cfg.obs_dim, cfg.latent_dim)
        for _ in range(cfg.num_domains)
    ]


def generate(cfg: GeneratorConfig) -> list[DomainDataset]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    transforms = domain_transforms(cfg, rng)
    k, n = cfg.observations_per_identity, cfg.identities_per_domain
    out = []
    for d, T in enumerate(transforms):
        z = rng.standard_normal((n, cfg.latent_dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        clean = z @ T.T
        noise = cfg.noise * rng.standard_normal((n, k, cfg.obs_dim))
        obs = clean[:, None, :] + noise
        ids = d * n + np.arange(n)
        out.append(DomainDataset(d, ids, [freeze(o) for o in obs]))
    return out


# -- file format ------------------------------------------------------------
#
#   8 bytes  magic b"MFRDATA\0"
#   u32      format version
#   u32      header length L, then L bytes of JSON (generator config echo)
#   u32      observation dim D, u32 domain count
#   per domain:   i64 domain id, u32 identity count
#     per identity: i64 global id, u32 observation count, count*D f64 values
#   32 bytes SHA-256 of every preceding byte
# All integers and floats little-endian.

DATA_MAGIC = b"MFRDATA\0"
DATA_VERSION = 1


def save_dataset(domains: list[DomainDataset], path, config: GeneratorConfig | None = None) -> None:
    header = json.dumps(asdict(config) if config else {}, sort_keys=True).encode()
    dim = domains[0].obs_dim if domains else 0
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<II", DATA_VERSION, len(header))
    buf += header
    buf += struct.pack("<II", dim, len(domains))
    for dom in domains:
        buf += struct.pack("<qI", dom.domain_id, dom.num_identities)
        for gid, obs in zip(dom.identity_ids, dom.observations):
            if obs.shape[1] != dim:
                raise DatasetError("all observations must share one dimension")
            buf += struct.pack("<qI", int(gid), obs.shape[0])
            buf += np.ascontiguousarray(obs, dtype="<f8").tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    _check_preamble(raw, path)
    (hlen,) = struct.unpack_from("<I", raw, 12)
    return json.loads(raw[16 : 16 + hlen].decode())


def _check_preamble(raw: bytes, path) -> None:
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: file too short")
    if raw[:8] != DATA_MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != DATA_VERSION:
        raise DatasetVersionError(
            f"{path}: format version {version} not supported (expected {DATA_VERSION})"
        )


def load_dataset(path) -> list[DomainDataset]:
    raw = Path(path).read_bytes()
    _check_preamble(raw, path)
    if len(raw) < 16 + 8 + 32:
        raise TruncatedFileError(f"{path}: file too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        # tell a cut-off file apart from one with flipped bytes
        try:
            _parse(raw)
        except struct.error as exc:
            raise TruncatedFileError(f"{path}: payload ends early") from exc
        except (DatasetError, ValueError):
            pass
        raise ChecksumError(f"{path}: payload checksum mismatch")
    try:
        return _parse(body)
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: payload ends early") from exc


def _parse(body: bytes) -> list[DomainDataset]:
    (hlen,) = struct.unpack_from("<I", body, 12)
    at = 16 + hlen
    dim, count = struct.unpack_from("<II", body, at)
    at += 8
    domains = []
    for _ in range(count):
        did, n_ids = struct.unpack_from("<qI", body, at)
        at += 12
        ids, blocks = [], []
        for _ in range(n_ids):
            gid, k = struct.unpack_from("<qI", body, at)
            at += 12
            size = k * dim
            if at + 8 * size > len(body):
                raise struct.error("observation block overruns payload")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=at)
            at += 8 * size
            ids.append(gid)
            blocks.append(freeze(arr.astype(np.float64).reshape(k, dim)))
        domains.append(DomainDataset(did, np.array(ids, dtype=np.int64), blocks))
    if at != len(body):
        raise DatasetError("trailing bytes after the last domain")
    return domains
