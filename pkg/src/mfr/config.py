"""Run configuration: one JSON file describing data, model, training and evaluation.

Every section and field is optional; missing entries take the defaults below.

.. code-block:: json

    {
      "data": {"num_domains": 5, "identities_per_domain": 300,
               "observations_per_identity": 2, "latent_dim": 16,
               "obs_dim": 64, "noise": 0.1, "shift": 0.6, "seed": 0},
      "model": {"hidden": [128, 128], "embedding_dim": 64},
      "trainer": {"alpha": 0.0004, "beta": 0.0004, "gamma": 0.5,
                  "batch_size": 32, "scale": 64.0, "tau_p": 0.3, "tau_n": 0.04,
                  "decay_every": 1000, "decay_rate": 0.5, "momentum": 0.9,
                  "weight_decay": 0.0005, "max_iterations": 1000,
                  "mode": "high_order", "use_hp": true, "use_cls": true,
                  "use_da": true, "da_weight": 1.0, "stop_template_grad": true,
                  "strategy": {"meta_train": null, "meta_test": 1,
                               "random_train": false},
                  "seed": 0},
      "protocol": {"far_levels": [0.01, 0.001, 0.0001], "target_domain": null},
      "algorithm": "mfr",
      "checkpoint_every": 100
    }

``algorithm`` is ``"mfr"`` (meta-optimization) or ``"joint"`` (pooled
baseline). ``target_domain: null`` means the last generated domain; every
other domain is a training source.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import Architecture
from .sampling import SamplingStrategy
from .synth import ConfigError, GeneratorConfig
from .trainer import TrainerConfig

ALGORITHMS = ("mfr", "joint")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128)
    embedding_dim: int = 64

    def architecture(self, input_dim: int) -> Architecture:
        return Architecture(input_dim=input_dim, hidden=self.hidden, output_dim=self.embedding_dim)


@dataclass(frozen=True)
class EvalConfig:
    far_levels: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    target_domain: int | None = None


@dataclass(frozen=True)
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    protocol: EvalConfig = field(default_factory=EvalConfig)
    algorithm: str = "mfr"
    checkpoint_every: int = 100

    @property
    def target_domain(self) -> int:
        t = self.protocol.target_domain
        return self.data.num_domains - 1 if t is None else t

    def validate(self) -> "RunConfig":
        self.data.validate()
        try:
            self.trainer.validate()
        except ValueError as exc:
            raise ConfigError(f"trainer: {exc}") from exc
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if any(w <= 0 for w in self.model.hidden) or self.model.embedding_dim <= 0:
            raise ConfigError("model widths must be positive")
        if not all(0 < f < 1 for f in self.protocol.far_levels):
            raise ConfigError("protocol.far_levels must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        d["protocol"]["far_levels"] = list(self.protocol.far_levels)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _section(cls, raw: dict | None, name: str, convert=None):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    if convert:
        raw = convert(raw)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _trainer_fields(raw: dict) -> dict:
    if "strategy" in raw:
        raw["strategy"] = _section(SamplingStrategy, raw["strategy"], "trainer.strategy")
    return raw


def _model_fields(raw: dict) -> dict:
    if "hidden" in raw:
        raw["hidden"] = tuple(int(h) for h in raw["hidden"])
    return raw


def _protocol_fields(raw: dict) -> dict:
    if "far_levels" in raw:
        raw["far_levels"] = tuple(float(f) for f in raw["far_levels"])
    return raw


def from_dict(raw: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    cfg = RunConfig(
        data=_section(GeneratorConfig, raw.get("data"), "data"),
        model=_section(ModelConfig, raw.get("model"), "model", _model_fields),
        trainer=_section(TrainerConfig, raw.get("trainer"), "trainer", _trainer_fields),
        protocol=_section(EvalConfig, raw.get("protocol"), "protocol", _protocol_fields),
        algorithm=raw.get("algorithm", "mfr"),
        checkpoint_every=int(raw.get("checkpoint_every", 100)),
    )
    return cfg.validate()


def load(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    if mode == "joint":
        return replace(cfg, algorithm="joint")
    return replace(cfg, trainer=replace(cfg.trainer, mode=mode)).validate()
