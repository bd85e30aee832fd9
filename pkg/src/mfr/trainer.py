"""Meta-optimization loop: meta-train, inner update, meta-test, aggregation.

Three gradient modes are supported:

``high_order``
    differentiate ``L_T(θ - α∇L_S(θ))`` all the way back to θ, including the
    path through the inner gradient.
``first_order``
    use ``∇_{θ'} L_T(θ')`` in place of ``∇_θ L_T(θ')``.
``no_meta``
    evaluate the meta-test loss at θ itself (α plays no role).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, LossTerms, PairBatch, Thresholds, loss_terms
from .model import Architecture, ParameterSet, apply, axpy, init_params
from .sampling import (
    DEFAULT_STRATEGY,
    Episode,
    MetaBatch,
    SamplingStrategy,
    build_meta_batch,
    build_pooled_batch,
)
from .synth import DomainDataset
from .tensor import NonFiniteError, freeze

MODES = ("high_order", "first_order", "no_meta")

METRIC_COLUMNS = (
    "step",
    "episode",
    "mode",
    "L_S",
    "L_T",
    "L_hp",
    "L_cls",
    "L_da",
    "num_P",
    "num_N",
    "grad_norm",
    "meta_grad_norm",
    "alpha_eff",
    "tau_p",
    "tau_n",
)


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, episode: int, step: int | None = None):
        super().__init__(message)
        self.episode = episode
        self.step = step


@dataclass(frozen=True)
class TrainerConfig:
    alpha: float = 0.0004
    beta: float = 0.0004
    gamma: float = 0.5
    batch_size: int = 32
    scale: float = 64.0
    tau_p: float = 0.3
    tau_n: float = 0.04
    tau_p_step: float = 0.1
    tau_n_factor: float = 0.5
    tau_p_cap: float = 1.0
    decay_every: int = 1000
    decay_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iterations: int = 1000
    mode: str = "high_order"
    use_hp: bool = True
    use_cls: bool = True
    use_da: bool = True
    da_weight: float = 1.0
    stop_template_grad: bool = True
    strategy: SamplingStrategy = DEFAULT_STRATEGY
    seed: int = 0

    def validate(self) -> "TrainerConfig":
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        Thresholds(self.tau_p, self.tau_n)
        return self


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    step: int = 0
    n_decay: int = 0

    @classmethod
    def zeros_like(cls, theta: ParameterSet) -> "OptimizerState":
        return cls([np.zeros(s) for s in theta.shapes()])

    def copy(self) -> "OptimizerState":
        return OptimizerState([v.copy() for v in self.velocity], self.step, self.n_decay)


@dataclass(frozen=True)
class Schedule:
    alpha: float
    beta: float
    tau_p: float
    tau_n: float
    n_decay: int


def apply_schedules(cfg: TrainerConfig, opt: OptimizerState) -> Schedule:
    """Step-decayed step sizes and thresholds at ``opt.step``.

    Thresholds tighten with every decay; ``tau_p`` is capped at
    ``cfg.tau_p_cap`` and ``tau_n`` at the current ``tau_p``.
    """
    if opt.step < 0:
        raise ValueError("step counter must be non-negative")
    n = opt.step // cfg.decay_every
    factor = cfg.decay_rate**n
    tau_p = min(cfg.tau_p + cfg.tau_p_step * n, cfg.tau_p_cap)
    tau_n = min(cfg.tau_n / cfg.tau_n_factor**n, tau_p)
    return Schedule(cfg.alpha * factor, cfg.beta * factor, tau_p, tau_n, n)


def loss_config(cfg: TrainerConfig, sched: Schedule | None = None) -> LossConfig:
    t = Thresholds(sched.tau_p, sched.tau_n) if sched else Thresholds(cfg.tau_p, cfg.tau_n)
    return LossConfig(
        scale=cfg.scale,
        thresholds=t,
        use_hp=cfg.use_hp,
        use_cls=cfg.use_cls,
        use_da=cfg.use_da,
        da_weight=cfg.da_weight,
        stop_template_grad=cfg.stop_template_grad,
    )


def embed(theta: ParameterSet, batch: PairBatch) -> PairBatch:
    """Embed gallery and probe observations in one forward pass."""
    b = batch.size
    feats = apply(theta, np.vstack([batch.gallery, batch.probe]))
    return PairBatch(
        ad.take(feats, np.arange(b)),
        ad.take(feats, np.arange(b, 2 * b)),
        batch.identity_labels,
        batch.domain_tags,
    )


@dataclass
class EpisodeResult:
    grad_train: list[np.ndarray]
    grad_test: list[np.ndarray]
    train_terms: LossTerms
    test_loss: float


def _values(gs) -> list[np.ndarray]:
    return [g.value if isinstance(g, ad.Var) else g for g in gs]


def episode_gradients(
    theta: ParameterSet,
    episode: Episode,
    lcfg: LossConfig,
    alpha: float,
    mode: str,
    need_test_grad: bool = True,
) -> EpisodeResult:
    """∇_θ L_S and the meta-test gradient G_T for one episode."""
    tape = ad.Tape()
    th = theta.to_leaves(tape)
    s_terms = loss_terms(embed(th, episode.meta_train), lcfg, with_da=True)

    if mode == "high_order":
        g_s = ad.grad(tape, s_terms.total, th.values, create_graph=True)
        th_prime = axpy(th, -alpha, g_s)
        t_loss = loss_terms(embed(th_prime, episode.meta_test), lcfg, with_da=False).total
        g_t = ad.grad(tape, t_loss, th.values) if need_test_grad else None
        g_s = _values(g_s)
    else:
        g_s = ad.grad(tape, s_terms.total, th.values)
        if mode == "first_order":
            base = axpy(theta.detach(), -alpha, g_s)
        else:
            base = theta
        tape_t = ad.Tape()
        th_t = base.to_leaves(tape_t)
        t_loss = loss_terms(embed(th_t, episode.meta_test), lcfg, with_da=False).total
        g_t = ad.grad(tape_t, t_loss, th_t.values) if need_test_grad else None
    if g_t is None:
        g_t = [np.zeros_like(v) for v in g_s]
    return EpisodeResult(g_s, g_t, s_terms, float(t_loss.value))


def _norm(gs: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in gs))


def aggregate(
    theta: ParameterSet, mb: MetaBatch, cfg: TrainerConfig, sched: Schedule, step: int = 0
) -> tuple[list[np.ndarray], list[dict]]:
    """Sum ``γ∇L_S + (1-γ)G_T`` over the episodes of a meta-batch."""
    lcfg = loss_config(cfg, sched)
    total = [np.zeros(s) for s in theta.shapes()]
    rows = []
    for k, episode in enumerate(mb.episodes):
        try:
            res = episode_gradients(
                theta, episode, lcfg, sched.alpha, cfg.mode, need_test_grad=cfg.gamma < 1.0
            )
        except NonFiniteError as exc:
            raise DivergenceError(f"episode {k}: {exc}", episode=k, step=step) from exc
        for acc, gs, gt in zip(total, res.grad_train, res.grad_test):
            acc += cfg.gamma * gs + (1.0 - cfg.gamma) * gt
        t = res.train_terms
        row = {
            "step": step,
            "episode": k,
            "mode": cfg.mode,
            "L_S": float(t.total.value),
            "L_T": res.test_loss,
            "L_hp": t.hp,
            "L_cls": t.cls,
            "L_da": t.da,
            "num_P": t.num_pos,
            "num_N": t.num_neg,
            "grad_norm": _norm(res.grad_train),
            "meta_grad_norm": _norm(res.grad_test),
            "alpha_eff": sched.alpha,
            "tau_p": sched.tau_p,
            "tau_n": sched.tau_n,
        }
        bad = [c for c in ("L_S", "L_T", "grad_norm", "meta_grad_norm") if not math.isfinite(row[c])]
        if bad:
            raise DivergenceError(f"episode {k}: non-finite {', '.join(bad)}", episode=k, step=step)
        rows.append(row)
    return total, rows


def sgd_update(
    theta: ParameterSet,
    grad_sum: list[np.ndarray],
    n: int,
    cfg: TrainerConfig,
    beta: float,
    opt: OptimizerState,
) -> ParameterSet:
    """Momentum SGD on the mean aggregated gradient plus weight decay."""
    out = []
    for (name, w), g, v in zip(theta, grad_sum, opt.velocity):
        eff = g / n + cfg.weight_decay * w
        v *= cfg.momentum
        v += eff
        out.append((name, freeze(w - beta * v)))
    return ParameterSet(out)


def meta_step(
    theta: ParameterSet, mb: MetaBatch, cfg: TrainerConfig, opt: OptimizerState
) -> tuple[ParameterSet, list[dict]]:
    """One outer iteration; advances ``opt`` in place."""
    sched = apply_schedules(cfg, opt)
    opt.n_decay = sched.n_decay
    grad_sum, rows = aggregate(theta, mb, cfg, sched, step=opt.step)
    theta_new = sgd_update(theta, grad_sum, len(mb), cfg, sched.beta, opt)
    opt.step += 1
    return theta_new, rows


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Sampler stream for one step; independent of how the run was resumed."""
    return np.random.default_rng([seed, step])


class TrainingDiverged(DivergenceError):
    def __init__(self, err: DivergenceError, theta: ParameterSet, opt: OptimizerState, log):
        super().__init__(str(err), err.episode, err.step)
        self.theta = theta
        self.opt = opt
        self.log = log


StepHook = Callable[[int, ParameterSet, OptimizerState, list], None]


def _run(
    theta: ParameterSet,
    opt: OptimizerState,
    cfg: TrainerConfig,
    draw: Callable[[int], MetaBatch],
    on_step: StepHook | None,
    step_cfg: TrainerConfig,
    label: str | None = None,
):
    log: list[dict] = []
    while opt.step < cfg.max_iterations:
        mb = draw(opt.step)
        before = opt.copy()
        try:
            # non-finite values are detected explicitly and raised as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                theta_new, rows = meta_step(theta, mb, step_cfg, opt)
        except DivergenceError as err:
            raise TrainingDiverged(err, theta, before, log) from err
        theta = theta_new
        if label:
            for r in rows:
                r["mode"] = label
        log.extend(rows)
        if on_step is not None:
            on_step(opt.step, theta, opt, rows)
    return theta, log


def train(
    domains: list[DomainDataset],
    cfg: TrainerConfig,
    arch: Architecture | None = None,
    *,
    theta: ParameterSet | None = None,
    opt: OptimizerState | None = None,
    on_step: StepHook | None = None,
) -> tuple[ParameterSet, list[dict]]:
    """Run meta-optimization until ``opt.step == cfg.max_iterations``.

    Pass ``theta`` and ``opt`` from a checkpoint to resume; the sampler stream
    is keyed by step so a resumed run follows the uninterrupted trajectory.
    """
    cfg.validate()
    if len(domains) < 2:
        raise ValueError("meta-training needs at least 2 source domains")
    theta, opt = _init(domains, cfg, arch, theta, opt)
    draw = lambda step: build_meta_batch(domains, cfg.batch_size, step_rng(cfg.seed, step), cfg.strategy)
    return _run(theta, opt, cfg, draw, on_step, cfg)


def baseline_config(cfg: TrainerConfig) -> TrainerConfig:
    return replace(cfg, mode="no_meta", gamma=1.0)


def train_baseline_joint(
    domains: list[DomainDataset],
    cfg: TrainerConfig,
    arch: Architecture | None = None,
    *,
    theta: ParameterSet | None = None,
    opt: OptimizerState | None = None,
    on_step: StepHook | None = None,
) -> tuple[ParameterSet, list[dict]]:
    """Pooled-domain training with the same losses and optimizer, no meta split."""
    cfg.validate()
    theta, opt = _init(domains, cfg, arch, theta, opt)

    def draw(step: int) -> MetaBatch:
        batch = build_pooled_batch(domains, cfg.batch_size, step_rng(cfg.seed, step))
        ids = tuple(d.domain_id for d in domains)
        return MetaBatch((Episode(batch, batch, ids, ids),))

    return _run(theta, opt, cfg, draw, on_step, baseline_config(cfg), label="joint")


def _init(domains, cfg, arch, theta, opt):
    if theta is None:
        if arch is None:
            arch = Architecture(input_dim=domains[0].obs_dim)
        theta = init_params(arch, cfg.seed)
    if opt is None:
        opt = OptimizerState.zeros_like(theta)
    return theta, opt


def write_metrics_csv(rows: list[dict], fh: io.TextIOBase, header: bool = True) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            if k == "mode":
                conv[k] = v
            elif k in ("step", "episode", "num_P", "num_N"):
                conv[k] = int(v)
            else:
                conv[k] = float(v)
        out.append(conv)
    return out
