"""Finite-difference verification suites for gradients and meta-gradients.

Each suite returns :class:`CheckResult` records; ``run_all`` drives the
``grad-check`` command. Relative errors are measured against the largest
reference magnitude: ``max|a - b| / max(max|a|, max|b|)``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import (
    LossConfig,
    PairBatch,
    Thresholds,
    loss_terms,
    template_matrix,
)
from .model import Architecture, ParameterSet, apply, axpy, init_params
from .sampling import Episode, build_meta_batch
from .synth import GeneratorConfig, generate
from .trainer import embed, episode_gradients

FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3
TAYLOR_RANGE = (0.15, 0.35)
GAP_SHRINK = 0.7


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    limit: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite:<13} {self.name:<28} {self.value:.3e}  ({self.limit})"


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x.copy())
        flat[i] = keep - h
        down = f(x.copy())
        flat[i] = keep
        g[i] = (up - down) / (2.0 * h)
    return out


# -- fixtures ---------------------------------------------------------------


TOY_DATA = GeneratorConfig(
    num_domains=3,
    identities_per_domain=16,
    observations_per_identity=2,
    latent_dim=4,
    obs_dim=6,
    noise=0.3,
    shift=0.6,
)
TOY_ARCH = Architecture(input_dim=6, hidden=(12,), output_dim=16)


def toy_episode(seed: int, batch_size: int = 8) -> Episode:
    domains = generate(replace(TOY_DATA, seed=seed))
    rng = np.random.default_rng(seed)
    return build_meta_batch(domains, batch_size, rng).episodes[seed % len(domains)]


def toy_params(seed: int, arch: Architecture = TOY_ARCH) -> ParameterSet:
    theta = init_params(arch, seed)
    rng = np.random.default_rng(seed + 7919)
    # nonzero biases so every primitive sees generic values
    return ParameterSet(
        [(n, v + 0.1 * rng.standard_normal(v.shape)) if n.endswith("bias") else (n, v) for n, v in theta]
    )


def random_embeddings(seed: int, b: int = 8, c: int = 16) -> PairBatch:
    """Correlated raw embeddings that keep every loss term informative.

    A shared direction makes negatives look alike (hard negatives, an
    unsaturated softmax at s=64), and a spread of gallery/probe correlations
    from -0.6 to 1 yields both easy and hard positives.
    """
    rng = np.random.default_rng(seed)
    common = 1.5 * rng.standard_normal(c)
    g = common + rng.standard_normal((b, c))
    rho = rng.permutation(np.linspace(-0.6, 1.0, b))[:, None]
    p = rho * g + (1.0 - np.abs(rho)) * (common + rng.standard_normal((b, c)))
    tags = np.arange(b) % 3
    return PairBatch(g, p, np.arange(b), tags)


# -- first-order suites -----------------------------------------------------


def _primitive_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    any_ = lambda *s: rng.standard_normal(s)
    return {
        "add": (lambda a, b: ad.add(a, b), [any_(3, 4), any_(1, 4)]),
        "sub": (lambda a, b: ad.sub(a, b), [any_(3, 4), any_(3, 1)]),
        "mul": (lambda a, b: ad.mul(a, b), [any_(3, 4), any_(3, 4)]),
        "div": (lambda a, b: ad.div(a, b), [any_(3, 4), pos(3, 4)]),
        "matmul": (lambda a, b: ad.matmul(a, b), [any_(3, 5), any_(5, 2)]),
        "transpose": (lambda a: ad.transpose(a), [any_(3, 4)]),
        "sum_axis": (lambda a: ad.sum_axis(a, 1), [any_(3, 4)]),
        "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 4)), [any_(1, 4)]),
        "sum_to": (lambda a: ad.sum_to(a, (1, 4)), [any_(3, 4)]),
        "tanh": (lambda a: ad.tanh(a), [any_(3, 4)]),
        "exp": (lambda a: ad.exp(a), [any_(3, 4)]),
        "log": (lambda a: ad.log(a), [pos(3, 4)]),
        "sqrt": (lambda a: ad.sqrt(a), [pos(3, 4)]),
        "take": (lambda a: ad.take(a, [2, 0, 2], 0), [any_(3, 4)]),
        "take_pairs": (lambda a: ad.take_pairs(a, [0, 1, 1], [3, 0, 0]), [any_(3, 4)]),
        "l2_normalize_rows": (lambda a: ad.l2_normalize_rows(a), [any_(3, 4)]),
        "log_softmax_rows": (lambda a: ad.log_softmax_rows(a), [any_(3, 4)]),
    }


def check_primitives(seed: int = 0, h: float = 1e-5, tol: float = FIRST_ORDER_TOL) -> list[CheckResult]:
    """First and second derivatives of every primitive against differences."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, args) in _primitive_cases(rng).items():
        weights = None

        def scalar(*vals):
            nonlocal weights
            out = fn(*vals)
            if weights is None:
                weights = np.random.default_rng(seed + 1).standard_normal(out.value.shape)
            return ad.sum_all(ad.mul(out, weights))

        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in args]
        y = scalar(*leaves)
        grads = ad.grad(tape, y, leaves, create_graph=True)
        worst = 0.0
        for i, a in enumerate(args):
            f = lambda x, i=i: float(scalar(*[x if j == i else args[j] for j in range(len(args))]).value)
            worst = max(worst, rel_error(grads[i].value, central_difference(f, a, h)))
        results.append(CheckResult("first-order", name, worst, f"<= {tol:g}", worst <= tol))

        # second order: d/dx <grad_x f, v> against differences of the first grad
        v = [np.random.default_rng(seed + 2).standard_normal(a.shape) for a in args]
        inner = ad.sum_all(ad.mul(grads[0], v[0]))
        if inner.index < 0:
            continue
        hv = ad.grad(tape, inner, leaves)

        def first(x, i):
            t = ad.Tape()
            lv = [t.leaf(x if j == i else args[j]) for j in range(len(args))]
            return ad.grad(t, scalar(*lv), lv)[0]

        worst2 = 0.0
        for i, a in enumerate(args):
            f = lambda x, i=i: float(np.sum(first(x, i) * v[0]))
            worst2 = max(worst2, rel_error(hv[i], central_difference(f, a, h)))
        results.append(
            CheckResult("second-order", f"{name} (hvp)", worst2, f"<= {SECOND_ORDER_TOL:g}", worst2 <= SECOND_ORDER_TOL)
        )
    return results


def _loss_variants(cfg: LossConfig):
    """Loss name -> (config, frozen_template).

    With the template stop-gradient on, autodiff differentiates the loss with
    the class templates held at their current value, so the finite-difference
    oracle must hold them fixed too.
    """
    only = lambda **kw: replace(cfg, **{"use_hp": False, "use_cls": False, "use_da": False, **kw})
    return {
        "hard_pair": (only(use_hp=True), False),
        "soft_cls (stop-grad W)": (only(use_cls=True, stop_template_grad=True), True),
        "soft_cls (full)": (only(use_cls=True, stop_template_grad=False), False),
        "domain_alignment": (only(use_da=True), False),
    }


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def reference_loss(g, p, tags, cfg: LossConfig, template=None) -> float:
    """Plain-numpy loss total, written independently of the autodiff graph."""
    g, p = _unit(np.asarray(g, dtype=np.float64)), _unit(np.asarray(p, dtype=np.float64))
    b = len(g)
    total = 0.0
    if cfg.use_hp:
        M = g @ p.T
        t = cfg.thresholds
        D = np.sum((g[:, None, :] - p[None, :, :]) ** 2, axis=2)
        pos = np.diag(M) < t.tau_p
        neg = (M > t.tau_n) & ~np.eye(b, dtype=bool)
        if pos.any():
            total += np.diag(D)[pos].sum() / (2 * pos.sum())
        if neg.any():
            total -= D[neg].sum() / (2 * neg.sum())
    if cfg.use_cls:
        W = _unit(0.5 * (g + p) if template is None else np.asarray(template))
        ce = 0.0
        for f in (g, p):
            z = cfg.scale * f @ W.T
            z = z - z.max(axis=1, keepdims=True)
            ce += np.sum(np.log(np.exp(z).sum(axis=1)) - np.diag(z))
        total += ce / (2 * b)
    if cfg.use_da:
        domains = np.unique(tags)
        if len(domains) > 1:
            mid = 0.5 * (g + p)
            centers = np.stack([mid[tags == d].mean(axis=0) for d in domains])
            spread = cfg.scale * (centers - centers.mean(axis=0))
            total += cfg.da_weight * np.sum(spread**2) / len(domains)
    return float(total)


def reference_forward(theta: ParameterSet, x: np.ndarray) -> np.ndarray:
    vals = [np.asarray(v) for v in theta.values]
    h = np.asarray(x, dtype=np.float64)
    for k in range(0, len(vals), 2):
        h = h @ vals[k] + vals[k + 1]
        if k + 2 < len(vals):
            h = np.tanh(h)
    return h


def check_loss_gradients(
    seed: int,
    cfg: LossConfig = LossConfig(),
    h: float = 1e-5,
    tol: float = FIRST_ORDER_TOL,
) -> list[CheckResult]:
    """Loss gradients w.r.t. raw embeddings and w.r.t. MLP parameters."""
    batch = random_embeddings(seed)
    arch = Architecture(input_dim=16, hidden=(6,), output_dim=16)
    theta = toy_params(seed, arch)
    flat = theta.flat()
    labels, tags = batch.identity_labels, batch.domain_tags
    results = []
    for name, (lcfg, frozen) in _loss_variants(cfg).items():
        tape = ad.Tape()
        g = tape.leaf(batch.gallery)
        p = tape.leaf(batch.probe)
        loss = loss_terms(PairBatch(g, p, labels, tags), lcfg, True).total
        dg, dp = ad.grad(tape, loss, [g, p])
        template = template_matrix(batch) if frozen else None

        def on_emb(x, which):
            gg, pp = (x, batch.probe) if which == 0 else (batch.gallery, x)
            return reference_loss(gg, pp, tags, lcfg, template)

        err = max(
            rel_error(dg, central_difference(lambda x: on_emb(x, 0), batch.gallery, h)),
            rel_error(dp, central_difference(lambda x: on_emb(x, 1), batch.probe, h)),
        )
        results.append(CheckResult("first-order", f"{name} / embeddings", err, f"<= {tol:g}", err <= tol))

        template = template_matrix(embed(theta, batch)) if frozen else None

        obs = np.vstack([batch.gallery, batch.probe])

        def on_theta(vec):
            f = reference_forward(theta.unflatten(vec), obs)
            return reference_loss(f[: batch.size], f[batch.size :], tags, lcfg, template)

        tape = ad.Tape()
        th = theta.to_leaves(tape)
        loss = loss_terms(embed(th, batch), lcfg, True).total
        analytic = np.concatenate([g.ravel() for g in ad.grad(tape, loss, th.values)])
        err = rel_error(analytic, central_difference(on_theta, flat, h))
        results.append(CheckResult("first-order", f"{name} / params", err, f"<= {tol:g}", err <= tol))
    return results


# -- meta-gradient suites ---------------------------------------------------


def composed_objective(theta: ParameterSet, episode: Episode, lcfg: LossConfig, alpha: float, gamma: float) -> float:
    """``γ L_S(θ) + (1-γ) L_T(θ - α ∇L_S(θ))`` evaluated numerically."""
    tape = ad.Tape()
    th = theta.to_leaves(tape)
    ls = loss_terms(embed(th, episode.meta_train), lcfg, True).total
    gs = ad.grad(tape, ls, th.values)
    lt = loss_terms(embed(axpy(theta, -alpha, gs), episode.meta_test), lcfg, False).total
    return gamma * float(ls.value) + (1.0 - gamma) * float(lt.value)


def meta_gradient(theta, episode, lcfg, alpha, gamma, mode="high_order") -> np.ndarray:
    res = episode_gradients(theta, episode, lcfg, alpha, mode)
    return np.concatenate(
        [(gamma * gs + (1.0 - gamma) * gt).ravel() for gs, gt in zip(res.grad_train, res.grad_test)]
    )


# Finite differences see the true composed function, so the template is
# differentiated through here.
META_LOSS = LossConfig(scale=16.0, stop_template_grad=False)


def check_meta_gradient(
    seed: int,
    alpha: float = 1e-2,
    gamma: float = 0.5,
    cfg: LossConfig = META_LOSS,
    h: float = 1e-5,
    tol: float = SECOND_ORDER_TOL,
) -> CheckResult:
    episode = toy_episode(seed)
    theta = toy_params(seed)
    analytic = meta_gradient(theta, episode, cfg, alpha, gamma)
    f = lambda vec: composed_objective(theta.unflatten(vec), episode, cfg, alpha, gamma)
    err = rel_error(analytic, central_difference(f, theta.flat(), h))
    return CheckResult("second-order", f"meta-gradient seed={seed}", err, f"<= {tol:g}", err <= tol)


# Smooth toy objective for asymptotic checks: no hard-pair mining (its sets
# flip with the step) and a small scale so that α = 1e-2 is a small step
# relative to the curvature of the s²-weighted alignment term.
SMOOTH_LOSS = LossConfig(scale=2.0, use_hp=False, stop_template_grad=False)


def taylor_residual(theta, episode, lcfg, alpha, gamma) -> float:
    """Gap between the meta objective and its first-order Taylor model."""
    tape = ad.Tape()
    th = theta.to_leaves(tape)
    ls = loss_terms(embed(th, episode.meta_train), lcfg, True).total
    gs = ad.grad(tape, ls, th.values)
    tape_t = ad.Tape()
    tt = theta.to_leaves(tape_t)
    lt0 = loss_terms(embed(tt, episode.meta_test), lcfg, False).total
    gt = ad.grad(tape_t, lt0, tt.values)
    lt1 = loss_terms(embed(axpy(theta, -alpha, gs), episode.meta_test), lcfg, False).total
    dot = sum(float(np.sum(a * b)) for a, b in zip(gs, gt))
    ls_v = float(ls.value)
    exact = gamma * ls_v + (1 - gamma) * float(lt1.value)
    model = gamma * ls_v + (1 - gamma) * float(lt0.value) - alpha * (1 - gamma) * dot
    return abs(exact - model)


def check_taylor(seed: int, alpha: float = 1e-2, gamma: float = 0.5, cfg: LossConfig = SMOOTH_LOSS) -> CheckResult:
    episode = toy_episode(seed)
    theta = toy_params(seed)
    r1 = taylor_residual(theta, episode, cfg, alpha, gamma)
    r2 = taylor_residual(theta, episode, cfg, alpha / 2, gamma)
    ratio = r2 / r1
    lo, hi = TAYLOR_RANGE
    return CheckResult("taylor", f"R(a/2)/R(a) seed={seed}", ratio, f"in [{lo}, {hi}]", lo <= ratio <= hi)


def first_order_gaps(
    seed: int, alphas=(1e-2, 5e-3, 2.5e-3), gamma: float = 0.5, cfg: LossConfig = SMOOTH_LOSS
) -> list[float]:
    """Relative gap between high-order and first-order meta-gradients per α.

    The gap is ``(1-γ) α H_S ∇L_T(θ')`` and so shrinks linearly in α, but only
    on a smooth objective: hard-pair mining flips sets between step sizes.
    """
    episode = toy_episode(seed)
    theta = toy_params(seed)
    gaps = []
    for a in alphas:
        hi = meta_gradient(theta, episode, cfg, a, gamma, "high_order")
        lo = meta_gradient(theta, episode, cfg, a, gamma, "first_order")
        gaps.append(float(np.linalg.norm(hi - lo) / np.linalg.norm(hi)))
    return gaps


def check_first_order_gap(seed: int, alphas=(1e-2, 5e-3, 2.5e-3)) -> CheckResult:
    gaps = first_order_gaps(seed, alphas)
    worst = max(b / a for a, b in zip(gaps, gaps[1:]))
    return CheckResult(
        "first-order-gap", f"gap ratio seed={seed}", worst, f"<= {GAP_SHRINK}", worst <= GAP_SHRINK
    )


SUITES = ("first-order", "second-order", "taylor", "first-order-gap")


def run_all(seeds=range(3)) -> list[CheckResult]:
    seeds = list(seeds)
    results: list[CheckResult] = []
    results += check_primitives(seeds[0])
    for s in seeds:
        results += check_loss_gradients(s)
    results += [check_meta_gradient(s) for s in seeds]
    results += [check_taylor(s) for s in seeds]
    results += [check_first_order_gap(s) for s in seeds]
    return results


@contextmanager
def injected_bug(factor: float = 1.01):
    """Temporarily scale the tanh derivative; every suite should then fail."""
    original = ad.tanh

    def buggy(a):
        a = ad.as_var(a)
        return ad._emit(
            np.tanh(a.value),
            (a,),
            lambda g, out: (ad.mul(factor, ad.mul(g, ad.sub(1.0, ad.mul(out, out)))),),
        )

    ad.tanh = buggy
    try:
        yield
    finally:
        ad.tanh = original
