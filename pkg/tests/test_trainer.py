import io
from dataclasses import replace

import numpy as np
import pytest

from mfr import autodiff as ad
from mfr.losses import LossConfig, loss_terms
from mfr.model import Architecture, ParameterSet, axpy, init_params
from mfr.sampling import Episode, MetaBatch, build_meta_batch, build_pooled_batch
from mfr.synth import DomainDataset, GeneratorConfig, generate
from mfr.trainer import (
    METRIC_COLUMNS,
    DivergenceError,
    OptimizerState,
    TrainerConfig,
    TrainingDiverged,
    aggregate,
    apply_schedules,
    embed,
    episode_gradients,
    meta_step,
    read_metrics_csv,
    sgd_update,
    step_rng,
    train,
    train_baseline_joint,
    write_metrics_csv,
)
from mfr.verify import TOY_ARCH, TOY_DATA, toy_episode, toy_params

TOY = TrainerConfig(batch_size=8, max_iterations=5, alpha=0.01, beta=0.01)


@pytest.fixture(scope="module")
def domains():
    return generate(TOY_DATA)


def flat(gs):
    return np.concatenate([np.ravel(g) for g in gs])


# -- schedules -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "step,expected",
    [
        (0, (0.0004, 0.0004, 0.3, 0.04)),
        (999, (0.0004, 0.0004, 0.3, 0.04)),
        (1000, (0.0002, 0.0002, 0.4, 0.08)),
        (2000, (0.0001, 0.0001, 0.5, 0.16)),
    ],
)
def test_schedule_values(step, expected):
    s = apply_schedules(TrainerConfig(), OptimizerState([], step=step))
    assert (s.alpha, s.beta, s.tau_p, s.tau_n) == pytest.approx(expected, rel=1e-12)


def test_schedule_caps():
    s = apply_schedules(TrainerConfig(), OptimizerState([], step=10_000))
    assert s.n_decay == 10
    assert s.tau_p == 1.0
    assert s.tau_n == 1.0  # 0.04 * 2**10 capped at tau_p
    s = apply_schedules(TrainerConfig(), OptimizerState([], step=4000))
    assert s.tau_p == pytest.approx(0.7) and s.tau_n == pytest.approx(0.64)
    s = apply_schedules(TrainerConfig(), OptimizerState([], step=5000))
    assert s.tau_n == s.tau_p == pytest.approx(0.8)


def test_config_validation():
    for bad in ({"gamma": 1.5}, {"alpha": -1.0}, {"decay_rate": 0.0}, {"mode": "zeroth"}, {"tau_n": 0.5}):
        with pytest.raises(ValueError):
            replace(TrainerConfig(), **bad).validate()


# -- meta-gradient -------------------------------------------------------------------------


def test_one_dimensional_toy():
    """L_S = L_T = θ², α = 0.1, γ = 0.5 gives 1.64 at θ = 1."""
    tape = ad.Tape()
    theta = ParameterSet([("w", tape.leaf(np.array(1.0)))])
    ls = theta["w"] * theta["w"]
    (gs,) = ad.grad(tape, ls, theta.values, create_graph=True)
    w2 = axpy(theta, -0.1, [gs])["w"]
    (gt,) = ad.grad(tape, w2 * w2, theta.values)
    assert 0.5 * float(gs.value) + 0.5 * float(gt) == pytest.approx(1.64, abs=1e-12)


def test_alpha_zero_modes_bit_identical():
    for seed in range(3):
        ep = toy_episode(seed)
        theta = toy_params(seed)
        hi = episode_gradients(theta, ep, LossConfig(), 0.0, "high_order")
        lo = episode_gradients(theta, ep, LossConfig(), 0.0, "first_order")
        assert all(np.array_equal(a, b) for a, b in zip(hi.grad_train, lo.grad_train))
        assert all(np.array_equal(a, b) for a, b in zip(hi.grad_test, lo.grad_test))


def test_gamma_one_uses_meta_train_only(domains):
    theta = toy_params(0)
    mb = build_meta_batch(domains, 8, np.random.default_rng(0))
    cfg = replace(TOY, gamma=1.0)
    sched = apply_schedules(cfg, OptimizerState([], 0))
    total, _ = aggregate(theta, mb, cfg, sched)
    expected = sum(flat(episode_gradients(theta, ep, LossConfig(), sched.alpha, "high_order").grad_train) for ep in mb.episodes)
    np.testing.assert_allclose(flat(total), expected, rtol=0, atol=1e-12)


def test_high_order_equals_gradient_of_composed_objective():
    alpha, gamma = 0.05, 0.3
    for seed in range(3):
        ep, theta = toy_episode(seed), toy_params(seed)
        res = episode_gradients(theta, ep, LossConfig(), alpha, "high_order")
        agg = [gamma * a + (1 - gamma) * b for a, b in zip(res.grad_train, res.grad_test)]
        tape = ad.Tape()
        th = theta.to_leaves(tape)
        ls = loss_terms(embed(th, ep.meta_train), LossConfig(), True).total
        gs = ad.grad(tape, ls, th.values, create_graph=True)
        lt = loss_terms(embed(axpy(th, -alpha, gs), ep.meta_test), LossConfig(), False).total
        objective = ad.add(ad.mul(gamma, ls), ad.mul(1 - gamma, lt))
        direct = ad.grad(tape, objective, th.values)
        np.testing.assert_allclose(flat(agg), flat(direct), rtol=0, atol=1e-10 * np.abs(flat(direct)).max())


def test_first_order_and_no_meta_points():
    ep, theta = toy_episode(1), toy_params(1)
    alpha = 0.05
    res = episode_gradients(theta, ep, LossConfig(), alpha, "first_order")
    prime = axpy(theta, -alpha, res.grad_train)
    tape = ad.Tape()
    th = prime.to_leaves(tape)
    expected = ad.grad(tape, loss_terms(embed(th, ep.meta_test), LossConfig(), False).total, th.values)
    assert all(np.array_equal(a, b) for a, b in zip(res.grad_test, expected))

    res = episode_gradients(theta, ep, LossConfig(), alpha, "no_meta")
    tape = ad.Tape()
    th = theta.to_leaves(tape)
    expected = ad.grad(tape, loss_terms(embed(th, ep.meta_test), LossConfig(), False).total, th.values)
    assert all(np.array_equal(a, b) for a, b in zip(res.grad_test, expected))


def test_meta_test_gap_shrinks_with_alpha():
    ep, theta = toy_episode(2), toy_params(2)
    cfg = LossConfig(use_hp=False, scale=2.0, stop_template_grad=False)
    gaps = []
    for alpha in (1e-2, 5e-3):
        hi = flat(episode_gradients(theta, ep, cfg, alpha, "high_order").grad_test)
        lo = flat(episode_gradients(theta, ep, cfg, alpha, "first_order").grad_test)
        gaps.append(np.linalg.norm(hi - lo))
    assert gaps[1] == pytest.approx(gaps[0] / 2, rel=0.05)


# -- optimizer ----------------------------------------------------------------------------


def test_sgd_semantics():
    theta = ParameterSet([("w", np.array([1.0, -2.0]))])
    opt = OptimizerState([np.array([0.5, 0.5])])
    cfg = TrainerConfig(momentum=0.9, weight_decay=0.1)
    out = sgd_update(theta, [np.array([4.0, 2.0])], 2, cfg, 0.1, opt)
    # eff = g/2 + 0.1 w = [2.1, 0.8]; v = 0.45 + eff = [2.55, 1.25]
    np.testing.assert_allclose(opt.velocity[0], [2.55, 1.25], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out["w"], [1.0 - 0.255, -2.0 - 0.125], rtol=0, atol=1e-15)


def test_zero_gradient_without_decay_keeps_theta():
    theta = init_params(TOY_ARCH, 0)
    opt = OptimizerState.zeros_like(theta)
    cfg = TrainerConfig(weight_decay=0.0, gamma=0.37)
    out = sgd_update(theta, [np.zeros(s) for s in theta.shapes()], 3, cfg, 0.5, opt)
    assert out.equal(theta)


# -- training loops -------------------------------------------------------------------------


def test_zero_iterations_is_a_no_op(domains):
    theta, log = train(domains, replace(TOY, max_iterations=0), TOY_ARCH)
    assert theta.equal(init_params(TOY_ARCH, TOY.seed)) and log == []


def test_training_is_deterministic_and_logs_rows(domains):
    a, log_a = train(domains, TOY, TOY_ARCH)
    b, log_b = train(domains, TOY, TOY_ARCH)
    assert a.equal(b)
    assert len(log_a) == TOY.max_iterations * len(domains)
    assert log_a == log_b
    assert {r["mode"] for r in log_a} == {"high_order"}
    assert all(np.isfinite(r[c]) for r in log_a for c in ("L_S", "L_T", "grad_norm"))


def test_resume_matches_uninterrupted_run(domains):
    full, _ = train(domains, TOY, TOY_ARCH)
    theta = init_params(TOY_ARCH, TOY.seed)
    opt = OptimizerState.zeros_like(theta)
    half, _ = train(domains, replace(TOY, max_iterations=2), TOY_ARCH, theta=theta, opt=opt)
    assert opt.step == 2
    resumed, log = train(domains, TOY, TOY_ARCH, theta=half, opt=opt)
    assert resumed.equal(full)
    assert [r["step"] for r in log][:: len(domains)] == [2, 3, 4]


def test_modes_differ_but_alpha_zero_collapses_them(domains):
    runs = {m: train(domains, replace(TOY, mode=m), TOY_ARCH)[0] for m in ("high_order", "first_order")}
    assert not runs["high_order"].equal(runs["first_order"])
    zero = {m: train(domains, replace(TOY, mode=m, alpha=0.0), TOY_ARCH)[0] for m in ("high_order", "first_order")}
    assert zero["high_order"].equal(zero["first_order"])


def test_ablation_switches(domains):
    _, log = train(domains, replace(TOY, use_hp=False, max_iterations=1), TOY_ARCH)
    assert all(r["L_hp"] == 0.0 and r["num_P"] == 0 and r["num_N"] == 0 for r in log)
    _, log = train(domains, replace(TOY, use_cls=False, max_iterations=1), TOY_ARCH)
    assert all(r["L_cls"] == 0.0 for r in log)
    _, log = train(domains, replace(TOY, use_da=False, max_iterations=1), TOY_ARCH)
    assert all(r["L_da"] == 0.0 for r in log)
    _, log = train(domains, replace(TOY, max_iterations=1), TOY_ARCH)
    assert all(r["L_da"] > 0.0 for r in log)


def test_joint_baseline_structure(domains):
    theta, log = train_baseline_joint(domains, TOY, TOY_ARCH)
    assert len(log) == TOY.max_iterations
    assert {r["mode"] for r in log} == {"joint"}
    assert all(r["L_da"] == 0.0 and r["episode"] == 0 for r in log)

    # first step equals a no_meta, γ = 1 step on the pooled batch
    theta0 = init_params(TOY_ARCH, TOY.seed)
    batch = build_pooled_batch(domains, TOY.batch_size, step_rng(TOY.seed, 0))
    ids = tuple(d.domain_id for d in domains)
    mb = MetaBatch((Episode(batch, batch, ids, ids),))
    manual, _ = meta_step(theta0, mb, replace(TOY, mode="no_meta", gamma=1.0), OptimizerState.zeros_like(theta0))
    one, _ = train_baseline_joint(domains, replace(TOY, max_iterations=1), TOY_ARCH)
    assert one.equal(manual)


def test_divergence_keeps_last_good_state(domains):
    bad = [
        DomainDataset(
            d.domain_id, d.identity_ids, [np.full_like(o, np.inf) for o in d.observations]
        )
        if d.domain_id == 1
        else d
        for d in domains
    ]
    with pytest.raises(TrainingDiverged) as info:
        train(bad, TOY, TOY_ARCH)
    err = info.value
    assert isinstance(err, DivergenceError)
    assert err.step == 0
    assert err.theta.equal(init_params(TOY_ARCH, TOY.seed))
    assert err.opt.step == 0


def test_metrics_csv_round_trip(domains, tmp_path):
    _, log = train(domains, replace(TOY, max_iterations=2), TOY_ARCH)
    buf = io.StringIO()
    write_metrics_csv(log, buf)
    path = tmp_path / "m.csv"
    path.write_text(buf.getvalue())
    assert buf.getvalue().splitlines()[0].split(",") == list(METRIC_COLUMNS)
    back = read_metrics_csv(path)
    assert back == log


@pytest.mark.slow
def test_end_to_end_smoke_improves_on_initialization():
    """3 source domains plus 1 held-out, 500 steps, small network."""
    from mfr.evaluation import evaluate

    data = GeneratorConfig(num_domains=4, identities_per_domain=120, latent_dim=8, obs_dim=24, seed=1)
    doms = generate(data)
    arch = Architecture(24, (32,), 16)
    cfg = TrainerConfig(batch_size=16, max_iterations=500, alpha=0.01, beta=0.01, seed=1)
    theta, log = train(doms[:3], cfg, arch)
    before = evaluate(init_params(arch, cfg.seed), doms[3]).rank1
    after = evaluate(theta, doms[3]).rank1
    assert all(np.isfinite(r["L_S"]) for r in log)
    assert after > before
