"""The ten acceptance criteria, each at its stated tolerance and time budget.

A verdict line per criterion is printed in the terminal summary.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import record
from oracles import brute_auc, brute_pairs, brute_rank1, brute_vr_at_far
from test_evaluation import micro_protocol

from mfr import cli, verify
from mfr.evaluation import evaluate, metrics_from_scores
from mfr.sampling import build_meta_batch
from mfr.synth import GeneratorConfig, generate
from mfr.trainer import (
    OptimizerState,
    TrainerConfig,
    aggregate,
    apply_schedules,
    train,
    train_baseline_joint,
)

E2E_SEEDS = range(5)


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_1_loss_gradients():
    results, secs = timed(lambda: [r for s in range(20) for r in verify.check_loss_gradients(s)])
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and worst <= 1e-4 and secs <= 30
    record(1, ok, f"loss gradients, 20 seeds: max rel err {worst:.2e} (<= 1e-4), {secs:.1f}s (<= 30s)")
    assert ok


def test_2_meta_gradient():
    assert verify.toy_params(0).num_params() <= 500
    results, secs = timed(lambda: [verify.check_meta_gradient(s, alpha=1e-2) for s in range(10)])
    worst = max(r.value for r in results)
    ok = worst <= 1e-3 and secs <= 60
    record(2, ok, f"meta-gradient, 10 seeds: max rel err {worst:.2e} (<= 1e-3), {secs:.1f}s (<= 60s)")
    assert ok


def test_3_alpha_zero_equivalence():
    domains = generate(verify.TOY_DATA)
    identical = []
    for seed in range(5):
        theta = verify.toy_params(seed)
        mb = build_meta_batch(domains, 8, np.random.default_rng(seed))
        grads = {}
        for mode in ("high_order", "first_order"):
            cfg = TrainerConfig(alpha=0.0, batch_size=8, mode=mode, seed=seed)
            grads[mode], _ = aggregate(theta, mb, cfg, apply_schedules(cfg, OptimizerState([], 0)))
        identical.append(all(np.array_equal(a, b) for a, b in zip(grads["high_order"], grads["first_order"])))
    ok = all(identical)
    record(3, ok, f"alpha=0 high/first-order aggregated gradients bit-identical on {sum(identical)}/5 seeds")
    assert ok


def test_4_first_order_gap():
    alphas = (1e-2, 5e-3, 2.5e-3)
    ratios, decreasing = [], True
    for seed in range(5):
        gaps = verify.first_order_gaps(seed, alphas)
        decreasing &= all(b < a for a, b in zip(gaps, gaps[1:]))
        ratios.append(max(b / a for a, b in zip(gaps, gaps[1:])))
    ok = decreasing and max(ratios) <= 0.7
    record(4, ok, f"first-order gap: worst gap(a/2)/gap(a) {max(ratios):.3f} (<= 0.7), decreasing={decreasing}")
    assert ok


def test_5_taylor_ratio():
    ratios = [verify.check_taylor(seed, alpha=1e-2).value for seed in range(5)]
    ok = all(0.15 <= r <= 0.35 for r in ratios)
    record(5, ok, f"Taylor residual ratio R(a/2)/R(a) in [{min(ratios):.3f}, {max(ratios):.3f}] (within [0.15, 0.35])")
    assert ok


def test_6_metric_oracles():
    mismatches = 0
    for seed in range(50):
        scores, pl, gl = micro_protocol(seed, max_ids=30)
        gen, imp = brute_pairs(scores, pl, gl)
        fars = [f for f in (1e-1, 1e-2, 1e-3) if len(imp) >= round(1 / f)]
        report = metrics_from_scores(scores, pl, gl, fars)
        same = report.rank1 == brute_rank1(scores, pl, gl) and report.auc == brute_auc(gen, imp)
        same &= all(report.vr_at_far[f] == brute_vr_at_far(gen, imp, f) for f in fars)
        mismatches += not same
    ok = mismatches == 0
    record(6, ok, f"VR@FAR, Rank-1 and AUC exact against brute force on {50 - mismatches}/50 micro-protocols")
    assert ok


# -- end-to-end generalization ---------------------------------------------------------


def _benchmark(seed):
    domains = generate(GeneratorConfig(seed=seed))
    return domains[:4], domains[4]


def _score(theta, target):
    report = evaluate(theta, target)
    return report.rank1, report.vr_at_far[1e-2]


@pytest.fixture(scope="module")
def e2e():
    cfg = TrainerConfig(max_iterations=1000, batch_size=32)
    out = {"mfr": [], "joint": [], "secs": 0.0}
    for seed in E2E_SEEDS:
        sources, target = _benchmark(seed)
        c = replace(cfg, seed=seed)
        (theta, _), secs = timed(lambda: train(sources, c))
        out["mfr"].append(_score(theta, target))
        out["secs"] += secs
        (theta, _), secs = timed(lambda: train_baseline_joint(sources, c))
        out["joint"].append(_score(theta, target))
        out["secs"] += secs
    return out


@pytest.fixture(scope="module")
def no_meta_runs():
    cfg = TrainerConfig(max_iterations=1000, batch_size=32, mode="no_meta")
    scores = []
    for seed in E2E_SEEDS:
        sources, target = _benchmark(seed)
        theta, _ = train(sources, replace(cfg, seed=seed))
        scores.append(_score(theta, target))
    return scores


@pytest.mark.slow
def test_7_end_to_end_generalization(e2e):
    mfr, joint = np.array(e2e["mfr"]), np.array(e2e["joint"])
    wins = (mfr > joint).sum(axis=0)
    means_m, means_j = mfr.mean(axis=0), joint.mean(axis=0)
    ok = bool(np.all(means_m > means_j) and np.all(wins >= 4) and e2e["secs"] <= 600)
    record(
        7,
        ok,
        f"unseen-domain Rank-1 MFR {means_m[0]:.3f} vs joint {means_j[0]:.3f} (wins {wins[0]}/5), "
        f"VR@1% {means_m[1]:.3f} vs {means_j[1]:.3f} (wins {wins[1]}/5), {e2e['secs']:.0f}s (<= 600s)",
    )
    assert ok


@pytest.mark.slow
def test_8_no_meta_ablation(e2e, no_meta_runs):
    full = np.mean([r[0] for r in e2e["mfr"]])
    ablated = np.mean([r[0] for r in no_meta_runs])
    ok = ablated < full
    record(8, ok, f"unseen-domain Rank-1 no_meta {ablated:.3f} < MFR {full:.3f}")
    assert ok


# -- reproducibility and sampling ------------------------------------------------------


def test_9_cli_determinism(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"trainer": {"max_iterations": 20}, "checkpoint_every": 10}))
    data = tmp_path / "data.bin"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    for name in ("a", "b"):
        args = ["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name)]
        assert cli.main(args) == 0
    files = ["metrics.csv", "final.ckpt", "checkpoints/step_000010.ckpt", "checkpoints/step_000020.ckpt"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = all(same)
    record(9, ok, f"two single-threaded train runs byte-identical on {sum(same)}/{len(files)} files")
    assert ok


def test_10_sampling_invariants():
    sources, _ = _benchmark(0)
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        mb = build_meta_batch(sources, 32, rng)
        tests = sorted(d for ep in mb.episodes for d in ep.test_domains)
        ok_batch = tests == [d.domain_id for d in sources]
        for ep in mb.episodes:
            tr, te = ep.meta_train.identity_labels, ep.meta_test.identity_labels
            ok_batch &= not set(ep.train_domains) & set(ep.test_domains)
            ok_batch &= len(set(tr)) == len(tr) and len(set(te)) == len(te)
            ok_batch &= not set(tr.tolist()) & set(te.tolist())
        bad += not ok_batch
    secs = time.perf_counter() - start
    ok = bad == 0 and secs <= 10
    record(10, ok, f"1000 meta-batches: exactly-once meta-test and identity-disjoint on {1000 - bad}/1000, {secs:.1f}s (<= 10s)")
    assert ok
