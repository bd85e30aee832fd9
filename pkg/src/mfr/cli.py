"""Command-line entry point: ``mfr gen-data | train | eval | grad-check``.

Exit codes:
    0  success
    2  configuration error
    3  I/O error (missing, unreadable or corrupt files)
    4  training diverged (last good checkpoint is kept)
    5  evaluation protocol error (e.g. unknown domain)
    6  a gradient check failed

``MFR_NUM_THREADS`` caps BLAS threads (default 1, which keeps runs
bit-reproducible).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .evaluation import ProtocolConfig, ProtocolError, SampleSizeError, evaluate
from .model import (
    Checkpoint,
    CheckpointError,
    ParameterSet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .synth import ConfigError, DatasetError, generate, load_dataset, save_dataset
from .trainer import (
    OptimizerState,
    TrainingDiverged,
    read_metrics_csv,
    train,
    train_baseline_joint,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_PROTOCOL = 5
EXIT_CHECK_FAILED = 6


def _thread_limit():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(int(os.environ.get("MFR_NUM_THREADS", "1")))


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return config_mod.load(path)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    domains = generate(cfg.data)
    save_dataset(domains, args.out, cfg.data)
    n_ids = sum(d.num_identities for d in domains)
    print(
        f"wrote {args.out}: {len(domains)} domains, {n_ids} identities, "
        f"{cfg.data.observations_per_identity} observations each, dim {cfg.data.obs_dim}"
    )
    return EXIT_OK


def _split_domains(domains, target: int):
    ids = [d.domain_id for d in domains]
    if target not in ids:
        raise ConfigError(f"protocol.target_domain {target} not in dataset domains {ids}")
    return [d for d in domains if d.domain_id != target], domains[ids.index(target)]


def _checkpoint(theta: ParameterSet, opt: OptimizerState, cfg: RunConfig, arch) -> Checkpoint:
    return Checkpoint(
        params=theta,
        arch=arch,
        config_hash=cfg.hash(),
        meta={"step": opt.step, "n_decay": opt.n_decay, "algorithm": cfg.algorithm, "mode": cfg.trainer.mode},
        extra={f"velocity/{n}": v for n, v in zip(theta.names, opt.velocity)},
    )


def _restore(ckpt: Checkpoint) -> tuple[ParameterSet, OptimizerState]:
    velocity = [np.array(ckpt.extra[f"velocity/{n}"]) for n in ckpt.params.names]
    opt = OptimizerState(velocity, int(ckpt.meta["step"]), int(ckpt.meta.get("n_decay", 0)))
    return ckpt.params, opt


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg = config_mod.with_mode(cfg, args.mode)
    domains = load_dataset(args.data)
    sources, _ = _split_domains(domains, cfg.target_domain)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    arch = cfg.model.architecture(sources[0].obs_dim)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.arch != arch:
            raise ConfigError(f"checkpoint architecture {ckpt.arch} does not match config {arch}")
        theta, opt = _restore(ckpt)
    else:
        theta = init_params(arch, cfg.trainer.seed)
        opt = OptimizerState.zeros_like(theta)

    metrics_path = out / "metrics.csv"
    append = bool(args.resume) and metrics_path.exists()
    fit = train_baseline_joint if cfg.algorithm == "joint" else train
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        if not append:
            write_metrics_csv([], fh)

        def on_step(step, th, st, rows):
            write_metrics_csv(rows, fh, header=False)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{step:06d}.ckpt", _checkpoint(th, st, cfg, arch))

        try:
            theta, _ = fit(sources, cfg.trainer, arch, theta=theta, opt=opt, on_step=on_step)
        except TrainingDiverged as exc:
            fh.flush()
            save_checkpoint(out / "last_good.ckpt", _checkpoint(exc.theta, exc.opt, cfg, arch))
            print(f"diverged at step {exc.step}, episode {exc.episode}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    save_checkpoint(out / "final.ckpt", _checkpoint(theta, opt, cfg, arch))

    from .plotting import plot_training_curves

    plot_training_curves(read_metrics_csv(metrics_path), out / "training_curves.png")
    print(f"trained {cfg.algorithm}/{cfg.trainer.mode} for {opt.step} steps -> {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    domains = load_dataset(args.data)
    by_id = {d.domain_id: d for d in domains}
    if args.domain not in by_id:
        print(f"protocol error: domain {args.domain} not in dataset {sorted(by_id)}", file=sys.stderr)
        return EXIT_PROTOCOL
    report = evaluate(ckpt.params, by_id[args.domain], ProtocolConfig(far_levels=cfg.protocol.far_levels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_text(out / "report.txt")
    report.write_csv(out / "report.csv", extra={"checkpoint": Path(args.checkpoint).name, "domain": args.domain})

    from .plotting import plot_roc

    plot_roc(report, out / "roc.png")
    for k, v in report.as_dict().items():
        print(f"{k}\t{v}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from . import verify

    ctx = verify.injected_bug() if args.inject_bug else contextlib.nullcontext()
    with ctx:
        results = verify.run_all(range(args.seeds))
    for r in results:
        print(r.line())
    suites = {s: all(r.passed for r in results if r.suite == s) for s in verify.SUITES}
    for suite, ok in suites.items():
        print(f"suite {suite}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--config", help="run config JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="meta-train (or joint-train) on the source domains")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("high_order", "first_order", "no_meta", "joint"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference verification suites")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, SampleSizeError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
