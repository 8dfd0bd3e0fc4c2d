"""Command-line entry points: ``train``, ``eval``, ``profile`` and ``oracle``.

Every command prints a JSON document on stdout. Errors go to stderr with a
nonzero exit status: 2 for bad input (config, checkpoint, decision string),
3 for a diverged run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .decisions import CapacityError, Decisions, DecisionSpace, enumerate_decisions
from .flops import measured_flops, path_flops
from .model import TransformerModel
from .oracle import DEFAULT_SAMPLE_SIZES, MAX_ORACLE_D, run_oracle, tiny_setup
from .runner import run_training
from .tasks import TASK_KINDS, fixed_set
from .trainer import TrainingDiverged, evaluate

EXIT_INPUT = 2
EXIT_DIVERGED = 3


def _emit(obj, out_dir: Path | None = None, name: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None and name is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n")


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out_dir is not None:
        kw["out_dir"] = str(args.out_dir)
    return cfg.with_overrides(**kw) if kw else cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    try:
        _, summary = run_training(cfg, out)
    except TrainingDiverged as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2), file=sys.stderr)
        return EXIT_DIVERGED
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    overrides = {k: v for k, v in (("kind", args.task), ("n_min", args.n_min), ("n_max", args.n_max), ("k", args.k)) if v is not None}
    task = dataclasses.replace(cfg.task, **overrides) if overrides else cfg.task
    if args.seed is not None:
        task = dataclasses.replace(task, seed=args.seed)
    cfg = cfg.with_overrides(task=task)
    data = fixed_set(task, args.split, args.size)
    report = evaluate(state.model, state.policy, data, state.space, args.decisions, generate=True)
    report.update({"step": state.step, "split": args.split, "task": dataclasses.asdict(task), "decisions": args.decisions})
    _emit(report, args.out_dir, "eval.json")
    return 0


def _profile_lengths(cfg: RunConfig, args) -> tuple[int, int]:
    n_src = args.n_src if args.n_src is not None else cfg.task.n_max
    n_tgt = args.n_tgt if args.n_tgt is not None else cfg.task.max_target_len() + 1
    return n_src, n_tgt


def cmd_profile(args) -> int:
    cfg = _load(args)
    mc = cfg.model
    n_src, n_tgt = _profile_lengths(cfg, args)
    model = TransformerModel(mc, np.random.default_rng([cfg.seed, 1])) if args.verify else None

    def row(d: Decisions) -> dict:
        rep = path_flops(d, n_src, n_tgt, mc)
        out = {"decisions": d.to_text(), **rep.to_dict()}
        if model is not None:
            measured = measured_flops(model, d, n_src, n_tgt)
            out["measured"] = measured
            out["verified"] = measured == rep.total
        return out

    spec = args.decisions
    if spec == "enumerate":
        rows = sorted((row(d) for d in enumerate_decisions(mc.D)), key=lambda r: (r["fraction"], r["decisions"]))
        _emit({"n_src": n_src, "n_tgt": n_tgt, "paths": len(rows), "rows": rows}, args.out_dir, "profile.json")
        return 0
    d = Decisions.all_keep(mc.D) if spec == "all-keep" else Decisions.from_text(spec, mc.D)
    space = DecisionSpace.build(cfg.decision_space, mc.L_enc, mc.L_dec)
    k, a = space.force(np.asarray([d.keep]), np.asarray([d.strategy]))
    forced = Decisions(tuple(bool(b) for b in k[0]), int(a[0]))
    _emit({"n_src": n_src, "n_tgt": n_tgt, **row(forced)}, args.out_dir, "profile.json")
    return 0


def cmd_oracle(args) -> int:
    cfg = _load(args)
    if cfg.model.D > MAX_ORACLE_D:
        raise CapacityError(f"oracle: model has D={cfg.model.D} keep bits, the enumeration limit is {MAX_ORACLE_D}")
    sizes = tuple(int(s) for s in args.samples.split(",")) if args.samples else DEFAULT_SAMPLE_SIZES
    model, policy, src, tgt = tiny_setup(cfg.seed, model_config=cfg.model, task=cfg.task)
    report = run_oracle(model, policy, src, tgt, lam=args.lam, sample_sizes=sizes, seed=cfg.seed)
    report["example"] = {"src": src, "tgt": tgt}
    _emit(report, Path(cfg.out_dir) if cfg.out_dir else None, "oracle.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", type=Path, default=None, help="run / report directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dynapath", description="Input-dependent layer and token skipping for a numpy transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="joint training run")
    t.add_argument("config", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint with argmax decisions")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--task", choices=TASK_KINDS, default=None)
    e.add_argument("--n-min", type=int, default=None)
    e.add_argument("--n-max", type=int, default=None)
    e.add_argument("--k", type=int, default=None)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--size", type=int, default=256)
    e.add_argument("--decisions", choices=("greedy", "all-keep"), default="greedy")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", parents=[common], help="FLOPs of one path or of every path")
    f.add_argument("config", type=Path)
    f.add_argument("--decisions", required=True, help="'<bits>|<strategy>', 'all-keep' or 'enumerate'")
    f.add_argument("--n-src", type=int, default=None)
    f.add_argument("--n-tgt", type=int, default=None, help="decoder positions (target length + 1)")
    f.add_argument("--verify", action="store_true", help="cross-check against the instrumented matmul counter")
    f.set_defaults(func=cmd_profile)

    o = sub.add_parser("oracle", parents=[common], help="exact enumeration vs Monte Carlo estimators")
    o.add_argument("config", type=Path)
    o.add_argument("--lam", type=float, default=0.5, help="reward weight on FLOPs savings")
    o.add_argument("--samples", default=None, help="comma-separated Monte Carlo sample sizes")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CapacityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
