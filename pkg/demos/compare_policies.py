"""Train lexico, random, fixed-lambda and all-keep variants from one warmed backbone and tabulate them.

    python3 demos/compare_policies.py --task prefix-extract --seed 0
    python3 demos/compare_policies.py --quick          # a few seconds, numbers are meaningless
"""

import argparse

from dynapath.experiments import TASKS, Study, StudySettings

VARIANTS = ["lexico", "random", "fixed:0.2", "fixed:1.0", "fixed:1.5", "none"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=sorted(TASKS), default="prefix-extract")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="tiny step budget for a smoke run")
    args = ap.parse_args()
    settings = StudySettings(warmup_steps=30, post_steps=20, test_size=64) if args.quick else StudySettings()

    study = Study(TASKS[args.task], args.seed, settings)
    print(f"warm-up: {settings.warmup_steps} all-keep steps in {study.warmup_seconds:.0f}s")
    print(f"{'variant':<11} {'fraction':>8} {'loss':>8} {'acc':>7} {'c':>7} {'att%':>6} {'ffn%':>6} {'tok%':>6}")
    for name in VARIANTS:
        r = study.run(name)
        c = f"{r.c:.4f}" if r.c is not None else "-"
        s = r.skip
        print(f"{name:<11} {r.fraction:8.4f} {r.loss:8.4f} {r.token_accuracy:7.4f} {c:>7} {s['att']:6.1f} {s['ffn']:6.1f} {s['token']:6.1f}")


if __name__ == "__main__":
    main()
