"""Compare Monte Carlo reward and policy-gradient estimates with exact enumeration over all 448 paths.

    python3 demos/oracle_agreement.py --seed 0 --lam 0.5
"""

import argparse

from dynapath.oracle import run_oracle, tiny_setup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam", type=float, default=0.5)
    args = ap.parse_args()
    model, policy, src, tgt = tiny_setup(seed=args.seed)
    rep = run_oracle(model, policy, src, tgt, lam=args.lam, seed=args.seed)
    ex = rep["exact"]
    print(f"source {src} -> target {tgt}; {rep['paths']} paths, probability mass {rep['probability_mass']:.12f}")
    print(f"exact: E[R] {ex['reward']:.5f}  E[loss] {ex['loss']:.5f}  E[fraction] {ex['fraction']:.5f}")
    print(f"{'samples':>8} {'E[R] est':>9} {'z':>6} {'cos q':>7} {'cos c':>7} {'cos R':>7}")
    for r in rep["monte_carlo"]:
        print(
            f"{r['samples']:>8} {r['reward_mean']:9.5f} {r['reward_z']:6.2f}"
            f" {r['cos_quality']:7.4f} {r['cos_comp']:7.4f} {r['cos_reward']:7.4f}"
        )


if __name__ == "__main__":
    main()
