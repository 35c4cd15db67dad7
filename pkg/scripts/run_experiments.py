"""Run every simulated scenario and print its report.

    python scripts/run_experiments.py --seeds 0 1 2
"""

import argparse
import sys

from rawhdr.sim_bench import EXPERIMENTS, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--names", nargs="*", default=sorted(EXPERIMENTS), choices=sorted(EXPERIMENTS))
    parser.add_argument("--seeds", nargs="*", type=int, default=[0])
    args = parser.parse_args()

    failed = []
    for name in args.names:
        for seed in args.seeds:
            rep = run_experiment(name, seed)
            print(rep.text(), end="\n\n", flush=True)
            if not rep.passed:
                failed.append(f"{name}@{seed}")
    print("failed: " + (", ".join(failed) if failed else "none"))
    return 3 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
