"""Untargeted PGD fooling rate against epsilon for every proxy source.

    python scripts/epsilon_sweep.py --seed 0 --out runs/eps [--config f] [--eps 0.005,0.01,...] [--kinds pgd,fgsm]

Runs one attack task (which trains the DS and FD extractions unless
--ds-run/--fd-run point at finished ones) and prints the fooling table as
proxy x epsilon.
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

from dualstudent.config import RunSpec, load_config
from dualstudent.runner import run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/eps")
    ap.add_argument("--eps", default="0.005,0.01,0.02,0.04,0.08,0.125")
    ap.add_argument("--kinds", default="pgd")
    ap.add_argument("--config")
    ap.add_argument("--ds-run")
    ap.add_argument("--fd-run")
    args = ap.parse_args()

    spec = load_config(args.config) if args.config else RunSpec()
    spec.task, spec.seed, spec.output_dir = "attack_eval", args.seed, args.out
    spec.attack.epsilons = tuple(float(e) for e in args.eps.split(","))
    spec.attack.kinds = tuple(args.kinds.split(","))
    spec.attack.ds_run, spec.attack.fd_run = args.ds_run, args.fd_run
    if run(spec):
        raise SystemExit(f"attack run failed, see {args.out}/report.txt")

    table = defaultdict(dict)
    with open(Path(args.out) / "fooling.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            table[(r["proxy"], r["attack"])][float(r["epsilon"])] = float(r["success_rate"])
    eps = sorted(spec.attack.epsilons)
    print(f"{'proxy':<16} {'attack':<18}" + "".join(f"{e:>9.3f}" for e in eps))
    for (proxy, attack), rates in sorted(table.items()):
        print(f"{proxy:<16} {attack:<18}" + "".join(f"{rates.get(e, float('nan')):>9.4f}" for e in eps))


if __name__ == "__main__":
    main()
