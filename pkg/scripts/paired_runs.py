"""Dual students vs the forward-difference baseline on the same seeds.

    python scripts/paired_runs.py --seeds 0-4 --out runs/paired [--label-mode hard] [--config f]

Each seed gets runs/paired/<mode>/ds_<seed> and fd_<seed>. Existing run
directories are reused, so the table can be rebuilt without training.
"""
import argparse
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from dualstudent.config import RunSpec, load_config
from dualstudent.paired import format_table, paired_row
from dualstudent.runner import run


def seeds_arg(text):
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def one(job):
    spec, out = job
    if (Path(out) / "summary.json").exists():
        return out, 0
    return out, run(dataclasses.replace(spec, output_dir=str(out)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seeds_arg, default=list(range(5)))
    ap.add_argument("--out", default="runs/paired")
    ap.add_argument("--config")
    ap.add_argument("--label-mode", default="soft", choices=["soft", "hard"])
    ap.add_argument("--fd-loss", default=None, help="hard labels: ce or multi_margin for the baseline")
    ap.add_argument("--threshold", type=float, default=0.75)
    ap.add_argument("--workers", type=int, default=5)
    args = ap.parse_args()

    base = load_config(args.config) if args.config else RunSpec()
    base.task = "extract"
    root = Path(args.out) / args.label_mode
    jobs = []
    for seed in args.seeds:
        ds = dataclasses.replace(base, seed=seed, extraction=dataclasses.replace(
            base.extraction, method="dual_students", label_mode=args.label_mode))
        fd_ext = dataclasses.replace(base.extraction, method="dfme_fd", label_mode=args.label_mode)
        if args.label_mode == "hard":
            loss = args.fd_loss or "multi_margin"
            fd_ext = dataclasses.replace(fd_ext, student_loss=loss, generator_loss=loss)
        fd = dataclasses.replace(base, seed=seed, extraction=fd_ext)
        jobs += [(ds, root / f"ds_{seed}"), (fd, root / f"fd_{seed}")]

    with ProcessPoolExecutor(args.workers) as pool:
        for out, code in pool.map(one, jobs):
            if code:
                print(f"failed: {out}")

    rows = [paired_row(root / f"ds_{s}", root / f"fd_{s}", args.threshold) for s in args.seeds]
    print(format_table(rows))
    n = len(rows)
    print(f"ds final agreement higher: {sum(r.a_wins_final for r in rows)}/{n}")
    print(f"ds reaches {args.threshold} no later: {sum(r.a_not_slower for r in rows)}/{n}")
    print(f"ds pair fidelity at midpoint better than fd: "
          f"{sum(r.a_mid_fidelity < r.b_mid_fidelity for r in rows)}/{n}")


if __name__ == "__main__":
    main()
