"""Forward-difference baseline on hard labels: multi-margin vs cross-entropy.

    python scripts/hard_label_losses.py --seeds 0-4 [--lr 0.05,0.1] [--out runs/hardloss]

Both the student and generator losses are switched together. Prints final
ensemble agreement per seed and learning rate.
"""
import argparse
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from dualstudent.config import RunSpec
from dualstudent.runner import read_metrics, run


def one(job):
    seed, loss, lr, out = job
    if not (out / "metrics.csv").exists():
        spec = RunSpec(task="extract", seed=seed, output_dir=str(out))
        spec.extraction = dataclasses.replace(spec.extraction, method="dfme_fd", label_mode="hard",
                                              student_loss=loss, generator_loss=loss, lr_student=lr)
        run(spec)
    return seed, loss, lr, read_metrics(out / "metrics.csv")[-1].agreement_ensemble


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0-4")
    ap.add_argument("--lr", default="0.05")
    ap.add_argument("--out", default="runs/hardloss")
    ap.add_argument("--workers", type=int, default=5)
    args = ap.parse_args()
    lo, _, hi = args.seeds.partition("-")
    seeds = range(int(lo), int(hi or lo) + 1)
    lrs = [float(v) for v in args.lr.split(",")]
    jobs = [(s, loss, lr, Path(args.out) / f"{loss}_lr{lr}_{s}")
            for lr in lrs for s in seeds for loss in ("multi_margin", "ce")]
    with ProcessPoolExecutor(args.workers) as pool:
        res = list(pool.map(one, jobs))
    final = {(s, loss, lr): a for s, loss, lr, a in res}
    for lr in lrs:
        wins = 0
        print(f"lr {lr}")
        for s in seeds:
            mm, ce = final[s, "multi_margin", lr], final[s, "ce", lr]
            wins += mm >= ce
            print(f"  seed {s}: multi_margin {mm:.4f}  ce {ce:.4f}")
        print(f"  multi_margin >= ce: {wins}/{len(seeds)}")


if __name__ == "__main__":
    main()
