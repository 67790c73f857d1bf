"""Side-by-side comparison of two extraction runs that share a seed and budget.

Everything here reads finished run directories, so tables can be rebuilt
without re-running anything.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .evaluation import MetricsRow, queries_to_accuracy
from .runner import read_json, read_metrics


def mid_row(rows: list[MetricsRow]) -> MetricsRow:
    """First evaluation point at or past half the queries of the last one."""
    half = rows[-1].queries / 2
    return next(r for r in rows if r.queries >= half)


@dataclass
class PairedRow:
    seed: int
    a_final: float
    b_final: float
    a_queries: Optional[int]  # to the threshold; None if never reached
    b_queries: Optional[int]
    a_mid_fidelity: float  # the run's own surrogate at the midpoint
    b_mid_fidelity: float
    a_tv: float
    b_tv: float

    @property
    def a_wins_final(self) -> bool:
        return self.a_final > self.b_final

    @property
    def a_not_slower(self) -> bool:
        if self.a_queries is None:
            return False
        return self.b_queries is None or self.a_queries <= self.b_queries


def _own_fidelity(row: MetricsRow) -> float:
    # two-student runs report their pair estimate, single-student runs only have FD
    return row.grad_fidelity_ds if not math.isnan(row.grad_fidelity_ds) else row.grad_fidelity_fd


def paired_row(a_dir, b_dir, threshold: float = 0.75) -> PairedRow:
    a, b = read_metrics(Path(a_dir) / "metrics.csv"), read_metrics(Path(b_dir) / "metrics.csv")
    seed_a = read_json(Path(a_dir) / "summary.json")["seed"]
    seed_b = read_json(Path(b_dir) / "summary.json")["seed"]
    if seed_a != seed_b:
        raise ValueError(f"runs are not paired: seeds {seed_a} and {seed_b}")
    (_, qa), = queries_to_accuracy(a, [threshold])
    (_, qb), = queries_to_accuracy(b, [threshold])
    return PairedRow(seed_a, a[-1].agreement_ensemble, b[-1].agreement_ensemble, qa, qb,
                     _own_fidelity(mid_row(a)), _own_fidelity(mid_row(b)),
                     a[-1].tv_from_uniform, b[-1].tv_from_uniform)


def format_table(rows: list[PairedRow], a: str = "ds", b: str = "fd") -> str:
    head = (f"{'seed':>4} {a + '_final':>10} {b + '_final':>10} {a + '_q75':>9} {b + '_q75':>9} "
            f"{a + '_tv':>7} {b + '_tv':>7}")
    lines = [head]
    for r in rows:
        qa = "-" if r.a_queries is None else str(r.a_queries)
        qb = "-" if r.b_queries is None else str(r.b_queries)
        lines.append(f"{r.seed:>4} {r.a_final:>10.4f} {r.b_final:>10.4f} {qa:>9} {qb:>9} "
                     f"{r.a_tv:>7.4f} {r.b_tv:>7.4f}")
    return "\n".join(lines)
