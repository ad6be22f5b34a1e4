"""Welfare, profit, convergence, and dispersion metrics plus run aggregation.

Welfare is total tcpa-scaled value minus user cost; profit is total spend
minus user cost.  RelativeMargin measures aggregate ROI-constraint
slackness.  Strength measures how far a bidder's per-group multipliers
spread around their geometric mean; it is zero under uniform scaling.
Across runs, metrics are compared to a benchmark cell on the same seeds
and reported as mean paired deltas with normal 95% confidence intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z95 = 1.96


@dataclass(frozen=True)
class BidderLedger:
    """Per-bidder value (tcpa-scaled), spend, and allocated user cost."""

    value: np.ndarray
    spend: np.ndarray
    cost: np.ndarray


@dataclass(frozen=True)
class MetricRow:
    """One iteration's metrics for one (mechanism, reserve, level) cell."""

    mechanism: str
    reserve: bool
    level: int
    iteration: int  # 1-based
    profit: float
    welfare: float
    bid_multiplier: float
    strength: float
    relative_margin: float
    roi: float


@dataclass(frozen=True)
class AggregateRow:
    """Across-run summary of one cell against the benchmark cell."""

    mechanism: str
    reserve: bool
    level: int
    profit_delta: float
    profit_ci: tuple[float, float]
    welfare_delta: float
    welfare_ci: tuple[float, float]
    bidmul_mean: float
    bidmul_ci: tuple[float, float]
    strength_mean: float
    strength_ci: tuple[float, float]


def welfare(ledger: BidderLedger) -> float:
    return float(np.sum(ledger.value) - np.sum(ledger.cost))


def profit(ledger: BidderLedger) -> float:
    return float(np.sum(ledger.spend) - np.sum(ledger.cost))


def relative_margin(ledger: BidderLedger) -> float:
    """Sum of |value - spend| over bidders, normalized by total spend.

    Zero exactly when every bidder's constraint is tight.  All-zero
    ledgers define the margin as 0; zero spend against nonzero value has
    no sensible normalization and raises.
    """
    total_spend = float(np.sum(ledger.spend))
    if total_spend <= 0:
        if np.all(ledger.value == 0):
            return 0.0
        raise ValueError("relative margin undefined: zero total spend with nonzero value")
    return float(np.sum(np.abs(ledger.value - ledger.spend)) / total_spend)


def roi(ledger: BidderLedger) -> float:
    """Spend-weighted aggregate ROI, total value over total spend."""
    total_spend = float(np.sum(ledger.spend))
    if total_spend <= 0:
        if np.all(ledger.value == 0):
            return 1.0
        raise ValueError("roi undefined: zero total spend with nonzero value")
    return float(np.sum(ledger.value) / total_spend)


def strength(kappas: np.ndarray, participates: np.ndarray, spend: np.ndarray) -> float:
    """Spend-weighted mean absolute log-deviation of multipliers.

    ``kappas`` is [n_bidders, n_groups]; ``participates`` masks the groups
    where a bidder actually had candidacies.  Per bidder the center is the
    geometric mean over participated groups, so the metric is invariant to
    globally rescaling one bidder's multipliers.
    """
    kappas = np.atleast_2d(np.asarray(kappas, dtype=np.float64))
    if np.any(kappas[participates] <= 0):
        raise ValueError("multipliers must be positive")
    logs = np.where(participates, np.log(kappas, where=kappas > 0,
                                         out=np.zeros_like(kappas)), 0.0)
    counts = participates.sum(axis=1)
    active = counts > 0
    centers = np.zeros(kappas.shape[0])
    centers[active] = logs[active].sum(axis=1) / counts[active]
    dev = np.where(participates, np.abs(logs - centers[:, None]), 0.0)
    per_bidder = np.zeros(kappas.shape[0])
    per_bidder[active] = dev[active].sum(axis=1) / counts[active]
    weights = np.where(active, spend, 0.0)
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float(np.sum(per_bidder * weights) / total)


def average_multiplier(kappas: np.ndarray, participates: np.ndarray,
                       spend: np.ndarray) -> float:
    """Spend-weighted mean of per-bidder geometric-mean multipliers."""
    kappas = np.atleast_2d(np.asarray(kappas, dtype=np.float64))
    logs = np.where(participates, np.log(kappas, where=kappas > 0,
                                         out=np.zeros_like(kappas)), 0.0)
    counts = participates.sum(axis=1)
    active = counts > 0
    geo = np.ones(kappas.shape[0])
    geo[active] = np.exp(logs[active].sum(axis=1) / counts[active])
    weights = np.where(active, spend, 0.0)
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float(np.sum(geo * weights) / total)


def _mean_ci(xs: np.ndarray) -> tuple[float, tuple[float, float]]:
    mean = float(np.mean(xs))
    if xs.size < 2:
        return mean, (mean, mean)
    stderr = float(np.std(xs, ddof=1) / math.sqrt(xs.size))
    return mean, (mean - Z95 * stderr, mean + Z95 * stderr)


def aggregate(rows_by_cell: dict[tuple[str, bool, int], list[MetricRow]],
              benchmark: tuple[str, bool, int]) -> list[AggregateRow]:
    """Across-run table of paired deltas against the benchmark cell.

    ``rows_by_cell`` maps (mechanism, reserve, level) to one final-
    iteration MetricRow per run, aligned by run index across cells.
    Profit and welfare become relative deltas (metric - benchmark) /
    benchmark per run; bid multiplier and strength stay raw.
    """
    if benchmark not in rows_by_cell:
        raise ValueError(f"benchmark cell {benchmark} missing from results")
    bench_rows = rows_by_cell[benchmark]
    if len(bench_rows) < 2:
        raise ValueError("need at least two runs to aggregate")
    bench_profit = np.array([r.profit for r in bench_rows])
    bench_welfare = np.array([r.welfare for r in bench_rows])
    if np.any(bench_profit == 0) or np.any(bench_welfare == 0):
        raise ValueError("benchmark has a zero metric; relative deltas undefined")

    out = []
    for cell, rows in rows_by_cell.items():
        if len(rows) != len(bench_rows):
            raise ValueError(f"cell {cell} has {len(rows)} runs, benchmark has {len(bench_rows)}")
        p_delta = (np.array([r.profit for r in rows]) - bench_profit) / bench_profit
        w_delta = (np.array([r.welfare for r in rows]) - bench_welfare) / bench_welfare
        pd, pci = _mean_ci(p_delta)
        wd, wci = _mean_ci(w_delta)
        bm, bmci = _mean_ci(np.array([r.bid_multiplier for r in rows]))
        st, stci = _mean_ci(np.array([r.strength for r in rows]))
        out.append(AggregateRow(cell[0], cell[1], cell[2], pd, pci, wd, wci,
                                bm, bmci, st, stci))
    return out
