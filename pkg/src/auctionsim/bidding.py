"""Multiplier-based bidding and the per-group best-response solver.

A bidder's bid on a query is multiplier * value * tcpa.  With one
multiplier per bidder ("level 0") the multiplier follows a multiplicative
value/spend update.  At level l >= 1 the bidder holds one multiplier per
level-l query group and best-responds each round by sweeping a multiplier
grid per group, taking lower convex hulls of the resulting (value, spend)
points, and greedily advancing the cheapest marginal group while total
value still covers total spend.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import auction
from .datagen import Dataset


@dataclass
class BidProfile:
    """Per-bidder, per-group multipliers at a fixed hierarchy level.

    ``kappas`` has shape [n_advertisers, groups(level)]; level 0 means one
    column.
    """

    level: int
    kappas: np.ndarray

    def copy(self) -> "BidProfile":
        return BidProfile(self.level, self.kappas.copy())


@dataclass(frozen=True)
class PartitionCurve:
    """Swept (value, spend) points for one query group, anchor first.

    ``kappas[0]`` is 0.0, marking the stay-out anchor at (0, 0); the
    remaining entries are the grid multipliers in ascending order.
    """

    partition: int
    kappas: tuple[float, ...]
    values: tuple[float, ...]
    spends: tuple[float, ...]


def bid_of(kappa: float, value: float, tau: float) -> float:
    """Per-impression bid kappa * value / tau."""
    return kappa * value / tau


RATIO_MIN = 0.125
RATIO_MAX = 8.0
GROWTH_FACTOR = 3.0


def uniform_update(kappa, value, spend, eta, ratio_min: float = RATIO_MIN,
                   ratio_max: float = RATIO_MAX, growth_factor: float = GROWTH_FACTOR):
    """One multiplicative step kappa * (value/spend)^eta.

    The ratio is clamped to [ratio_min, ratio_max] per step; a bidder that
    neither earned nor spent probes upward by ``growth_factor``.  The
    update is stationary exactly when value == spend.  Accepts scalars or
    aligned arrays.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise ValueError("multipliers must stay positive")
    value = np.asarray(value, dtype=np.float64)
    spend = np.asarray(spend, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(spend > 0, value / np.where(spend > 0, spend, 1.0), ratio_max)
    ratio = np.clip(ratio, ratio_min, ratio_max)
    idle = (spend == 0) & (value == 0)
    out = np.where(idle, kappa * growth_factor, kappa * ratio ** eta)
    return float(out) if out.ndim == 0 else out


def default_grid(points: int = 33, lo: float = 2.0 ** -5, hi: float = 2.0 ** 5) -> np.ndarray:
    """Log-uniform multiplier grid; hits 1.0 exactly for odd point counts."""
    return 2.0 ** np.linspace(math.log2(lo), math.log2(hi), points)


def evaluate_partition_curve(bidder: int, level: int, partition: int,
                             grid: np.ndarray, dataset: Dataset,
                             bids: np.ndarray, mechanism: str,
                             gsp_next: str = "ranked") -> PartitionCurve:
    """Sweep the bidder's multiplier over one query group, others frozen.

    For each grid multiplier, re-bids only this bidder's candidacies on
    queries in the group and re-runs those auctions; accumulates the
    bidder's value (tcpa-scaled) and payment.  The (0, 0) stay-out anchor
    is prepended.  Reference implementation; the engine's vectorized
    kernel must match it.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and (np.any(np.diff(grid) <= 0) or grid[0] <= 0):
        raise ValueError("grid must be strictly increasing and positive")
    cells = dataset.family.cell_of_queries(level)
    tcpa = dataset.tcpa[bidder]
    entries = []  # (instance, my position, frozen bid row)
    for j in np.flatnonzero(cells == partition):
        inst = dataset.instances[j]
        mine = [p for p, c in enumerate(inst.candidates) if c[0] == bidder]
        if mine:
            row = list(bids[j, np.flatnonzero(dataset.cand_mask[j])])
            entries.append((inst, mine[0], row))
    if not entries:
        return PartitionCurve(partition, (0.0,), (0.0,), (0.0,))

    values, spends = [0.0], [0.0]
    for kappa in grid:
        val = spend = 0.0
        for inst, my, row in entries:
            row_bids = list(row)
            row_bids[my] = kappa * inst.candidates[my][1] * tcpa
            out = auction.run_auction(mechanism, inst, row_bids, gsp_next=gsp_next)
            val += tcpa * inst.candidates[my][1] * out.allocation[my]
            spend += out.payment[my]
        values.append(val)
        spends.append(spend)
    kappas = (0.0,) + tuple(float(k) for k in grid)
    return PartitionCurve(partition, kappas, tuple(values), tuple(spends))


def lower_convex_hull(points):
    """Lower hull of (x, y [, payload]) points, ascending in x.

    Duplicate x keeps the lowest y; collinear interior points are dropped,
    so consecutive hull slopes strictly increase.  Payload (e.g. the
    multiplier that produced a point) rides along untouched.
    """
    if not points:
        raise ValueError("need at least one point")
    pts = sorted(points, key=lambda p: (p[0], p[1]))
    dedup = []
    for p in pts:
        if dedup and dedup[-1][0] == p[0]:
            continue  # same x: the sort already put the lowest y first
        dedup.append(p)
    hull = []
    for p in dedup:
        while len(hull) >= 2:
            (x0, y0), (x1, y1) = hull[-2][:2], hull[-1][:2]
            if (x1 - x0) * (p[1] - y0) - (y1 - y0) * (p[0] - x0) <= 0.0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def _greedy_walk(hulls):
    """Greedy frontier advance; returns (indices, surplus, blocked partition).

    ``blocked`` is the partition whose next advance first violated the
    constraint, or None if every frontier reached its hull end while
    feasible.  ``surplus`` is total value minus total spend at the
    returned frontier.
    """
    def slope(h, i):
        (x0, y0), (x1, y1) = h[i][:2], h[i + 1][:2]
        return (y1 - y0) / (x1 - x0)

    idx = [0] * len(hulls)
    total_v = sum(h[0][0] for h in hulls)
    total_s = sum(h[0][1] for h in hulls)
    heap = [(slope(h, 0), d) for d, h in enumerate(hulls) if len(h) > 1]
    heapq.heapify(heap)
    best = None
    best_surplus = 0.0
    while total_v >= total_s:
        best = list(idx)
        best_surplus = total_v - total_s
        if not heap:
            return best, best_surplus, None
        _, d = heapq.heappop(heap)
        i = idx[d] = idx[d] + 1
        h = hulls[d]
        total_v += h[i][0] - h[i - 1][0]
        total_s += h[i][1] - h[i - 1][1]
        if i + 1 < len(h):
            heapq.heappush(heap, (slope(h, i), d))
    if best is None:
        raise ValueError("initial frontier is infeasible; hulls must include their anchors")
    return best, best_surplus, d


def greedy_select(hulls):
    """Pick one vertex per hull, maximizing value subject to value >= spend.

    Every hull must start at its feasible anchor.  Frontiers advance one
    hull vertex at a time in ascending slope order (ties by hull index);
    the last frontier whose total satisfies value >= spend is returned as
    a list of vertex indices.
    """
    return _greedy_walk(hulls)[0]


UNIFORM_PREFERENCE_TOLERANCE = 1e-3


def _log_interp(lo: float, hi: float, frac: float) -> float:
    return math.exp((1.0 - frac) * math.log(lo) + frac * math.log(hi))


def select_multipliers(curves: list[PartitionCurve], grid: np.ndarray,
                       current: np.ndarray, eta: float,
                       damping: bool = True,
                       uniform_tolerance: float = UNIFORM_PREFERENCE_TOLERANCE,
                       fractional: bool = True) -> np.ndarray:
    """Pick new multipliers from per-group curves, then damp the update.

    Two candidate solutions are compared: the hull + greedy per-group
    selection and the best single multiplier applied to every group (the
    largest grid value whose summed curve point still satisfies
    value >= spend).  The uniform candidate wins unless the per-group one
    improves total value by more than ``uniform_tolerance`` (relative), so
    outcome-irrelevant multiplier dispersion is avoided; in truthful
    auctions this keeps profiles exactly uniform.

    With ``fractional`` (default), the winning candidate takes one partial
    step past its last feasible point, log-interpolated toward the first
    violating point by the remaining-surplus fraction.  This removes the
    systematic feasible-side bias of stopping on grid vertices, which
    otherwise leaves every bidder a grid-step short of binding.

    Groups without a curve (no candidacies) keep their current multiplier;
    a selected stay-out anchor maps to the smallest grid multiplier.  With
    damping, log kappa moves an eta-fraction toward the selected value.
    """
    kappa_next = current.astype(np.float64).copy()
    hulls = []
    slots = []
    swept = []
    for curve in curves:
        pts = list(zip(curve.values, curve.spends, curve.kappas))
        if len(pts) <= 1:
            continue
        hulls.append(lower_convex_hull(pts))
        slots.append(curve.partition)
        swept.append(curve)
    if not hulls:
        return kappa_next

    chosen, surplus, blocked = _greedy_walk(hulls)
    greedy_value = sum(h[i][0] for h, i in zip(hulls, chosen))
    selected = {d: max(h[i][2], float(grid[0]))
                for d, h, i in zip(slots, hulls, chosen)}
    if fractional and blocked is not None and surplus > 0:
        h = hulls[blocked]
        i = chosen[blocked]
        edge_deficit = (h[i + 1][1] - h[i][1]) - (h[i + 1][0] - h[i][0])
        frac = min(surplus / edge_deficit, 1.0)
        lo = max(h[i][2], float(grid[0]))
        hi = max(h[i + 1][2], float(grid[0]))
        selected[slots[blocked]] = _log_interp(lo, hi, frac)
        greedy_value += frac * (h[i + 1][0] - h[i][0])

    if uniform_tolerance > 0 and all(len(c.values) == len(grid) + 1 for c in swept):
        tot_v = np.sum([c.values[1:] for c in swept], axis=0)
        tot_s = np.sum([c.spends[1:] for c in swept], axis=0)
        feasible = np.flatnonzero(tot_v >= tot_s)
        if feasible.size:
            g = int(feasible[-1])
            kappa_u = float(grid[g])
            uniform_value = float(tot_v[g])
            if fractional and g + 1 < len(grid):
                deficit = tot_s[g + 1] - tot_v[g + 1]
                if deficit > 0:
                    frac = (tot_v[g] - tot_s[g]) / (tot_v[g] - tot_s[g] + deficit)
                    frac = min(frac, 1.0)
                    kappa_u = _log_interp(float(grid[g]), float(grid[g + 1]), frac)
                    # chord estimate of the value reached by the partial step
                    uniform_value += frac * float(tot_v[g + 1] - tot_v[g])
            if uniform_value >= greedy_value * (1.0 - uniform_tolerance):
                selected = {d: kappa_u for d in slots}

    for d, kappa_star in selected.items():
        if damping:
            kappa_next[d] = math.exp((1.0 - eta) * math.log(current[d])
                                     + eta * math.log(kappa_star))
        else:
            kappa_next[d] = kappa_star
    return kappa_next


def best_response(bidder: int, level: int, dataset: Dataset, bids: np.ndarray,
                  grid: np.ndarray, eta: float, mechanism: str,
                  current: np.ndarray, damping: bool = True,
                  gsp_next: str = "ranked",
                  uniform_tolerance: float = UNIFORM_PREFERENCE_TOLERANCE,
                  fractional: bool = True) -> np.ndarray:
    """New multipliers for one bidder at the given level, opponents frozen.

    Reference composition of curve sweep, hulls, and greedy selection.
    """
    if level > dataset.family.num_layers:
        raise ValueError("level exceeds hierarchy depth")
    groups = dataset.family.sets_per_layer(level)
    if current.shape != (groups,):
        raise ValueError("current multipliers must have one entry per group")
    # Groups where the bidder never appears come back as the bare anchor
    # and are skipped by select_multipliers, keeping their multiplier.
    curves = [
        evaluate_partition_curve(bidder, level, d, grid, dataset, bids,
                                 mechanism, gsp_next=gsp_next)
        for d in range(groups)
    ]
    return select_multipliers(curves, grid, current, eta, damping=damping,
                              uniform_tolerance=uniform_tolerance,
                              fractional=fractional)
