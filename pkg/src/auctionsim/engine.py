"""Run orchestration: rounds, runs, and experiment grids.

A run draws a dataset, then iterates a fixed number of bidding rounds.
Each round evaluates every auction at the current multipliers, records
metrics, and updates multipliers (multiplicative rule at level 0, grid
sweep + hull + greedy selection at deeper levels).  An experiment executes
a (mechanism, reserve, level) grid over shared per-run seeds so each run's
dataset is identical across cells, then aggregates paired deltas against a
benchmark cell.  Everything is a pure function of (config, seed); worker
count never changes results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import bidding, metrics
from .datagen import Dataset, build_dataset
from .kernels import PackedSim, ledger_of
from .streams import run_seed_for

MECHANISMS = ("fpa", "gsp", "vcg")

Cell = tuple[str, bool, int]  # (mechanism, reserve, level)


@dataclass(frozen=True)
class SimulationConfig:
    """Full configuration of a run or experiment; flat and serializable."""

    n_advertisers: int = 50
    n_queries: int = 20_000
    n_slots: int = 4
    n_retrieval: int = 20
    runs: int = 20
    iterations: int = 25
    mechanism: str = "gsp"
    reserve: bool = False
    level: int = 0
    grid_points: int = 25
    grid_lo: float = 2.0 ** -3
    grid_hi: float = 2.0 ** 7
    eta_offset: float = 1.0
    eta_floor: float = 0.45
    ratio_min: float = 0.125
    ratio_max: float = 8.0
    growth_factor: float = 3.0
    damping: bool = True
    uniform_tie_tolerance: float = 1e-3
    fractional_selection: bool = True
    update_mode: str = "simultaneous"
    branching: tuple[int, ...] = (4, 4, 4)
    feature_dim: int = 8
    layer_dims: tuple[int, ...] = (2, 2, 2)
    diag_range: tuple[float, float] = (2.0, 6.0)
    noise_level_range: tuple[float, float] = (0.0, 0.3)
    mean_variance: float = 0.1
    sigma_eps_range: tuple[float, float] = (0.2, 0.6)
    alpha_range: tuple[float, float] = (2.5, 3.0)
    x_min: float = 1.0
    mu_cost_range: tuple[float, float] = (-2.5, -1.5)
    sigma_cost_range: tuple[float, float] = (0.3, 0.8)
    decay_bounds: tuple[float, float] = (0.3, 0.7)
    retrieval_threshold: float = 0.0
    reserve_gamma: float = 0.5
    reserve_sigma: float = 0.5
    value_noise_mode: str = "per_query"
    gsp_next: str = "ranked"
    seed: int = 0
    threads: int = 1
    experiment_mechanisms: tuple[str, ...] = ("fpa", "gsp", "vcg")
    experiment_levels: tuple[int, ...] = (0, 1, 2, 3)
    experiment_reserves: tuple[bool, ...] = (False,)
    benchmark_mechanism: str = "gsp"
    benchmark_reserve: bool = False
    benchmark_level: int = 0

    def __post_init__(self):
        for name in ("n_advertisers", "n_queries", "n_slots", "n_retrieval",
                     "runs", "iterations", "grid_points", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        depth = len(self.branching)
        for lvl in (self.level, self.benchmark_level, *self.experiment_levels):
            if not 0 <= lvl <= depth:
                raise ValueError(
                    f"level {lvl} exceeds hierarchy depth {depth} implied by branching")
        for mech in (self.mechanism, self.benchmark_mechanism, *self.experiment_mechanisms):
            if mech not in MECHANISMS:
                raise ValueError(f"unknown mechanism {mech!r}")
        if len(self.layer_dims) != depth:
            raise ValueError("layer_dims must match branching length")
        if sum(self.layer_dims) >= self.feature_dim:
            raise ValueError("layer_dims must sum to less than feature_dim")
        if self.grid_points < 2 or not 0 < self.grid_lo < self.grid_hi:
            raise ValueError("grid must have >= 2 points and 0 < lo < hi")
        if not 0 < self.eta_floor <= 1:
            raise ValueError("eta_floor must be in (0, 1]")
        if self.uniform_tie_tolerance < 0:
            raise ValueError("uniform_tie_tolerance must be non-negative")
        if self.update_mode not in ("simultaneous", "sequential"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.value_noise_mode not in ("per_query", "per_candidate"):
            raise ValueError(f"unknown value_noise_mode {self.value_noise_mode!r}")
        if self.gsp_next not in ("ranked", "slot_only"):
            raise ValueError(f"unknown gsp_next {self.gsp_next!r}")

    def grid(self) -> np.ndarray:
        return bidding.default_grid(self.grid_points, self.grid_lo, self.grid_hi)

    def eta(self, t: int) -> float:
        """Step size of the multiplicative multiplier rule; floored so late
        arrivals keep moving."""
        return max(1.0 / math.sqrt(t + self.eta_offset), self.eta_floor)

    def damping_eta(self, t: int) -> float:
        """Damping weight for grid best responses; decays to favor settling."""
        return 1.0 / math.sqrt(t + self.eta_offset)

    def cell(self) -> Cell:
        return (self.mechanism, self.reserve, self.level)

    def benchmark_cell(self) -> Cell:
        return (self.benchmark_mechanism, self.benchmark_reserve, self.benchmark_level)

    def experiment_cells(self) -> list[Cell]:
        return [(m, r, l) for m in self.experiment_mechanisms
                for r in self.experiment_reserves for l in self.experiment_levels]


@dataclass
class SimulationState:
    """Mutable per-run state threaded through rounds."""

    config: SimulationConfig
    sim: PackedSim
    profile: bidding.BidProfile
    iteration: int = 0
    auctions_simulated: int = 0
    last_ledger: metrics.BidderLedger | None = None


@dataclass
class RunReport:
    """Everything recorded about one (run, cell) simulation."""

    cell: Cell
    trajectory: list[metrics.MetricRow]
    final_profile: bidding.BidProfile
    final_ledger: metrics.BidderLedger
    dataset_digest: str
    auctions_simulated: int

    @property
    def final_row(self) -> metrics.MetricRow:
        return self.trajectory[-1]


def _metric_row(config: SimulationConfig, state: SimulationState,
                ledger: metrics.BidderLedger, participates: np.ndarray) -> metrics.MetricRow:
    kappas = state.profile.kappas
    return metrics.MetricRow(
        mechanism=config.mechanism,
        reserve=config.reserve,
        level=config.level,
        iteration=state.iteration + 1,
        profit=metrics.profit(ledger),
        welfare=metrics.welfare(ledger),
        bid_multiplier=metrics.average_multiplier(kappas, participates, ledger.spend),
        strength=metrics.strength(kappas, participates, ledger.spend),
        relative_margin=metrics.relative_margin(ledger),
        roi=metrics.roi(ledger),
    )


def _updated_kappas(config: SimulationConfig, state: SimulationState, rp) -> np.ndarray:
    """New multipliers from one evaluated pass, all bidders at once."""
    cfg = config
    kappas = state.profile.kappas
    if cfg.level == 0:
        new = bidding.uniform_update(
            kappas[:, 0], rp.value, rp.spend, cfg.eta(state.iteration),
            ratio_min=cfg.ratio_min, ratio_max=cfg.ratio_max,
            growth_factor=cfg.growth_factor)
        return new[:, None]
    lp = state.sim.postings(cfg.level)
    gids, values, spends = state.sim.curve_pass(lp, rp, cfg.mechanism,
                                                gsp_next=cfg.gsp_next)
    state.auctions_simulated += lp.pq.shape[0] * cfg.grid_points
    grid = state.sim.grid
    eta = cfg.damping_eta(state.iteration)
    new = kappas.copy()
    n_groups = lp.n_groups
    bidder_of_group = gids // n_groups
    for i in np.unique(bidder_of_group):
        rows = np.flatnonzero(bidder_of_group == i)
        curves = [
            bidding.PartitionCurve(
                partition=int(gids[r] % n_groups),
                kappas=(0.0,) + tuple(grid),
                values=(0.0,) + tuple(values[r]),
                spends=(0.0,) + tuple(spends[r]),
            )
            for r in rows
        ]
        new[i] = bidding.select_multipliers(
            curves, grid, kappas[i], eta, damping=cfg.damping,
            uniform_tolerance=cfg.uniform_tie_tolerance,
            fractional=cfg.fractional_selection)
    return new


def run_round(state: SimulationState) -> metrics.MetricRow:
    """One bidding round: evaluate all auctions, record metrics, update.

    The recorded row reflects the multipliers used this round; the state's
    profile advances to the updated multipliers.
    """
    cfg = state.config
    sim = state.sim
    bids = sim.bids_for(state.profile.kappas, cfg.level)
    rp = sim.full_pass(bids, cfg.mechanism, gsp_next=cfg.gsp_next)
    state.auctions_simulated += sim.n_queries
    state.last_ledger = ledger_of(rp)
    row = _metric_row(cfg, state, state.last_ledger, sim.activity(rp, cfg.level))

    if cfg.update_mode == "simultaneous":
        new = _updated_kappas(cfg, state, rp)
    else:
        # Sequential: each bidder sees the updates of lower-id bidders by
        # re-running the full pass before its own update.
        new = state.profile.kappas.copy()
        for i in range(sim.n_adv):
            probe = SimulationState(cfg, sim, bidding.BidProfile(cfg.level, new),
                                    state.iteration, state.auctions_simulated)
            bids_i = sim.bids_for(new, cfg.level)
            rp_i = sim.full_pass(bids_i, cfg.mechanism, gsp_next=cfg.gsp_next)
            probe.auctions_simulated += sim.n_queries
            new_all = _updated_kappas(cfg, probe, rp_i)
            new[i] = new_all[i]
            state.auctions_simulated = probe.auctions_simulated
    state.profile = bidding.BidProfile(cfg.level, new)
    state.iteration += 1
    return row


def simulate_on_dataset(config: SimulationConfig, dataset: Dataset) -> RunReport:
    """Iterate the configured number of rounds over a prebuilt dataset."""
    sim = PackedSim(dataset, config.grid())
    n_groups = 1 if config.level == 0 else dataset.family.sets_per_layer(config.level)
    profile = bidding.BidProfile(config.level,
                                 np.ones((config.n_advertisers, n_groups)))
    state = SimulationState(config, sim, profile)
    trajectory = [run_round(state) for _ in range(config.iterations)]
    return RunReport(config.cell(), trajectory, state.profile, state.last_ledger,
                     dataset.digest(), state.auctions_simulated)


def run_simulation(config: SimulationConfig, run_seed: int) -> RunReport:
    """Generate the run's dataset and simulate one cell."""
    return simulate_on_dataset(config, build_dataset(config, run_seed))


@dataclass
class ExperimentResult:
    config: SimulationConfig
    cells: list[Cell]
    reports: dict[Cell, list[RunReport]] = field(default_factory=dict)

    def final_rows(self) -> dict[Cell, list[metrics.MetricRow]]:
        return {cell: [r.final_row for r in reps] for cell, reps in self.reports.items()}

    def aggregate(self, benchmark: Cell | None = None) -> list[metrics.AggregateRow]:
        bench = benchmark or self.config.benchmark_cell()
        rows = self.final_rows()
        table = metrics.aggregate(rows, bench)
        order = {cell: i for i, cell in enumerate(self.cells)}
        table.sort(key=lambda r: order[(r.mechanism, r.reserve, r.level)])
        return table


def _run_all_cells(args) -> list[RunReport]:
    config, run_index = args
    seed = run_seed_for(config.seed, run_index)
    reports = []
    for reserve in sorted({c[1] for c in config.experiment_cells()}):
        dataset = build_dataset(replace(config, reserve=reserve), seed)
        for mech, res, level in config.experiment_cells():
            if res != reserve:
                continue
            cell_cfg = replace(config, mechanism=mech, reserve=res, level=level)
            reports.append(simulate_on_dataset(cell_cfg, dataset))
    return reports


def run_experiment(config: SimulationConfig) -> ExperimentResult:
    """Execute the config's cell grid over shared per-run datasets.

    Runs are distributed over a process pool of ``config.threads`` workers;
    results are keyed by run index, so the outputs are byte-identical for
    any worker count.
    """
    cells = config.experiment_cells()
    if config.benchmark_cell() not in cells:
        raise ValueError(f"benchmark cell {config.benchmark_cell()} not in the grid")
    jobs = [(config, r) for r in range(config.runs)]
    if config.threads > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            per_run = list(pool.map(_run_all_cells, jobs))
    else:
        per_run = [_run_all_cells(j) for j in jobs]

    result = ExperimentResult(config, cells)
    for cell in cells:
        result.reports[cell] = []
    for run_reports in per_run:
        for rep in run_reports:
            result.reports[rep.cell].append(rep)
    return result


def config_fields() -> list[str]:
    return [f.name for f in fields(SimulationConfig)]
