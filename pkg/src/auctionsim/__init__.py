"""Synthetic ad-auction simulation with ROI-constrained autobidders."""

from .auction import AuctionOutcome, allocate, fpa_payment, gsp_payment, run_auction, score, vcg_payment
from .bidding import (BidProfile, PartitionCurve, best_response, bid_of, default_grid,
                      evaluate_partition_curve, greedy_select, lower_convex_hull,
                      select_multipliers, uniform_update)
from .datagen import (Advertiser, AuctionInstance, Dataset, GaussianSpec, RunParameters,
                      build_dataset, conditional_gaussian, gen_bidders, gen_covariance,
                      gen_query_features, read_dataset, retrieve_candidates,
                      sample_instance_extras, value_of, write_dataset)
from .engine import (ExperimentResult, RunReport, SimulationConfig, run_experiment,
                     run_round, run_simulation)
from .hierarchy import LaminarFamily, build_family, cell_index, validate
from .metrics import (AggregateRow, BidderLedger, MetricRow, aggregate, average_multiplier,
                      profit, relative_margin, roi, strength, welfare)

__version__ = "0.1.0"
