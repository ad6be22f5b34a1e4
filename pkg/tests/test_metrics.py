import math

import numpy as np
import pytest

from auctionsim.metrics import (BidderLedger, MetricRow, aggregate, average_multiplier,
                                profit, relative_margin, roi, strength, welfare)


def ledger(values, spends, costs):
    return BidderLedger(np.asarray(values, float), np.asarray(spends, float),
                        np.asarray(costs, float))


class TestWelfareProfit:
    def test_direct_sums(self):
        led = ledger([10, 5], [8, 6], [1, 1])
        assert welfare(led) == 13.0
        assert profit(led) == 12.0

    def test_all_zero(self):
        led = ledger([0, 0], [0, 0], [0, 0])
        assert welfare(led) == 0.0
        assert profit(led) == 0.0

    def test_difference_identity(self):
        g = np.random.default_rng(0)
        led = ledger(g.uniform(0, 5, 20), g.uniform(0, 5, 20), g.uniform(0, 1, 20))
        lhs = welfare(led) - profit(led)
        rhs = float(np.sum(led.value - led.spend))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_permutation_invariant(self):
        led = ledger([1, 2, 3], [3, 2, 1], [0.5, 0.1, 0.2])
        perm = ledger([3, 1, 2], [1, 3, 2], [0.2, 0.5, 0.1])
        assert welfare(led) == pytest.approx(welfare(perm))
        assert profit(led) == pytest.approx(profit(perm))


class TestRelativeMargin:
    def test_direct_formula(self):
        led = ledger([10, 5], [8, 6], [0, 0])
        assert relative_margin(led) == pytest.approx(3.0 / 14.0)

    def test_zero_when_tight(self):
        led = ledger([4, 7], [4, 7], [0, 0])
        assert relative_margin(led) == 0.0

    def test_single_bidder_all_loss(self):
        led = ledger([0], [4], [0])
        assert relative_margin(led) == 1.0

    def test_zero_spend_nonzero_value_is_error(self):
        with pytest.raises(ValueError):
            relative_margin(ledger([1], [0], [0]))

    def test_all_zero_defined_as_zero(self):
        assert relative_margin(ledger([0], [0], [0])) == 0.0


class TestRoi:
    def test_spend_weighted(self):
        led = ledger([10, 2], [5, 4], [0, 0])
        assert roi(led) == pytest.approx(12.0 / 9.0)

    def test_all_zero_is_one(self):
        assert roi(ledger([0], [0], [0])) == 1.0


class TestStrength:
    def test_uniform_is_zero(self):
        k = np.full((3, 4), 2.5)
        part = np.ones((3, 4), dtype=bool)
        assert strength(k, part, np.array([1.0, 2.0, 3.0])) == 0.0

    def test_two_partition_example(self):
        k = np.array([[1.0, math.e ** 2]])
        part = np.ones((1, 2), dtype=bool)
        assert strength(k, part, np.array([5.0])) == pytest.approx(1.0)

    def test_invariant_to_global_rescale(self):
        g = np.random.default_rng(1)
        k = g.uniform(0.5, 3.0, size=(4, 6))
        part = g.random((4, 6)) < 0.8
        part[:, 0] = True
        w = g.uniform(0.1, 5.0, size=4)
        s1 = strength(k, part, w)
        k2 = k.copy()
        k2[2] *= 7.3
        assert strength(k2, part, w) == pytest.approx(s1, rel=1e-12)

    def test_only_participated_partitions_count(self):
        k = np.array([[1.0, 1.0, 100.0]])
        part = np.array([[True, True, False]])
        assert strength(k, part, np.array([1.0])) == 0.0

    def test_nonpositive_multiplier_rejected(self):
        with pytest.raises(ValueError):
            strength(np.array([[0.0, 1.0]]), np.ones((1, 2), bool), np.array([1.0]))


class TestAverageMultiplier:
    def test_geometric_mean_per_bidder(self):
        k = np.array([[1.0, 4.0]])  # geo mean 2
        part = np.ones((1, 2), dtype=bool)
        assert average_multiplier(k, part, np.array([3.0])) == pytest.approx(2.0)

    def test_spend_weighting(self):
        k = np.array([[1.0], [3.0]])
        part = np.ones((2, 1), dtype=bool)
        got = average_multiplier(k, part, np.array([1.0, 2.0]))
        assert got == pytest.approx((1.0 + 6.0) / 3.0)


def row(mech, level, run_profit, run_welfare, bidmul=1.0, stren=0.0):
    return MetricRow(mech, False, level, 25, run_profit, run_welfare, bidmul,
                     stren, 0.0, 1.0)


class TestAggregate:
    def test_self_benchmark_zero_delta(self):
        rows = {("gsp", False, 0): [row("gsp", 0, 10.0, 20.0), row("gsp", 0, 11.0, 21.0)]}
        table = aggregate(rows, ("gsp", False, 0))
        assert table[0].profit_delta == 0.0
        assert table[0].profit_ci == (0.0, 0.0)
        assert table[0].welfare_delta == 0.0

    def test_hand_computed_ci(self):
        # deltas +2% and +4%: mean 3%, stderr 1% -> CI [1.04%, 4.96%]
        rows = {
            ("gsp", False, 0): [row("gsp", 0, 100.0, 100.0), row("gsp", 0, 100.0, 100.0)],
            ("fpa", False, 0): [row("fpa", 0, 102.0, 102.0), row("fpa", 0, 104.0, 104.0)],
        }
        table = aggregate(rows, ("gsp", False, 0))
        fpa = next(r for r in table if r.mechanism == "fpa")
        assert fpa.profit_delta == pytest.approx(0.03)
        assert fpa.profit_ci[0] == pytest.approx(0.0104, abs=1e-6)
        assert fpa.profit_ci[1] == pytest.approx(0.0496, abs=1e-6)

    def test_coverage_of_normal_ci(self):
        g = np.random.default_rng(2)
        hits = 0
        trials = 300
        for _ in range(trials):
            deltas = g.normal(0.0, 1.0, size=100)
            mean = deltas.mean()
            hw = 1.96 * deltas.std(ddof=1) / math.sqrt(100)
            hits += (mean - hw) <= 0.0 <= (mean + hw)
        # binomial(300, 0.95): 3 sigma ~ 11
        assert abs(hits - 0.95 * trials) < 12

    def test_missing_benchmark_rejected(self):
        rows = {("fpa", False, 0): [row("fpa", 0, 1.0, 1.0), row("fpa", 0, 1.0, 1.0)]}
        with pytest.raises(ValueError):
            aggregate(rows, ("gsp", False, 0))

    def test_zero_benchmark_rejected(self):
        rows = {("gsp", False, 0): [row("gsp", 0, 0.0, 1.0), row("gsp", 0, 1.0, 1.0)]}
        with pytest.raises(ValueError):
            aggregate(rows, ("gsp", False, 0))

    def test_single_run_rejected(self):
        rows = {("gsp", False, 0): [row("gsp", 0, 1.0, 1.0)]}
        with pytest.raises(ValueError):
            aggregate(rows, ("gsp", False, 0))

    def test_mismatched_run_counts_rejected(self):
        rows = {
            ("gsp", False, 0): [row("gsp", 0, 1.0, 1.0), row("gsp", 0, 1.0, 1.0)],
            ("fpa", False, 0): [row("fpa", 0, 1.0, 1.0)],
        }
        with pytest.raises(ValueError):
            aggregate(rows, ("gsp", False, 0))
