import math

import numpy as np
import pytest

from auctionsim.datagen import (Advertiser, GaussianSpec, build_dataset, conditional_gaussian,
                                gen_bidders, gen_covariance, gen_query_features,
                                read_dataset, retrieve_candidates, sample_gaussian,
                                sample_instance_extras, value_of, RunParameters,
                                draw_run_parameters)
from auctionsim.engine import SimulationConfig
from auctionsim.hierarchy import build_family
from auctionsim.streams import substream


def rng(seed=0):
    return np.random.default_rng(seed)


class TestGenCovariance:
    def test_zero_noise_is_diagonal(self):
        cov = gen_covariance(3, 0.0, rng())
        assert np.array_equal(cov, np.diag(np.diag(cov)))
        assert np.all(np.diag(cov) > 0)

    def test_psd_by_cholesky(self):
        cov = gen_covariance(5, 0.3, rng(1))
        np.linalg.cholesky(cov + 1e-12 * np.eye(5))  # raises if not PSD
        assert np.allclose(cov, cov.T)

    def test_noise_norm_is_exact(self):
        cov = gen_covariance(2, 0.1, rng(2))
        d = np.diag(np.diag(gen_covariance(2, 0.0, rng(2))))
        assert abs(np.linalg.norm(cov - d, "fro") - 0.1) < 1e-9

    def test_min_eigenvalue_at_least_zero(self):
        for seed in range(10):
            cov = gen_covariance(4, 0.5, rng(seed))
            assert np.linalg.eigvalsh(cov).min() >= -1e-12


class TestConditionalGaussian:
    def test_identity_cov_independent(self):
        spec = GaussianSpec(np.array([1.0, 2.0, 3.0]), np.eye(3))
        cond = conditional_gaussian(spec, np.array([5.0]))
        assert np.allclose(cond.mean, [2.0, 3.0])
        assert np.allclose(cond.cov, np.eye(2))

    def test_bivariate_textbook(self):
        rho = 0.5
        spec = GaussianSpec(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))
        cond = conditional_gaussian(spec, np.array([1.0]))
        assert abs(cond.mean[0] - 0.5) < 1e-9
        assert abs(cond.cov[0, 0] - 0.75) < 1e-8

    def test_prefix_at_mean_keeps_mean(self):
        spec = GaussianSpec(np.array([0.3, -0.2, 0.9]),
                            gen_covariance(3, 0.2, rng(3)))
        cond = conditional_gaussian(spec, spec.mean[:2])
        assert np.allclose(cond.mean, spec.mean[2:], atol=1e-9)

    def test_rejection_sampling_agreement(self):
        # empirical conditional from a narrow window around the prefix
        spec = GaussianSpec(np.array([0.1, -0.3, 0.2]),
                            gen_covariance(3, 0.25, rng(4)))
        f = np.array([0.4])
        cond = conditional_gaussian(spec, f)
        g = rng(5)
        draws = sample_gaussian(spec, g, 4_000_000)
        keep = draws[np.abs(draws[:, 0] - f[0]) < 0.02]
        assert keep.shape[0] > 20_000
        tail = keep[:, 1:]
        se_mean = tail.std(axis=0, ddof=1) / math.sqrt(tail.shape[0])
        assert np.all(np.abs(tail.mean(axis=0) - cond.mean) < 3 * se_mean + 1e-3)
        emp_cov = np.cov(tail.T)
        se_cov = np.sqrt(2.0 / tail.shape[0]) * np.outer(tail.std(axis=0), tail.std(axis=0))
        assert np.all(np.abs(emp_cov - cond.cov) < 3 * se_cov + 2e-3)

    def test_conditional_cov_psd(self):
        for seed in range(8):
            spec = GaussianSpec(np.zeros(5), gen_covariance(5, 0.4, rng(seed)))
            cond = conditional_gaussian(spec, np.array([0.1, -0.2]))
            assert np.linalg.eigvalsh(cond.cov).min() >= -1e-10

    def test_bad_prefix_length(self):
        spec = GaussianSpec(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            conditional_gaussian(spec, np.zeros(3))


class TestGenBidders:
    def test_inverse_cdf_endpoints(self):
        # u = 0 maps to x_min
        assert 1.0 * (1 - 0.0) ** (-1.0 / (2.0 - 1.0)) == 1.0
        # alpha = 2, x_min = 1, u = 0.75 -> 4
        assert abs(1.0 * (1 - 0.75) ** (-1.0 / (2.0 - 1.0)) - 4.0) < 1e-12

    def test_tail_slope(self):
        bidders = gen_bidders(100_000, GaussianSpec(np.zeros(2), np.eye(2)),
                              (2.5, 1.0), rng(6))
        tcpa = np.sort(np.array([b.tcpa for b in bidders]))
        # log-log survival slope should be -(alpha - 1) = -1.5
        n = tcpa.shape[0]
        surv = 1.0 - np.arange(n) / n
        sel = (tcpa > np.quantile(tcpa, 0.5)) & (tcpa < np.quantile(tcpa, 0.999))
        slope = np.polyfit(np.log(tcpa[sel]), np.log(surv[sel]), 1)[0]
        assert abs(slope + 1.5) < 0.1

    def test_roi_target_inverse(self):
        bidders = gen_bidders(10, GaussianSpec(np.zeros(2), np.eye(2)), (2.0, 1.0), rng(7))
        for b in bidders:
            assert b.tcpa > 0
            assert abs(b.roi_target * b.tcpa - 1.0) < 1e-12

    def test_parameter_validation(self):
        spec = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            gen_bidders(0, spec, (2.0, 1.0), rng())
        with pytest.raises(ValueError):
            gen_bidders(3, spec, (1.0, 1.0), rng())


class TestValueOf:
    def test_orthogonal_gives_one(self):
        assert value_of(np.array([1.0, 0.0]), np.array([0.0, 5.0]), 0.0) == 1.0

    def test_direct_evaluation(self):
        v = value_of(np.array([1.0, 0.0]), np.array([math.log(2.0), 5.0]), 0.0)
        assert abs(v - 2.0) < 1e-12

    def test_noise_centering(self):
        g = rng(8)
        fq = np.array([0.3, -0.1])
        fb = np.array([0.2, 0.7])
        sigma = 0.4
        n = 40_000
        logs = np.log([value_of(fq, fb, e) for e in g.normal(0, sigma, 4000)])
        se = sigma / math.sqrt(logs.size)
        assert abs(logs.mean() - fq @ fb) < 3 * se

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            value_of(np.zeros(2), np.zeros(3), 0.0)


class TestQueryFeatures:
    def test_same_leaf_shares_prefix_exactly(self):
        fam = build_family(60, [3, 2], rng(9))
        spec = GaussianSpec(np.zeros(6), gen_covariance(6, 0.2, rng(10)))
        feats = gen_query_features(fam, spec, [2, 2], run_seed=123)
        for d in range(6):
            qs = np.flatnonzero(fam.leaf_of_query == d)
            if qs.size > 1:
                assert np.all(feats[qs, :4] == feats[qs[0], :4])

    def test_level_zero_iid(self):
        fam = build_family(50, [], rng(11))
        spec = GaussianSpec(np.zeros(3), np.eye(3))
        feats = gen_query_features(fam, spec, [], run_seed=5)
        assert feats.shape == (50, 3)
        assert np.unique(feats[:, 0]).size == 50

    def test_distinct_groups_uncorrelated_prefixes(self):
        # identity covariance: prefixes across different layer-1 sets are
        # independent; average empirical correlation over many rebuilds ~ 0
        spec = GaussianSpec(np.zeros(4), np.eye(4))
        cors = []
        for seed in range(300):
            fam = build_family(8, [2], rng(seed))
            feats = gen_query_features(fam, spec, [2], run_seed=seed)
            a = feats[fam.leaf_of_query == 0]
            b = feats[fam.leaf_of_query == 1]
            if a.shape[0] and b.shape[0]:
                cors.append(a[0, 0] * b[0, 0])
        cors = np.array(cors)
        se = cors.std(ddof=1) / math.sqrt(cors.size)
        assert abs(cors.mean()) < 3 * se + 1e-3

    def test_dim_validation(self):
        fam = build_family(10, [2], rng())
        spec = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            gen_query_features(fam, spec, [2], run_seed=0)  # no free dims left


class TestRetrieval:
    def _bidders(self, feats):
        return [Advertiser(i, np.asarray(f, dtype=float), 1.0) for i, f in enumerate(feats)]

    def test_no_threshold_returns_all_sorted(self):
        bidders = self._bidders([[3.0], [1.0], [2.0]])
        got = retrieve_candidates(np.array([1.0]), bidders, 10, float("-inf"))
        assert got == [0, 2, 1]

    def test_threshold_filters(self):
        bidders = self._bidders([[3.0], [2.0], [1.0]])
        got = retrieve_candidates(np.array([1.0]), bidders, 5, 1.5)
        assert got == [0, 1]

    def test_matches_bruteforce_oracle(self):
        g = rng(12)
        for trial in range(20):
            feats = g.normal(size=(100, 4))
            fq = g.normal(size=4)
            bidders = self._bidders(feats)
            got = retrieve_candidates(fq, bidders, 15, 0.0)
            scores = feats @ fq
            oracle = sorted((i for i in range(100) if scores[i] >= 0.0),
                            key=lambda i: (-scores[i], i))[:15]
            assert got == oracle

    def test_tie_break_ascending_id(self):
        bidders = self._bidders([[1.0], [1.0], [2.0]])
        got = retrieve_candidates(np.array([1.0]), bidders, 3, float("-inf"))
        assert got == [2, 0, 1]


class TestInstanceExtras:
    def _params(self):
        return RunParameters(
            feature_dim=4, layer_dims=(), query_spec=GaussianSpec(np.zeros(4), np.eye(4)),
            bidder_spec=GaussianSpec(np.zeros(4), np.eye(4)), sigma_eps=0.3,
            alpha=2.5, x_min=1.0, mu_cost=-2.0, sigma_cost=0.5,
            decay_low=0.5, decay_high=0.5, reserve_gamma=0.5, reserve_sigma=0.5,
            n_retrieval=5, retrieval_threshold=0.0)

    def test_deterministic_decay(self):
        _, beta, _ = sample_instance_extras(3, 3, self._params(), rng(13))
        assert np.allclose(beta, [1.0, 0.5, 0.25])

    def test_reserves_disabled_are_zero(self):
        _, _, res = sample_instance_extras(4, 2, self._params(), rng(14))
        assert np.all(res == 0.0)

    def test_reserves_enabled_scale_with_value(self):
        values = np.array([1.0, 2.0, 4.0])
        tcpa = np.array([1.0, 1.0, 1.0])
        p = self._params()
        _, _, res = sample_instance_extras(3, 2, p, rng(15), values=values,
                                           tcpa=tcpa, reserves_enabled=True)
        assert np.all(res > 0)

    def test_cost_log_moments(self):
        p = self._params()
        costs, _, _ = sample_instance_extras(10_000, 2, p, rng(16))
        logc = np.log(costs)
        assert abs(logc.mean() - p.mu_cost) < 3 * p.sigma_cost / 100.0


class TestBuildDataset:
    CFG = SimulationConfig(n_advertisers=8, n_queries=60, n_slots=3, n_retrieval=5,
                           runs=2, iterations=2, branching=(2, 2), layer_dims=(2, 2),
                           experiment_levels=(0, 1, 2))

    def test_determinism(self):
        a = build_dataset(self.CFG, 99)
        b = build_dataset(self.CFG, 99)
        assert a.digest() == b.digest()

    def test_candidate_and_slot_limits(self):
        ds = build_dataset(self.CFG, 3)
        for inst in ds.instances:
            assert len(inst.candidates) <= 5
            assert inst.num_slots == 3
            assert inst.slot_ctrs[0] == 1.0
            assert all(inst.slot_ctrs[k] >= inst.slot_ctrs[k + 1]
                       for k in range(len(inst.slot_ctrs) - 1))

    def test_reserve_flag_only_changes_reserves(self):
        import dataclasses
        on = build_dataset(dataclasses.replace(self.CFG, reserve=True), 5)
        off = build_dataset(dataclasses.replace(self.CFG, reserve=False), 5)
        assert np.array_equal(on.cand_value, off.cand_value)
        assert np.array_equal(on.cand_cost, off.cand_cost)
        assert np.array_equal(on.beta, off.beta)
        assert np.array_equal(on.cand_adv, off.cand_adv)
        assert np.any(on.cand_reserve > 0)
        assert np.all(off.cand_reserve == 0)
        assert on.digest().split("-")[0] == off.digest().split("-")[0]
        assert on.digest() != off.digest()

    def test_straightline_reference_pipeline(self):
        """Rebuild a tiny dataset step by step from the documented streams."""
        cfg = SimulationConfig(n_advertisers=3, n_queries=5, n_slots=2, n_retrieval=3,
                               runs=2, iterations=1, branching=(2,), layer_dims=(2,),
                               experiment_levels=(0, 1))
        seed = 17
        ds = build_dataset(cfg, seed)

        params = draw_run_parameters(cfg, seed)
        fam = build_family(5, (2,), substream(seed, "leaves"))
        assert np.array_equal(fam.leaf_of_query, ds.family.leaf_of_query)

        bidders = gen_bidders(3, params.bidder_spec, (params.alpha, params.x_min),
                              substream(seed, "bidder_features"))
        u = substream(seed, "tcpa").random(3)
        tcpa = params.x_min * (1.0 - u) ** (-1.0 / (params.alpha - 1.0))
        assert np.allclose(tcpa, ds.tcpa)

        qf = gen_query_features(fam, params.query_spec, (2,), seed)
        eps = substream(seed, "value_noise").normal(0.0, params.sigma_eps, size=5)
        for j in range(5):
            kept = retrieve_candidates(qf[j], bidders, 3, params.retrieval_threshold)
            inst = ds.instances[j]
            assert [c[0] for c in inst.candidates] == kept
            for pos, (adv, val, cost, reserve) in enumerate(inst.candidates):
                expect = math.exp(qf[j] @ bidders[adv].feature + eps[j])
                assert abs(val - expect) < 1e-12 * max(1.0, expect)
                assert reserve == 0.0

        costs = substream(seed, "cost").lognormal(params.mu_cost, params.sigma_cost,
                                                  size=(5, 3))
        decays = substream(seed, "beta").uniform(params.decay_low, params.decay_high,
                                                 size=(5, 1))
        for j in range(5):
            inst = ds.instances[j]
            assert abs(inst.slot_ctrs[1] - decays[j, 0]) < 1e-15
            for pos in range(len(inst.candidates)):
                assert abs(inst.candidates[pos][2] - costs[j, pos]) < 1e-15

    def test_export_import_roundtrip(self, tmp_path):
        from auctionsim.datagen import write_dataset
        ds = build_dataset(self.CFG, 21)
        path = tmp_path / "ds.txt"
        write_dataset(ds, path)
        back = read_dataset(path, branching=list(self.CFG.branching))
        assert np.array_equal(back.cand_adv, ds.cand_adv)
        assert np.array_equal(back.cand_value, ds.cand_value)
        assert np.array_equal(back.cand_cost, ds.cand_cost)
        assert np.array_equal(back.cand_reserve, ds.cand_reserve)
        assert np.array_equal(back.beta, ds.beta)
        assert np.array_equal(back.leaf_of_query, ds.leaf_of_query)
        assert np.allclose(back.tcpa, ds.tcpa)
        # second round trip is byte-identical
        p2 = tmp_path / "ds2.txt"
        write_dataset(back, p2)
        assert p2.read_bytes() == path.read_bytes()
