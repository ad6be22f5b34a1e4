"""Synthetic auction dataset generation.

Per run we draw distribution parameters, then advertiser and query feature
vectors from multivariate Gaussians.  Query features share coordinate
prefixes along the query hierarchy, so queries in the same group are
correlated.  Per-candidate values are lognormal in the feature inner
product, costs are lognormal, ROI targets come from a Pareto tail, and
slot curves decay by uniform ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import LaminarFamily, build_family
from .streams import substream


@dataclass(frozen=True)
class GaussianSpec:
    """Mean vector and symmetric PSD covariance of one feature distribution."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Advertiser:
    id: int
    feature: np.ndarray
    tcpa: float  # target cost per conversion, > 0

    @property
    def roi_target(self) -> float:
        return 1.0 / self.tcpa


@dataclass(frozen=True)
class AuctionInstance:
    """One query's auction: candidates in retrieval order plus slot curve."""

    query_id: int
    leaf_id: int
    candidates: tuple[tuple[int, float, float, float], ...]  # (adv_id, value, cost, reserve)
    slot_ctrs: tuple[float, ...]  # non-increasing, first entry 1.0

    @property
    def num_slots(self) -> int:
        return len(self.slot_ctrs)


@dataclass(frozen=True)
class RunParameters:
    """All distribution parameters resolved for one run."""

    feature_dim: int
    layer_dims: tuple[int, ...]
    query_spec: GaussianSpec
    bidder_spec: GaussianSpec
    sigma_eps: float
    alpha: float
    x_min: float
    mu_cost: float
    sigma_cost: float
    decay_low: float
    decay_high: float
    reserve_gamma: float
    reserve_sigma: float
    n_retrieval: int
    retrieval_threshold: float

    def __post_init__(self):
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        if self.x_min <= 0:
            raise ValueError("x_min must be positive")
        if not 0 <= self.decay_low <= self.decay_high <= 1:
            raise ValueError("decay range must satisfy 0 <= low <= high <= 1")


class Dataset:
    """Packed auction dataset for one run.

    Candidate arrays are [M, C] with invalid entries masked; candidates in
    each row are stored in retrieval order (descending feature score).
    """

    def __init__(self, advertisers, family, params, cand_adv, cand_value,
                 cand_cost, cand_reserve, cand_mask, beta):
        self.advertisers: list[Advertiser] = advertisers
        self.family: LaminarFamily | None = family
        self.params: RunParameters | None = params
        self.cand_adv = cand_adv          # int32 [M, C]
        self.cand_value = cand_value      # float64 [M, C]
        self.cand_cost = cand_cost        # float64 [M, C]
        self.cand_reserve = cand_reserve  # float64 [M, C]
        self.cand_mask = cand_mask        # bool [M, C]
        self.beta = beta                  # float64 [M, z]
        self.tcpa = np.array([a.tcpa for a in advertisers])
        self.instances = _InstanceView(self)

    @property
    def num_queries(self) -> int:
        return self.cand_adv.shape[0]

    @property
    def num_slots(self) -> int:
        return self.beta.shape[1]

    @property
    def leaf_of_query(self) -> np.ndarray:
        return self.family.leaf_of_query

    def digest(self) -> str:
        """Content hash of everything except reserves, plus one of reserves.

        Grid cells differing only in the reserve flag share the first part.
        """
        import hashlib

        h = hashlib.sha256()
        for arr in (self.cand_adv, self.cand_value, self.cand_cost,
                    self.cand_mask, self.beta, self.tcpa, self.leaf_of_query):
            h.update(np.ascontiguousarray(arr).tobytes())
        base = h.hexdigest()[:16]
        hr = hashlib.sha256(np.ascontiguousarray(self.cand_reserve).tobytes())
        return f"{base}-{hr.hexdigest()[:16]}"


class _InstanceView:
    """Lazy sequence of AuctionInstance objects over a packed Dataset."""

    def __init__(self, ds: Dataset):
        self._ds = ds

    def __len__(self) -> int:
        return self._ds.num_queries

    def __getitem__(self, j: int) -> AuctionInstance:
        ds = self._ds
        if not 0 <= j < len(self):
            raise IndexError(j)
        cols = np.flatnonzero(ds.cand_mask[j])
        cands = tuple(
            (int(ds.cand_adv[j, c]), float(ds.cand_value[j, c]),
             float(ds.cand_cost[j, c]), float(ds.cand_reserve[j, c]))
            for c in cols
        )
        leaf = int(ds.leaf_of_query[j]) if ds.family is not None else 0
        return AuctionInstance(j, leaf, cands, tuple(float(b) for b in ds.beta[j]))

    def __iter__(self):
        return (self[j] for j in range(len(self)))


def gen_covariance(dim: int, noise_level: float, rng: np.random.Generator,
                   diag_low: float | None = None, diag_high: float | None = None) -> np.ndarray:
    """Covariance D + N^T N with D diagonal and ||N^T N||_F == noise_level.

    D entries are i.i.d. uniform on [diag_low, diag_high], defaulting to
    [0.5/dim, 1.5/dim] so inner products stay O(1) regardless of dim.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if diag_low is None:
        diag_low = 0.5 / dim
    if diag_high is None:
        diag_high = 1.5 / dim
    d = rng.uniform(diag_low, diag_high, size=dim)
    cov = np.diag(d)
    noise = rng.standard_normal((dim, dim))
    if noise_level > 0:
        gram = noise.T @ noise
        gram *= noise_level / np.linalg.norm(gram, "fro")
        cov = cov + gram
    return cov


_RIDGE = 1e-9
_MAX_CONDITION = 1e12


def conditional_gaussian(spec: GaussianSpec, observed_prefix: np.ndarray) -> GaussianSpec:
    """Distribution of the trailing dims given the leading dims' values.

    Mean mu2 + S21 S11^-1 (f - mu1), covariance S22 - S21 S11^-1 S12.
    S11 gets a small ridge before solving; conditioning beyond 1e12 is an
    error.
    """
    f = np.asarray(observed_prefix, dtype=np.float64)
    k = f.shape[0]
    m = spec.dim
    if not 1 <= k < m:
        raise ValueError(f"prefix length {k} must be in [1, {m - 1}]")
    s11 = spec.cov[:k, :k] + _RIDGE * np.eye(k)
    if np.linalg.cond(s11) > _MAX_CONDITION:
        raise np.linalg.LinAlgError("leading covariance block is numerically singular")
    s12 = spec.cov[:k, k:]
    s21 = spec.cov[k:, :k]
    solve = np.linalg.solve(s11, np.column_stack([f - spec.mean[:k], s12]))
    mean = spec.mean[k:] + s21 @ solve[:, 0]
    cov = spec.cov[k:, k:] - s21 @ solve[:, 1:]
    cov = (cov + cov.T) / 2.0
    return GaussianSpec(mean, cov)


def sample_gaussian(spec: GaussianSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` vectors; eigendecomposition-based so PSD (possibly
    singular) covariances are fine."""
    vals, vecs = np.linalg.eigh(spec.cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return spec.mean + rng.standard_normal((size, spec.dim)) @ root.T


def gen_bidders(count: int, spec: GaussianSpec, pareto: tuple[float, float],
                rng: np.random.Generator) -> list[Advertiser]:
    """Advertisers with Gaussian features and Pareto-tailed tCPA.

    tCPA uses the inverse CDF x_min * (1 - u)^(-1/(alpha - 1)).
    """
    alpha, x_min = pareto
    if count < 1:
        raise ValueError("count must be >= 1")
    if alpha <= 1 or x_min <= 0:
        raise ValueError("need alpha > 1 and x_min > 0")
    feats = sample_gaussian(spec, rng, count)
    u = rng.random(count)
    tcpa = x_min * (1.0 - u) ** (-1.0 / (alpha - 1.0))
    return [Advertiser(i, feats[i], float(tcpa[i])) for i in range(count)]


def value_of(f_query: np.ndarray, f_bidder: np.ndarray, epsilon: float) -> float:
    """Per-impression value exp(<f_query, f_bidder> + epsilon)."""
    f_query = np.asarray(f_query, dtype=np.float64)
    f_bidder = np.asarray(f_bidder, dtype=np.float64)
    if f_query.shape != f_bidder.shape:
        raise ValueError("feature dimensions differ")
    return float(np.exp(f_query @ f_bidder + epsilon))


def gen_query_features(family: LaminarFamily, spec: GaussianSpec,
                       layer_dims: list[int] | tuple[int, ...],
                       run_seed: int) -> np.ndarray:
    """Feature matrix [num_queries, m] with hierarchy-shared prefixes.

    Queries under the same layer-l group share their first
    ``layer_dims[0] + ... + layer_dims[l-1]`` coordinates exactly.  Each
    group's prefix extension is drawn from the base distribution
    conditioned on the prefix inherited from its parent; leaf remainders
    are drawn in one batch per leaf.  Streams: ("query_node", layer, d)
    for group prefixes and ("query_leaf", d) for remainders.
    """
    layer_dims = tuple(int(d) for d in layer_dims)
    if len(layer_dims) != family.num_layers:
        raise ValueError("need one prefix width per hierarchy layer")
    if sum(layer_dims) >= spec.dim:
        raise ValueError("prefix widths must leave at least one free dim")

    m = spec.dim
    feats = np.empty((family.num_queries, m))
    # prefixes[d] holds the shared leading coordinates of leaf d.
    prefixes: list[np.ndarray] = [np.empty(0)] * family.sets_per_layer(family.num_layers)

    def descend(layer: int, d: int, prefix: np.ndarray) -> None:
        # (layer, d) is a node whose prefix is complete; extend its children.
        if layer == family.num_layers:
            prefixes[d] = prefix
            return
        width = layer_dims[layer]
        cond = conditional_gaussian(spec, prefix) if prefix.size else spec
        head = GaussianSpec(cond.mean[:width], cond.cov[:width, :width])
        for c in range(family.branching[layer]):
            child = d * family.branching[layer] + c
            rng = substream(run_seed, "query_node", layer + 1, child)
            draw = sample_gaussian(head, rng, 1)[0]
            descend(layer + 1, child, np.concatenate([prefix, draw]))

    if family.num_layers == 0:
        rng = substream(run_seed, "query_leaf", 0)
        return sample_gaussian(spec, rng, family.num_queries)

    descend(0, 0, np.empty(0))
    # One leaf at a time so the remainder draws do not depend on how many
    # queries other leaves hold.
    prefix_len = sum(layer_dims)
    for d in range(family.sets_per_layer(family.num_layers)):
        qids = np.flatnonzero(family.leaf_of_query == d)
        if qids.size == 0:
            continue
        cond = conditional_gaussian(spec, prefixes[d])
        rng = substream(run_seed, "query_leaf", d)
        feats[qids, :prefix_len] = prefixes[d]
        feats[qids, prefix_len:] = sample_gaussian(cond, rng, qids.size)
    return feats


def retrieve_candidates(f_query: np.ndarray, bidders: list[Advertiser],
                        n_retrieval: int, threshold: float) -> list[int]:
    """Ids of the top-scoring bidders by feature inner product.

    Keeps at most ``n_retrieval`` bidders with score >= threshold, ordered
    by descending score with ties broken by ascending id.
    """
    if n_retrieval < 1:
        raise ValueError("n_retrieval must be positive")
    scores = np.array([f_query @ b.feature for b in bidders])
    ids = np.array([b.id for b in bidders])
    order = np.lexsort((ids, -scores))
    kept = [int(ids[i]) for i in order if scores[i] >= threshold]
    return kept[:n_retrieval]


def sample_instance_extras(num_candidates: int, z: int, params: RunParameters,
                           rng: np.random.Generator,
                           values: np.ndarray | None = None,
                           tcpa: np.ndarray | None = None,
                           reserves_enabled: bool = False):
    """Costs, slot curve, and reserves for one instance.

    Costs are lognormal per candidate.  The slot curve starts at 1 and
    decays by i.i.d. uniform ratios.  Reserves, when enabled, are
    gamma * value * tcpa * exp(noise) per candidate, i.e. correlated with
    the candidate's value; otherwise zero.
    """
    if z < 1:
        raise ValueError("z must be >= 1")
    costs = rng.lognormal(params.mu_cost, params.sigma_cost, size=num_candidates)
    decays = rng.uniform(params.decay_low, params.decay_high, size=z - 1)
    beta = np.concatenate([[1.0], np.cumprod(decays)]) if z > 1 else np.ones(1)
    if reserves_enabled:
        if values is None or tcpa is None:
            raise ValueError("reserves need candidate values and tcpa")
        noise = rng.normal(0.0, params.reserve_sigma, size=num_candidates)
        reserves = params.reserve_gamma * values * tcpa * np.exp(noise)
    else:
        reserves = np.zeros(num_candidates)
    return costs, beta, reserves


def draw_run_parameters(config, run_seed: int) -> RunParameters:
    """Resolve all per-run distribution parameters from config ranges."""
    rng = substream(run_seed, "params")
    m = config.feature_dim

    def spec() -> GaussianSpec:
        noise_level = rng.uniform(*config.noise_level_range)
        cov = gen_covariance(m, noise_level, rng,
                             config.diag_range[0] / m, config.diag_range[1] / m)
        mean = rng.normal(0.0, math.sqrt(config.mean_variance), size=m)
        return GaussianSpec(mean, cov)

    query_spec = spec()
    bidder_spec = spec()
    decay = np.sort(rng.uniform(*config.decay_bounds, size=2))
    return RunParameters(
        feature_dim=m,
        layer_dims=tuple(config.layer_dims),
        query_spec=query_spec,
        bidder_spec=bidder_spec,
        sigma_eps=float(rng.uniform(*config.sigma_eps_range)),
        alpha=float(rng.uniform(*config.alpha_range)),
        x_min=config.x_min,
        mu_cost=float(rng.uniform(*config.mu_cost_range)),
        sigma_cost=float(rng.uniform(*config.sigma_cost_range)),
        decay_low=float(decay[0]),
        decay_high=float(decay[1]),
        reserve_gamma=config.reserve_gamma,
        reserve_sigma=config.reserve_sigma,
        n_retrieval=config.n_retrieval,
        retrieval_threshold=config.retrieval_threshold,
    )


def build_dataset(config, run_seed: int) -> Dataset:
    """Full generation pipeline for one run; pure in (config, run_seed).

    Vectorized equivalent of: draw parameters, build the hierarchy, draw
    features, retrieve candidates per query, then draw values, costs, slot
    curves, and reserves from their own streams.
    """
    params = draw_run_parameters(config, run_seed)
    family = build_family(config.n_queries, config.branching,
                          substream(run_seed, "leaves"))

    bidders = gen_bidders(config.n_advertisers, params.bidder_spec,
                          (params.alpha, params.x_min),
                          substream(run_seed, "bidder_features"))
    # tCPA comes from its own stream so feature and tcpa draws stay
    # independent; gen_bidders' inline draw is replaced wholesale.
    u = substream(run_seed, "tcpa").random(config.n_advertisers)
    tcpa = params.x_min * (1.0 - u) ** (-1.0 / (params.alpha - 1.0))
    bidders = [Advertiser(b.id, b.feature, float(tcpa[b.id])) for b in bidders]

    qfeat = gen_query_features(family, params.query_spec, params.layer_dims, run_seed)
    bfeat = np.stack([b.feature for b in bidders])

    m, n, c_max, z = config.n_queries, config.n_advertisers, params.n_retrieval, config.n_slots
    scores = qfeat @ bfeat.T  # [M, N]
    adv_ids = np.arange(n)
    order = np.lexsort((np.broadcast_to(adv_ids, scores.shape), -scores), axis=1)
    top = order[:, :c_max]
    top_scores = np.take_along_axis(scores, top, axis=1)
    mask = top_scores >= params.retrieval_threshold

    eps_rng = substream(run_seed, "value_noise")
    if config.value_noise_mode == "per_query":
        eps = eps_rng.normal(0.0, params.sigma_eps, size=m)[:, None]
    elif config.value_noise_mode == "per_candidate":
        eps = eps_rng.normal(0.0, params.sigma_eps, size=(m, c_max))
    else:
        raise ValueError(f"unknown value_noise_mode {config.value_noise_mode!r}")
    values = np.exp(top_scores + eps)

    costs = substream(run_seed, "cost").lognormal(params.mu_cost, params.sigma_cost,
                                                  size=(m, c_max))
    decays = substream(run_seed, "beta").uniform(params.decay_low, params.decay_high,
                                                 size=(m, z - 1))
    beta = np.concatenate([np.ones((m, 1)), np.cumprod(decays, axis=1)], axis=1)

    if config.reserve:
        noise = substream(run_seed, "reserve").normal(0.0, params.reserve_sigma,
                                                      size=(m, c_max))
        reserves = params.reserve_gamma * values * tcpa[top] * np.exp(noise)
    else:
        reserves = np.zeros((m, c_max))

    cand_adv = np.where(mask, top, -1).astype(np.int32)
    zero = np.zeros_like(values)
    return Dataset(
        advertisers=bidders,
        family=family,
        params=params,
        cand_adv=cand_adv,
        cand_value=np.where(mask, values, zero),
        cand_cost=np.where(mask, costs, zero),
        cand_reserve=np.where(mask, reserves, zero),
        cand_mask=mask,
        beta=beta,
    )


# ---------------------------------------------------------------------------
# Plain-text dataset serialization.  Floats are written with 17 significant
# digits, which round-trips IEEE doubles exactly.

_FMT = "%.17g"


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write("# auctionsim dataset v1\n")
        fh.write("# advertiser lines: id tcpa\n")
        fh.write("# instance lines: query_id leaf_id z beta... n_cands "
                 "then per candidate: adv_id value cost reserve\n")
        fh.write(f"advertisers {len(ds.advertisers)}\n")
        for a in ds.advertisers:
            fh.write(f"{a.id} {_FMT % a.tcpa}\n")
        fh.write(f"instances {ds.num_queries} {ds.num_slots}\n")
        leaf = ds.leaf_of_query
        for j in range(ds.num_queries):
            cols = np.flatnonzero(ds.cand_mask[j])
            parts = [str(j), str(int(leaf[j])), str(ds.num_slots)]
            parts += [_FMT % b for b in ds.beta[j]]
            parts.append(str(len(cols)))
            for c in cols:
                parts += [str(int(ds.cand_adv[j, c])), _FMT % ds.cand_value[j, c],
                          _FMT % ds.cand_cost[j, c], _FMT % ds.cand_reserve[j, c]]
            fh.write(" ".join(parts) + "\n")


def read_dataset(path, branching: list[int] | None = None) -> Dataset:
    """Load a dataset written by :func:`write_dataset`.

    ``branching`` rebuilds the hierarchy from stored leaf ids; without it
    the dataset only supports level-0 simulation.
    """
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    pos = 0
    tag, n_adv = lines[pos].split()
    assert tag == "advertisers"
    n_adv = int(n_adv)
    pos += 1
    advertisers = []
    for _ in range(n_adv):
        sid, stcpa = lines[pos].split()
        advertisers.append(Advertiser(int(sid), np.empty(0), float(stcpa)))
        pos += 1
    tag, m, z = lines[pos].split()
    assert tag == "instances"
    m, z = int(m), int(z)
    pos += 1

    rows = [lines[pos + j].split() for j in range(m)]
    c_max = max((int(r[3 + z]) for r in rows), default=0)
    c_max = max(c_max, 1)
    leaf = np.zeros(m, dtype=np.int32)
    cand_adv = np.full((m, c_max), -1, dtype=np.int32)
    cand_value = np.zeros((m, c_max))
    cand_cost = np.zeros((m, c_max))
    cand_reserve = np.zeros((m, c_max))
    beta = np.ones((m, z))
    for j, r in enumerate(rows):
        if int(r[2]) != z:
            raise ValueError(f"instance {j}: slot count {r[2]} differs from header {z}")
        leaf[j] = int(r[1])
        beta[j] = [float(x) for x in r[3:3 + z]]
        nc = int(r[3 + z])
        base = 4 + z
        for c in range(nc):
            cand_adv[j, c] = int(r[base + 4 * c])
            cand_value[j, c] = float(r[base + 4 * c + 1])
            cand_cost[j, c] = float(r[base + 4 * c + 2])
            cand_reserve[j, c] = float(r[base + 4 * c + 3])
    mask = cand_adv >= 0

    family = None
    if branching is not None:
        num_leaves = math.prod(branching)
        order = np.argsort(leaf, kind="stable")
        sets = []
        for layer in range(len(branching) + 1):
            per_cell = math.prod(tuple(branching)[layer:])
            cells = leaf // per_cell
            bounds = np.searchsorted(cells[order],
                                     np.arange(math.prod(tuple(branching)[:layer]) + 1))
            sets.append([np.sort(order[bounds[d]:bounds[d + 1]]).astype(np.int64)
                         for d in range(len(bounds) - 1)])
        family = LaminarFamily(m, tuple(branching), leaf, sets)
        if leaf.max(initial=0) >= num_leaves:
            raise ValueError("stored leaf ids exceed the branching product")

    return Dataset(advertisers, family, None, cand_adv, cand_value,
                   cand_cost, cand_reserve, mask, beta)
