"""Nested (laminar) partitions of the query set.

A family with layer counts ``branching = [b1, ..., bL]`` partitions the
queries into ``b1`` groups at layer 1, each of which splits into ``b2``
subgroups at layer 2, and so on.  Layer 0 is the whole query set.  The
layer index of a multiplier profile ("level") selects how fine-grained a
bidder's per-group multipliers are.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaminarFamily:
    """An L-layer nested partition of query ids ``0..num_queries-1``.

    ``sets[l]`` lists the layer-l groups as sorted int arrays; layer 0 is a
    single group holding every query.  ``leaf_of_query[q]`` is the index of
    q's group in the deepest layer.
    """

    num_queries: int
    branching: tuple[int, ...]
    leaf_of_query: np.ndarray  # int32 [num_queries]
    sets: list[list[np.ndarray]] = field(repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.branching)

    def sets_per_layer(self, layer: int) -> int:
        if not 0 <= layer <= self.num_layers:
            raise ValueError(f"layer {layer} out of range [0, {self.num_layers}]")
        return math.prod(self.branching[:layer])

    def leaves_per_cell(self, layer: int) -> int:
        """Number of deepest-layer groups contained in one layer-``layer`` group."""
        if not 0 <= layer <= self.num_layers:
            raise ValueError(f"layer {layer} out of range [0, {self.num_layers}]")
        return math.prod(self.branching[layer:])

    def cell_of_queries(self, level: int) -> np.ndarray:
        """Vector of level-``level`` group indices for all queries."""
        return (self.leaf_of_query // self.leaves_per_cell(level)).astype(np.int32)

    def leaf_occupancy(self) -> np.ndarray:
        """Query count per deepest-layer group."""
        return np.bincount(self.leaf_of_query, minlength=self.sets_per_layer(self.num_layers))

    def empty_leaf_count(self) -> int:
        return int(np.count_nonzero(self.leaf_occupancy() == 0))


def build_family(
    num_queries: int,
    branching: list[int] | tuple[int, ...],
    rng: np.random.Generator,
    leaf_weights: np.ndarray | None = None,
) -> LaminarFamily:
    """Assign each query to a random deepest-layer group and build all layers.

    Assignment is uniform over groups unless ``leaf_weights`` gives a
    probability per group.  Empty groups are allowed (they contribute no
    points to per-group bid optimization) but logged at small scale.
    """
    if num_queries <= 0:
        raise ValueError("num_queries must be positive")
    branching = tuple(int(b) for b in branching)
    if any(b <= 0 for b in branching):
        raise ValueError(f"branching entries must be positive, got {branching}")

    num_leaves = math.prod(branching)
    if leaf_weights is not None:
        leaf_weights = np.asarray(leaf_weights, dtype=np.float64)
        if leaf_weights.shape != (num_leaves,):
            raise ValueError(f"leaf_weights must have shape ({num_leaves},)")
        probs = leaf_weights / leaf_weights.sum()
        leaf_of_query = rng.choice(num_leaves, size=num_queries, p=probs).astype(np.int32)
    else:
        leaf_of_query = rng.integers(0, num_leaves, size=num_queries).astype(np.int32)

    sets: list[list[np.ndarray]] = []
    order = np.argsort(leaf_of_query, kind="stable")
    for layer in range(len(branching) + 1):
        per_cell = math.prod(branching[layer:])
        cells = leaf_of_query // per_cell
        bounds = np.searchsorted(cells[order], np.arange(math.prod(branching[:layer]) + 1))
        layer_sets = [np.sort(order[bounds[d] : bounds[d + 1]]).astype(np.int64)
                      for d in range(len(bounds) - 1)]
        sets.append(layer_sets)

    family = LaminarFamily(num_queries, branching, leaf_of_query, sets)
    empty = family.empty_leaf_count()
    if empty:
        logger.warning("laminar family has %d empty leaf sets (of %d)", empty, num_leaves)
    return family


def cell_index(family: LaminarFamily, level: int, query_id: int) -> int:
    """Index of the level-``level`` group containing ``query_id``."""
    if not 0 <= level <= family.num_layers:
        raise ValueError(f"level {level} out of range [0, {family.num_layers}]")
    if not 0 <= query_id < family.num_queries:
        raise ValueError(f"query id {query_id} out of range")
    return int(family.leaf_of_query[query_id]) // family.leaves_per_cell(level)


def validate(family: LaminarFamily) -> list[str]:
    """Check the nested-partition properties; return one message per violation.

    Works purely off ``family.sets`` so that hand-built (possibly broken)
    families can be diagnosed.
    """
    violations: list[str] = []
    all_queries = np.arange(family.num_queries)

    if len(family.sets[0]) != 1:
        violations.append(f"layer 0 must contain exactly one set, found {len(family.sets[0])}")

    for layer, layer_sets in enumerate(family.sets):
        expected = family.sets_per_layer(layer)
        if len(layer_sets) != expected:
            violations.append(
                f"layer {layer} has {len(layer_sets)} sets, branching implies {expected}"
            )
        concat = np.concatenate([np.asarray(s) for s in layer_sets]) if layer_sets else np.array([], dtype=np.int64)
        uniq, counts = np.unique(concat, return_counts=True)
        dup = uniq[counts > 1]
        for q in dup[:10]:
            owners = [d for d, s in enumerate(layer_sets) if q in s]
            violations.append(
                f"layer {layer}: query {int(q)} appears in sets {owners} (disjointness)"
            )
        missing = np.setdiff1d(all_queries, uniq, assume_unique=True)
        if missing.size:
            violations.append(
                f"layer {layer}: {missing.size} queries missing from the union "
                f"(first: {int(missing[0])})"
            )
        extra = np.setdiff1d(uniq, all_queries, assume_unique=True)
        if extra.size:
            violations.append(f"layer {layer}: unknown query ids present (first: {int(extra[0])})")

    # Nesting: every deeper set must be inside exactly one shallower set.
    for hi in range(len(family.sets)):
        owner_of = {}
        for a, s in enumerate(family.sets[hi]):
            for q in np.asarray(s):
                owner_of[int(q)] = a
        for lo in range(hi + 1, len(family.sets)):
            for b, s in enumerate(family.sets[lo]):
                owners = {owner_of.get(int(q)) for q in np.asarray(s)}
                owners.discard(None)
                if len(owners) > 1:
                    violations.append(
                        f"set ({lo},{b}) straddles layer-{hi} sets {sorted(owners)} (nesting)"
                    )
    return violations
