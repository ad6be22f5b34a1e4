"""Purpose-keyed deterministic random streams.

Every random draw in a run comes from a stream addressed by
``(run_seed, purpose, *indices)``.  Streams are independent of the order
in which they are created, so generation can be reorganized or
parallelized without changing any output.
"""

from __future__ import annotations

import numpy as np

# Stable numeric tags for stream purposes; values are part of the
# reproducibility contract and must never be reordered.
_PURPOSES = {
    "params": 1,
    "leaves": 2,
    "bidder_features": 3,
    "tcpa": 4,
    "query_node": 5,
    "query_leaf": 6,
    "value_noise": 7,
    "cost": 8,
    "beta": 9,
    "reserve": 10,
}


def substream(run_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator for the stream addressed by (run_seed, purpose, indices)."""
    key = (_PURPOSES[purpose],) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(run_seed), spawn_key=key))


def run_seed_for(master_seed: int, run_index: int) -> int:
    """Per-run seed derived from the experiment master seed."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(0, int(run_index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
