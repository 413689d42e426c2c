"""Keyed random streams.

Every random decision in a run is drawn from a stream identified by
``(master_seed, round, purpose)``. Streams are built from
:class:`numpy.random.SeedSequence` with the round and purpose folded into the
spawn key, so any single round can be replayed without touching the others.
"""

from __future__ import annotations

import numpy as np

MATCHING = 1
ORIENTATION = 2
URN = 3
EDGE_ROUNDING = 4
VERTEX_LEFTOVER = 5
INITIAL = 6
REPLICA = 7
GRAPH = 8

_TAGS = {
    "matching": MATCHING,
    "orientation": ORIENTATION,
    "urn": URN,
    "edge_rounding": EDGE_ROUNDING,
    "vertex_leftover": VERTEX_LEFTOVER,
    "initial": INITIAL,
    "replica": REPLICA,
    "graph": GRAPH,
}


def _tag(purpose) -> int:
    if isinstance(purpose, str):
        return _TAGS[purpose]
    return int(purpose)


def stream(seed: int, t: int, purpose) -> np.random.Generator:
    """Generator for round ``t`` and the given purpose under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(t), _tag(purpose)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit child seed, e.g. one per replica."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(REPLICA, *map(int, key)))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))
