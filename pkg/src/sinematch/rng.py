"""Deterministic random streams.

Every stochastic component draws from its own stream, derived from a
(master_seed, stream_id) pair. Streams are independent: consuming draws
from one never shifts another, which is what makes runs byte-reproducible
and lets e.g. the supervised-only reduction reuse the labeled-batch stream
untouched by the unlabeled pipeline.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(master_seed: int, stream_id: int) -> np.random.Generator:
    """Return the generator for stream `stream_id` under `master_seed`.

    The same pair always yields the same sequence; distinct stream ids
    yield statistically independent sequences.
    """
    entropy = (int(master_seed) & _MASK64, int(stream_id) & _MASK64)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream(master_seed: int, *ids: int) -> np.random.Generator:
    """Stream addressed by a path of ids, e.g. (seed, cell, chunk)."""
    entropy = (int(master_seed) & _MASK64,) + tuple(int(i) & _MASK64 for i in ids)
    return np.random.default_rng(np.random.SeedSequence(entropy))
