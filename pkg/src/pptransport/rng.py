"""Reproducible random streams.

Every stochastic routine takes a ``numpy.random.Generator``. Parallel Monte
Carlo work is split into substreams addressed by ``(seed, stream_id)`` so the
result does not depend on how chunks are scheduled.
"""

import os

import numpy as np


def substream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator for substream ``stream_id`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("a seed or Generator is required")
    return substream(rng)


def child_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` independent 63-bit seeds from ``rng`` for chunked work."""
    return rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)


def worker_count() -> int:
    """Worker cap from ``PPT_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PPT_THREADS", "1")))
    except ValueError:
        return 1
