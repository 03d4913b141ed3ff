"""Seed derivation for independent, order-free random streams.

Every parallelizable loop derives the stream of item ``i`` from
``(master_seed, i)`` so results do not depend on worker count or order.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def derive_seed(master_seed, *keys):
    """Hash ``master_seed`` and integer ``keys`` into a 64-bit seed."""
    entropy = [int(master_seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError("seeds and keys must be non-negative integers")
    lo, hi = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def make_rng(master_seed, *keys):
    """Return a ``numpy.random.Generator`` for the derived stream."""
    return np.random.default_rng(derive_seed(master_seed, *keys))


def ordered_map(fn, items, threads=1):
    """Map ``fn`` over ``items``, preserving order, on up to ``threads`` workers."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
