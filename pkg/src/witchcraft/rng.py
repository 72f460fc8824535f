"""Seeded, splittable random streams.

Every random draw an attack makes comes from a generator keyed by
``(master seed, example index, *extra keys)``. Results therefore never depend
on batch composition, chunking, or how many workers share the work.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

__all__ = ["substream", "substreams"]


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one ``(seed, *keys)`` coordinate. Keys must be non-negative ints."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def substreams(seed: int, indices: Iterable[int], *keys: int) -> list[np.random.Generator]:
    return [substream(seed, int(i), *keys) for i in indices]
