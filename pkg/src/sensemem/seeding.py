"""Named, reproducible random streams.

Every stochastic choice in the engine draws from a stream keyed by
(seed, *tags), so any value is recomputable from the run seed alone and
adding or removing one component never shifts another component's stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_hash(tag: object) -> int:
    return zlib.crc32(str(tag).encode("utf-8"))


def rng_for(seed: int, *tags: object) -> np.random.Generator:
    """Independent generator for the stream named by ``tags``."""
    entropy = [int(seed)] + [_tag_hash(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
