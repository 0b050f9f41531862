"""Named, independent random streams derived from one run seed.

Every consumer (a link's traffic, a link's exploration, a slice's replay
sampling, ...) gets its own stream keyed by string labels, so adding or
removing one consumer never perturbs the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels: str | int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [label_key(l) for l in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def philox_key(seed: int, *labels: str | int) -> int:
    """128-bit-safe integer key for a counter-based Philox stream."""
    entropy = [int(seed) & 0xFFFFFFFF] + [label_key(l) for l in labels]
    words = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


def counter_normal(key: int, counter: int) -> float:
    """Standard normal draw that depends only on ``(key, counter)``."""
    gen = np.random.Generator(np.random.Philox(key=key, counter=int(counter)))
    return float(gen.standard_normal())
