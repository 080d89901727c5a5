"""Deterministic RNG substreams.

All randomness in the package flows from one root seed. Each consumer
(splitting, weight init, batch shuffling, synthesis, ...) gets its own
substream derived from the root seed plus string/int labels, so adding or
reordering consumers never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(labels: tuple) -> list[int]:
    digest = hashlib.sha256(repr(labels).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *labels) -> np.random.Generator:
    """A generator seeded by (seed, labels), stable across runs and platforms."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *_label_words(labels)])))
