"""Labeled seed derivation so every pipeline stage can be rerun on its own."""

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a child seed from a master seed and a path of labels.

    The same (seed, labels) always yields the same 63-bit integer, independent
    of call order elsewhere in the run.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big") >> 1


def make_rng(seed: int, *labels: object) -> np.random.Generator:
    """Return a numpy Generator seeded from derive_seed(seed, *labels)."""
    return np.random.default_rng(derive_seed(seed, *labels))
