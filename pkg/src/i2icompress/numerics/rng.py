"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which builds a
``numpy.random.Generator`` on PCG64 from a 64-bit seed obtained by hashing
``(parent_seed, *labels)`` with BLAKE2b. Streams are therefore independent of
the order in which they are created, so per-sample noise does not depend on
batch composition or evaluation order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    key = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
