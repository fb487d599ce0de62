"""Hierarchical seed derivation.

Every random stream in the package is derived from the single scenario seed
plus a path of labels, e.g. ``derive_rng(seed, "train", sat_key, round, epoch)``.
Strings are mapped to integers with CRC32 so the mapping is stable across
processes and Python versions; integers are used as-is. The resulting tuple
becomes the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, so adding
a new stream (or a new sweep point) never perturbs an existing one, and the
stream for a given path does not depend on execution order.
"""
import zlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        return int(label)
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"negative seed label {label}")
        return int(label)
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if isinstance(label, tuple):
        # flatten nested identifiers such as SatelliteId
        acc = 0
        for item in label:
            acc = zlib.crc32(str(_label_to_int(item)).encode(), acc)
        return acc
    raise TypeError(f"unsupported seed label type: {type(label).__name__}")


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    key = tuple(_label_to_int(label) for label in labels)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for the stream named by ``labels``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *labels)))


def derive_seed(seed: int, *labels) -> int:
    """Integer seed for APIs that take a seed rather than a generator."""
    return int(seed_sequence(seed, *labels).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
