"""Shared plumbing: error types, deterministic seeding, stable hashes."""

from __future__ import annotations

import hashlib

import numpy as np


class UsageError(Exception):
    """Bad CLI usage, bad config value, or an argument contract violation."""


class DataError(Exception):
    """Corpus or checkpoint file that cannot be parsed."""


class TrainingError(Exception):
    """Training diverged or failed to reach a required gate."""


# CLI exit codes for the error classes above.
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


def stable_hash64(*parts) -> int:
    """Deterministic 64-bit hash of a tuple of ints/strings.

    Independent of PYTHONHASHSEED, stable across runs and platforms. Used to
    derive per-example seeds and split assignments.
    """
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        else:
            raise TypeError(f"unhashable seed part: {p!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    """Generator seeded deterministically from a tuple of ints/strings."""
    return np.random.Generator(np.random.PCG64(stable_hash64(*parts)))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
