"""Seeded random number generation with stable sub-stream derivation.

Every stochastic component in this package draws from an `Rng`, a thin
wrapper around numpy's counter-based Philox generator.  The same seed and
the same call sequence always produce the same stream, bit for bit, across
processes and platforms.

Sub-streams are derived by hashing ``(seed, tag)`` with SHA-256, so adding a
new consumer of randomness never shifts the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng", "derive_seed"]

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, tag: str) -> int:
    """Map a (seed, purpose-tag) pair to a new 64-bit seed, stably."""
    digest = hashlib.sha256(
        (seed & _MASK64).to_bytes(8, "little") + tag.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random source (Philox counter-based generator)."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, tag: str) -> "Rng":
        """Independent sub-stream for one named purpose.

        Derivation is pure: it does not advance this generator's state.
        """
        return Rng(derive_seed(self.seed, tag))

    # -- draws (thin passthroughs to the underlying generator) --

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n_or_array):
        return self._gen.permutation(n_or_array)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def shuffle(self, array) -> None:
        self._gen.shuffle(array)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
