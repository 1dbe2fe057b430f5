"""Seedable, splittable random streams on top of the Philox counter engine.

Child streams are derived from (seed, *tokens) alone, so per-image or
per-epoch noise is reproducible no matter in which order streams are
created or consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token_int(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(token).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RandomStream:
    """One independent Philox stream plus a stable derivation rule."""

    def __init__(self, seed, _entropy: tuple[int, ...] | None = None):
        if _entropy is None:
            _entropy = (_token_int(seed),)
        self._entropy = _entropy
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(list(_entropy))))

    def derive(self, *tokens) -> "RandomStream":
        """Fresh stream determined only by this stream's seed and the tokens."""
        ints = tuple(_token_int(t) for t in tokens)
        return RandomStream(None, _entropy=self._entropy + ints)

    # thin pass-throughs; the Generator API is the real surface
    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self) -> str:
        return f"RandomStream(entropy={self._entropy})"
