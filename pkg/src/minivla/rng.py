"""Named, splittable random streams on a counter-based core.

Every stochastic call site in the stack takes an explicit ``Stream``.
A stream is identified by a 128-bit key; child streams are derived by
hashing the parent key with a label, so two runs that build the same
stream tree draw identical values regardless of call order. Draw
methods instantiate a fresh Philox generator each call: calling
``normal`` twice on the same stream returns the same values. Distinct
draws therefore always go through distinct child labels.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Stream"]


def _derive_key(parent: bytes, label: str) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(parent)
    h.update(label.encode("utf-8"))
    return h.digest()


class Stream:
    """A deterministic random stream; split with :meth:`child`."""

    __slots__ = ("key",)

    def __init__(self, seed: int | bytes):
        if isinstance(seed, bytes):
            if len(seed) != 16:
                raise ValueError(f"stream key must be 16 bytes, got {len(seed)}")
            self.key = seed
        else:
            self.key = _derive_key(b"minivla-root", str(int(seed)))

    def child(self, *labels: str | int) -> "Stream":
        key = self.key
        for label in labels:
            key = _derive_key(key, str(label))
        return Stream(key)

    def generator(self) -> np.random.Generator:
        key = np.frombuffer(self.key, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    # Convenience draws. Each call creates a fresh generator, so the
    # result is a pure function of (key, arguments).

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def truncated_normal(self, shape, std: float, clip: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to +-clip standard deviations."""
        gen = self.generator()
        out = gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > clip
        # Resample out-of-range entries; bounded loop keeps this deterministic.
        while bad.any():
            out[bad] = gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > clip
        return out * std

    def __repr__(self) -> str:
        return f"Stream({self.key.hex()})"
