"""Counter-based, path-keyed random number streams.

Every stream is identified by (root_seed, path) where path is an ordered
tuple of (label, index) pairs. The Philox key is derived by hashing that
identity, so two streams with the same path produce the same draws no
matter when or in which order they were forked. This is what makes
batch-parallel execution reproducible: work items consume their own
streams instead of racing on a shared one.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _derive_key(root_seed: int, path: tuple[tuple[str, int], ...]) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(root_seed).to_bytes(8, "little", signed=False))
    for label, index in path:
        name = label.encode("utf-8")
        h.update(len(name).to_bytes(2, "little"))
        h.update(name)
        h.update(int(index).to_bytes(8, "little", signed=False))
    d = h.digest()
    return np.frombuffer(d, dtype=np.uint64)


class RngStream:
    """Forkable random stream backed by a Philox counter generator."""

    __slots__ = ("root_seed", "path", "_gen")

    def __init__(self, root_seed: int, path: tuple[tuple[str, int], ...] = ()):
        if not 0 <= int(root_seed) < 2**64:
            raise ValueError(f"root_seed must fit in u64, got {root_seed}")
        self.root_seed = int(root_seed)
        self.path = tuple((str(l), int(i)) for l, i in path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.root_seed, self.path)))

    def fork(self, label: str, index: int = 0) -> "RngStream":
        """Child stream keyed by (label, index); independent of fork order."""
        return RngStream(self.root_seed, self.path + ((label, index),))

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        trail = "/".join(f"{l}{i}" for l, i in self.path)
        return f"RngStream(seed={self.root_seed}, path={trail or '<root>'})"
