"""Seeded, counter-based random streams.

Uniforms come from numpy's Philox4x64 bit generator; normals are produced by
Box-Muller on top of those uniforms so the sample stream depends only on the
Philox output. Substreams are keyed by tuples (e.g. ``("noise", it, view)``),
which lets any draw be reproduced without replaying the ones before it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox4x64-10/box-muller"


def _key(seed: int, keys: tuple) -> np.ndarray:
    text = repr((int(seed),) + tuple(keys)).encode()
    digest = hashlib.sha256(text).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


@dataclass
class RngState:
    seed: int
    keys: tuple = ()
    algorithm: str = ALGORITHM
    _gen: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.keys)))

    def substream(self, *keys) -> "RngState":
        return RngState(self.seed, self.keys + tuple(keys))

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        # 1 - U maps [0, 1) onto (0, 1], keeping log finite
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:count].reshape(shape).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def get_state(self) -> dict:
        return {"seed": int(self.seed), "keys": list(self.keys), "algorithm": self.algorithm,
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        rng = cls(state["seed"], tuple(state["keys"]))
        if state.get("algorithm", ALGORITHM) != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {state['algorithm']!r}")
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
