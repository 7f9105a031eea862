"""Reproducible random streams on xoshiro256++.

Seeds are expanded to the 256-bit state with splitmix64, the seeding
procedure recommended by the generator's authors. Doubles use the top 53
bits of each output; normals use Box-Muller on consecutive pairs.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

_MASK64 = (1 << 64) - 1
_INV53 = 1.0 / (1 << 53)


def splitmix64(seed: int, n: int) -> list[int]:
    out = []
    x = seed & _MASK64
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


class Rng:
    """xoshiro256++ stream. Identical seeds give identical streams everywhere."""

    def __init__(self, seed: int = 0):
        self.state = np.array(splitmix64(int(seed), 4), dtype=np.uint64)
        if not self.state.any():
            self.state[0] = 1

    @classmethod
    def from_state(cls, state) -> "Rng":
        rng = cls.__new__(cls)
        rng.state = np.array(state, dtype=np.uint64)
        return rng

    def next_u64(self, n: int) -> np.ndarray:
        return kernels.xoshiro_fill(self.state, int(n))

    def spawn(self) -> "Rng":
        """Child stream seeded from the parent's next output."""
        return Rng(int(self.next_u64(1)[0]))

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return (low + (high - low) * u).reshape(shape).astype(dtype, copy=False)

    def open_uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform on the open interval (0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.next_u64(n) >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
        return u.reshape(shape).astype(dtype, copy=False)

    def normal(self, shape=(), mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.open_uniform((2, m))
        r = np.sqrt(-2.0 * np.log(u[0]))
        theta = 2.0 * math.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape).astype(dtype, copy=False)

    def truncated_normal(self, shape=(), std=1.0, bound=2.0, dtype=np.float64) -> np.ndarray:
        """Normal samples rejected and redrawn outside ``±bound`` standard deviations."""
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(0)
        while out.size < n:
            z = self.normal(max(n - out.size, 1) * 2)
            out = np.concatenate([out, z[np.abs(z) <= bound]])
        return (std * out[:n]).reshape(shape).astype(dtype, copy=False)

    def gumbel(self, shape=(), dtype=np.float64) -> np.ndarray:
        u = self.open_uniform(shape)
        return (-np.log(-np.log(u))).astype(dtype, copy=False)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high) by multiply-shift on 53-bit doubles."""
        if size is None:
            return int(self.uniform(()) * high)
        return np.floor(self.uniform(size) * high).astype(np.int64)
