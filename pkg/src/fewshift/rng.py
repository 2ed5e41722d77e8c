"""Portable seeded random number generator (splitmix64 core).

Every stochastic choice in the package flows through this generator so
that a seed reproduces the identical stream on any platform.  The core
is counter-based: output i is a fixed 64-bit mix of seed + i * GOLDEN,
which lets batches be produced with vectorized uint64 arithmetic while
staying bit-identical to scalar draws.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(2**53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic uint64 stream with vectorized batch draws."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * np.uint64(_GOLDEN))

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def randint(self, bound: int) -> int:
        """Integer in [0, bound). Modulo bias is acceptable here."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) / _TWO53

    def gaussians(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller on uniform pairs.

        Consumes 2*ceil(n/2) raw outputs; for odd n the trailing sin
        branch is discarded, so draw sizes are part of the recipe.
        """
        pairs = (n + 1) // 2
        raw = self.u64(2 * pairs)
        # u1 in (0, 1] so the log is finite
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def unit_vectors(self, n: int, dim: int) -> np.ndarray:
        """n rows drawn uniformly on the unit sphere in R^dim."""
        v = self.gaussians(n * dim).reshape(n, dim)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return v / norms


def derive_seed(base: int, index: int) -> int:
    """Per-episode seed: base XOR episode index."""
    return (base ^ index) & 0xFFFFFFFFFFFFFFFF
