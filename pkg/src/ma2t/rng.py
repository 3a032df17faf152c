"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by
``SeedSequence([seed, purpose, *extra])``. Uniform doubles are built from the
raw 64-bit words as ``(word >> 11) * 2**-53`` and normals come from the
Box-Muller transform, so the values depend only on the Philox bit stream and
not on numpy's higher-level sampling routines.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import ContractError

PURPOSES = {
    "data": 1,
    "init": 2,
    "attack": 3,
    "shuffle": 4,
    "corruption": 5,
    "sim": 6,
    "universal": 7,
    "test": 8,
}

_TWO_POW_M53 = 2.0 ** -53


def _shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)


class Stream:
    """A deterministic source of uniform / normal / integer draws."""

    def __init__(self, seed: int, purpose: str = "test", *extra: int):
        if purpose not in PURPOSES:
            raise ContractError(f"unknown stream purpose {purpose!r}")
        entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, PURPOSES[purpose]]
        entropy += [int(e) & 0xFFFFFFFFFFFFFFFF for e in extra]
        self._bitgen = np.random.Philox(np.random.SeedSequence(entropy))

    def _unit(self, n: int) -> np.ndarray:
        raw = self._bitgen.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        if not low < high:
            raise ContractError("uniform requires low < high")
        shape = _shape(shape)
        u = self._unit(int(np.prod(shape)))
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if not std > 0:
            raise ContractError("normal requires std > 0")
        shape = _shape(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._unit(m)  # (0, 1], keeps log finite
        u2 = self._unit(m)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return (mean + std * z[:n]).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if not low < high:
            raise ContractError("integers requires low < high")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def poisson(self, rates: np.ndarray) -> np.ndarray:
        """Poisson draws by inversion of the CDF at one uniform per rate."""
        rates = np.asarray(rates, dtype=np.float64)
        u = self.uniform(rates.shape)
        out = np.zeros(rates.shape)
        positive = rates > 0
        out[positive] = stats.poisson.ppf(u[positive], rates[positive])
        return out

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; stable sort keeps ties deterministic
        return np.argsort(self.uniform((n,)), kind="stable")


def seeded_random(seed: int, shape, dist: str = "uniform", a: float = 0.0, b: float = 1.0,
                  purpose: str = "test") -> np.ndarray:
    """Draw a tensor from ``uniform(a, b)`` or ``normal(a, b)`` (mean, std)."""
    stream = Stream(seed, purpose)
    if dist == "uniform":
        return stream.uniform(shape, a, b)
    if dist == "normal":
        return stream.normal(shape, a, b)
    raise ContractError(f"unknown distribution {dist!r}")
