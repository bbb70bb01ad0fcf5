"""Seeded, platform-independent random stream.

The generator is xoshiro256** whose 256-bit state is filled by four successive
splitmix64 outputs of the 64-bit user seed. Call-order contract:

* ``uniform`` maps one raw draw ``x`` to ``(x >> 11) * 2**-53`` in ``[0, 1)``.
* ``gaussian(rows, cols)`` fills ``rows * cols`` entries in row-major order from
  ``ceil(n / 2)`` Box-Muller pairs. Each pair consumes two uniforms ``u1, u2``
  (in that order) and yields ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with
  ``r = sqrt(-2*ln(1 - u1))``. An odd tail discards the second value; nothing is
  cached between calls.
* ``split`` consumes one raw draw ``d`` and seeds the child with
  ``splitmix64(d)``.

A ``RngState`` is single-owner. Hand each worker its own child from ``split``.
"""

from __future__ import annotations

import math

import numpy as np

from dpvger.errors import NumericError, NumericErrorCode

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_NEG_53 = 2.0**-53


def splitmix64(value: int) -> int:
    """One splitmix64 output for a state of ``value`` (state advanced once)."""
    z = (value + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _seed_state(seed: int) -> tuple[int, int, int, int]:
    state = seed & _MASK
    words = []
    for _ in range(4):
        words.append(splitmix64(state))
        state = (state + _GOLDEN) & _MASK
    return words[0], words[1], words[2], words[3]


class RngState:
    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK
        self._s = list(_seed_state(seed))

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int]) -> "RngState":
        """Resume a stream from raw xoshiro256** state words."""
        if not any(state):
            raise NumericError(
                "xoshiro256** state must not be all zero",
                code=NumericErrorCode.INVALID_ARGUMENT,
            )
        rng = cls(0)
        rng._s = [word & _MASK for word in state]
        return rng

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"

    @property
    def state(self) -> tuple[int, int, int, int]:
        return self._s[0], self._s[1], self._s[2], self._s[3]

    def next_u64(self) -> int:
        return self._raw(1)[0]

    def _raw(self, count: int) -> list[int]:
        s0, s1, s2, s3 = self._s
        out = [0] * count
        for i in range(count):
            x = (s1 * 5) & _MASK
            out[i] = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self) -> float:
        return (self._raw(1)[0] >> 11) * _TWO_NEG_53

    def uniforms(self, count: int) -> np.ndarray:
        raw = self._raw(count)
        return np.array([(x >> 11) * _TWO_NEG_53 for x in raw], dtype=np.float64)

    def gaussian(self, rows: int, cols: int) -> np.ndarray:
        if rows < 1 or cols < 1:
            raise NumericError(
                f"gaussian needs rows, cols >= 1, got ({rows}, {cols})",
                code=NumericErrorCode.INVALID_ARGUMENT,
            )
        return self.normal_vector(rows * cols).reshape(rows, cols)

    def normal_vector(self, count: int) -> np.ndarray:
        if count == 0:
            return np.zeros(0, dtype=np.float64)
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        values = np.empty((pairs, 2), dtype=np.float64)
        values[:, 0] = radius * np.cos(angle)
        values[:, 1] = radius * np.sin(angle)
        return values.reshape(-1)[:count].copy()

    def below(self, bound: int) -> int:
        """Unbiased integer in ``[0, bound)`` by rejection on the raw stream."""
        if bound <= 0:
            raise NumericError(
                f"bound must be positive, got {bound}",
                code=NumericErrorCode.INVALID_ARGUMENT,
            )
        limit = (_MASK + 1) - ((_MASK + 1) % bound)
        while True:
            x = self._raw(1)[0]
            if x < limit:
                return x % bound

    def permutation(self, count: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(count)``, drawing from the top index down."""
        order = list(range(count))
        for i in range(count - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.array(order, dtype=np.int64)

    def split(self) -> "RngState":
        return RngState(splitmix64(self._raw(1)[0]))


def gaussian(rng: RngState, rows: int, cols: int) -> np.ndarray:
    return rng.gaussian(rows, cols)
