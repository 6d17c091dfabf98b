"""Portable random draws for the simulator.

Every stream is a Philox4x64-10 counter-based generator keyed by the scenario
seed, with the counter prefixed by ``(stream, frame)`` so frames can be drawn
independently and in any order. Only uniform doubles are taken from the bit
generator, ``(u64 >> 11) * 2**-53``, and the derived distributions use
textbook algorithms that are simple to port:

* Gaussian: Box-Muller, cosine branch only (two uniforms per variate,
  ``u1`` mapped to ``(0, 1]`` as ``1 - u1``).
* Poisson: inversion by sequential search of the CDF, one uniform per draw.
  Rates above ``MAX_POISSON_RATE`` are rejected because ``exp(-rate)``
  underflows.
"""

from __future__ import annotations

import math

import numpy as np

MAX_POISSON_RATE = 700.0
_MASK64 = (1 << 64) - 1


class Stream:
    def __init__(self, seed: int, stream: int, frame: int = 0):
        key = int(seed) & _MASK64
        counter = [0, 0, int(frame) & _MASK64, int(stream) & _MASK64]
        self._gen = np.random.Generator(np.random.Philox(key=key, counter=counter))

    def uniform(self, size=None):
        """Doubles in [0, 1)."""
        return self._gen.random(size)

    def uniform_range(self, lo: float, hi: float, size=None):
        return lo + (hi - lo) * self.uniform(size)

    def normal(self, sigma: float, size: int) -> np.ndarray:
        u1 = 1.0 - self.uniform(size)
        u2 = self.uniform(size)
        return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def poisson(self, rate: float) -> int:
        if rate < 0.0 or rate > MAX_POISSON_RATE:
            raise ValueError(f"Poisson rate {rate} outside [0, {MAX_POISSON_RATE}]")
        if rate == 0.0:
            return 0
        u = float(self.uniform())
        k = 0
        p = math.exp(-rate)
        cdf = p
        while u >= cdf:
            k += 1
            p *= rate / k
            cdf += p
            if p == 0.0:
                break
        return k

    def integers(self, n: int, size: int) -> np.ndarray:
        """Indices in [0, n) via ``floor(u * n)``."""
        return np.minimum((self.uniform(size) * n).astype(np.int64), n - 1)
