"""Monte-Carlo estimates of the true output moments of the stochastic layers.

Sampling uses numpy's Philox, a counter-based generator: input ``i`` of a
draw reads from the key-``seed`` stream jumped ``i`` times, so streams are
disjoint slices of one counter space and never share state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_CHUNK = 1 << 18


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    variance: float
    std_error_mean: float
    std_error_variance: float
    samples: int
    seed: int


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for sub-stream ``index`` of ``seed``."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1))
    if index:
        bitgen = bitgen.jumped(index)
    return np.random.Generator(bitgen)


class _Accumulator:
    """Streaming central moments up to order four (Chan/Pebay merge)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.m3 = 0.0
        self.m4 = 0.0

    def add(self, y: np.ndarray):
        nb = y.size
        mb = float(np.mean(y))
        d = y - mb
        d2 = d * d
        m2b = float(np.sum(d2))
        m3b = float(np.dot(d2, d))
        m4b = float(np.dot(d2, d2))
        if self.n == 0:
            self.n, self.mean, self.m2, self.m3, self.m4 = nb, mb, m2b, m3b, m4b
            return
        na, n = self.n, self.n + nb
        delta = mb - self.mean
        self.m4 = (self.m4 + m4b
                   + delta**4 * na * nb * (na * na - na * nb + nb * nb) / n**3
                   + 6 * delta**2 * (na * na * m2b + nb * nb * self.m2) / n**2
                   + 4 * delta * (na * m3b - nb * self.m3) / n)
        self.m3 = (self.m3 + m3b + delta**3 * na * nb * (na - nb) / n**2
                   + 3 * delta * (na * m2b - nb * self.m2) / n)
        self.m2 = self.m2 + m2b + delta**2 * na * nb / n
        self.mean = self.mean + delta * nb / n
        self.n = n

    def estimate(self, seed: int) -> MCEstimate:
        n = self.n
        var = self.m2 / n
        m4 = self.m4 / n
        return MCEstimate(
            mean=self.mean,
            variance=var,
            std_error_mean=math.sqrt(var / n),
            std_error_variance=math.sqrt(max(m4 - var * var, 0.0) / n),
            samples=n,
            seed=seed,
        )


def _chunks(samples: int):
    done = 0
    while done < samples:
        size = min(_CHUNK, samples - done)
        yield size
        done += size


def mc_relu(mu: float, var: float, theta: float, samples: int, seed: int) -> MCEstimate:
    """Sample ``max(X, theta)`` for ``X ~ N(mu, var)``."""
    if var < 0:
        raise ValueError("variance must be nonnegative")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    gen = stream(seed)
    sd = math.sqrt(var)
    acc = _Accumulator()
    for size in _chunks(samples):
        x = mu + sd * gen.standard_normal(size)
        acc.add(np.maximum(x, theta))
    return acc.estimate(seed)


def mc_max(moments: Sequence[tuple[float, float]], samples: int, seed: int) -> MCEstimate:
    """Sample the max of independent normals given as ``(mean, variance)`` pairs."""
    if len(moments) == 0:
        raise ValueError("need at least one input distribution")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if any(v < 0 for _, v in moments):
        raise ValueError("variance must be nonnegative")
    gens = [stream(seed, i) for i in range(len(moments))]
    acc = _Accumulator()
    for size in _chunks(samples):
        y = None
        for (m, v), gen in zip(moments, gens):
            x = m + math.sqrt(v) * gen.standard_normal(size)
            y = x if y is None else np.maximum(y, x)
        acc.add(y)
    return acc.estimate(seed)

