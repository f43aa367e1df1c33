"""Dense float64 activations and the paired (mean, variance) tensor.

Activations are plain ``numpy.ndarray`` objects of dtype float64 laid out
row-major, channel-major for images: ``(channels, height, width)`` or flat
``(n,)``.  :class:`MomentTensor` pairs two such arrays and is the carrier of
every stochastic activation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised for degenerate or mismatched tensor shapes."""


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (1, 3):
        raise ShapeError(f"activation shape must be flat or (C, H, W), got {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


def tensor_new(dims: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Return a new activation tensor of the given shape filled with ``fill``."""
    return np.full(check_shape(dims), fill, dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a finite float64 activation array."""
    arr = np.asarray(x, dtype=DTYPE)
    check_shape(arr.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class MomentTensor:
    """Per-element Gaussian moments of an activation.

    The arrays may carry a leading batch axis internally; public entry points
    work on single activations.
    """

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=DTYPE)
        var = np.asarray(self.variance, dtype=DTYPE)
        if mean.shape != var.shape:
            raise ShapeError(f"mean shape {mean.shape} != variance shape {var.shape}")
        if mean.size == 0:
            raise ShapeError("empty moment tensor")
        if np.any(var < 0):
            raise ValueError("variance must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def nbytes(self) -> int:
        return self.mean.nbytes + self.variance.nbytes


def lift_to_moments(x, sigma2: float) -> MomentTensor:
    """Model every element of ``x`` as N(x, sigma2) with a shared noise power."""
    if not sigma2 >= 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    mean = np.asarray(x, dtype=DTYPE)
    return MomentTensor(mean, np.full(mean.shape, sigma2, dtype=DTYPE))
