"""Gaussian moment machinery for the stochastic layers.

Everything here is elementwise on numpy arrays (scalars work too).  The two
nonlinear moment rules are

* the censored ReLU ``Y = max(X, theta)`` of a normal ``X`` (a left-censored
  normal: point mass at ``theta`` plus the upper tail), and
* the max of two independent normals, used pairwise to fold a pooling window.

Near-degenerate inputs (standard deviation below ``sigma_floor``) take the
point-mass limit instead of dividing by a vanishing scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Past this standard score 1 - Phi(alpha) loses too much to divide by.
MILLS_SWITCH = 8.0
_MILLS_CF_DEPTH = 60


@dataclass(frozen=True)
class RegularizationConstants:
    eps_denominator: float = 1e-20
    sigma_floor: float = 1e-10

    def __post_init__(self):
        if not (self.eps_denominator > 0 and self.sigma_floor > 0):
            raise ValueError("regularization constants must be strictly positive")


DEFAULT_REG = RegularizationConstants()


class GaussMoments(NamedTuple):
    mean: float
    variance: float


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


def std_normal_cdf(x):
    out = ndtr(np.asarray(x, dtype=np.float64))
    return out if np.ndim(out) else float(out)


def _mills_cf(alpha):
    # phi/(1-Phi) = a + 1/(a + 2/(a + 3/(a + ...))), evaluated bottom-up.
    t = alpha.copy()
    for k in range(_MILLS_CF_DEPTH, 0, -1):
        t = alpha + k / t
    return t


def inverse_mills(alpha, reg: RegularizationConstants = DEFAULT_REG):
    """Inverse Mills ratio ``phi(a) / (1 - Phi(a))``.

    Uses the epsilon-guarded quotient up to ``MILLS_SWITCH`` and a continued
    fraction beyond it, where the upper tail mass underflows.
    """
    a = np.asarray(alpha, dtype=np.float64)
    low = np.minimum(a, MILLS_SWITCH)
    direct = std_normal_pdf(low) / np.maximum(ndtr(-low), reg.eps_denominator)
    high = np.maximum(a, MILLS_SWITCH)
    out = np.where(a <= MILLS_SWITCH, direct, _mills_cf(high))
    return out if out.ndim else float(out)


def censored_relu_arrays(mu, var, theta=0.0, reg: RegularizationConstants = DEFAULT_REG):
    """Elementwise moments of ``max(X, theta)`` for ``X ~ N(mu, var)``.

    Returns ``(mean, variance)`` arrays broadcast to the inputs' shape.
    """
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    sigma = np.sqrt(var)
    degenerate = sigma < reg.sigma_floor
    s = np.where(degenerate, 1.0, sigma)
    alpha = (theta - mu) / s
    cdf = ndtr(alpha)
    tail = ndtr(-alpha)
    lam = inverse_mills(alpha, reg)
    delta = lam * (lam - alpha)
    mean = theta * cdf + (mu + s * lam) * tail
    variance = var * tail * ((1.0 - delta) + (alpha - lam) ** 2 * cdf)
    mean = np.where(degenerate, np.maximum(mu, theta), mean)
    variance = np.where(degenerate, 0.0, np.maximum(variance, 0.0))
    return mean, variance


def censored_relu_moments(mu: float, var: float, theta: float = 0.0,
                          reg: RegularizationConstants = DEFAULT_REG) -> GaussMoments:
    m, v = censored_relu_arrays(mu, var, theta, reg)
    return GaussMoments(float(m), float(v))


def pairwise_max_arrays(mu_a, var_a, mu_b, var_b, reg: RegularizationConstants = DEFAULT_REG):
    """Elementwise moments of ``max(A, B)`` for independent normals A and B.

    Means are evaluated relative to their midpoint (max commutes with a
    shift) to keep ``E[Y^2] - E[Y]^2`` from cancelling on large offsets.
    When the combined scale is below ``sigma_floor`` the larger mean wins
    and keeps its own variance; ties go to ``a``.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    var_a = np.asarray(var_a, dtype=np.float64)
    var_b = np.asarray(var_b, dtype=np.float64)
    if np.any(var_a < 0) or np.any(var_b < 0):
        raise ValueError("variance must be nonnegative")
    theta = np.sqrt(var_a + var_b)
    degenerate = theta < reg.sigma_floor
    t = np.where(degenerate, 1.0, theta)
    shift = 0.5 * (mu_a + mu_b)
    ma = mu_a - shift
    mb = mu_b - shift
    alpha = (ma - mb) / t
    cdf_pos = ndtr(alpha)
    cdf_neg = ndtr(-alpha)
    pdf = std_normal_pdf(alpha)
    mean = ma * cdf_pos + mb * cdf_neg + t * pdf
    second = (var_a + ma * ma) * cdf_pos + (var_b + mb * mb) * cdf_neg + (ma + mb) * t * pdf
    variance = np.maximum(second - mean * mean, 0.0)
    a_wins = mu_a >= mu_b
    mean = np.where(degenerate, np.where(a_wins, mu_a, mu_b), mean + shift)
    variance = np.where(degenerate, np.where(a_wins, var_a, var_b), variance)
    return mean, variance


def pairwise_max_moments(a: GaussMoments, b: GaussMoments,
                         reg: RegularizationConstants = DEFAULT_REG) -> GaussMoments:
    m, v = pairwise_max_arrays(a[0], a[1], b[0], b[1], reg)
    return GaussMoments(float(m), float(v))
