import math

import numpy as np
import pytest

from stochff.mcoracle import mc_max, mc_relu, stream


def test_relu_standard_normal_target():
    est = mc_relu(0.0, 1.0, 0.0, 10**6, seed=42)
    assert abs(est.mean - 0.3989422804014327) <= 4 * est.std_error_mean
    assert abs(est.variance - (0.5 - 1 / (2 * math.pi))) <= 4 * est.std_error_variance


def test_relu_degenerate_is_exact():
    est = mc_relu(5.0, 0.0, 0.0, 100, seed=3)
    assert (est.mean, est.variance) == (5.0, 0.0)
    assert est.std_error_mean == 0.0


def test_relu_reproducible():
    a = mc_relu(0.3, 2.0, 1.0, 10_000, seed=11)
    b = mc_relu(0.3, 2.0, 1.0, 10_000, seed=11)
    assert a == b
    assert a != mc_relu(0.3, 2.0, 1.0, 10_000, seed=12)


def test_estimate_fields():
    est = mc_relu(1.0, 1.0, 0.0, 5000, seed=1)
    assert est.samples == 5000 and est.seed == 1
    assert est.std_error_mean == pytest.approx(math.sqrt(est.variance / est.samples), rel=1e-14)


def test_bad_arguments():
    with pytest.raises(ValueError):
        mc_relu(0, -1, 0, 10, 0)
    with pytest.raises(ValueError):
        mc_relu(0, 1, 0, 0, 0)
    with pytest.raises(ValueError):
        mc_max([], 10, 0)
    with pytest.raises(ValueError):
        mc_max([(0, 1), (0, -1)], 10, 0)


def test_max_standard_normals_target():
    est = mc_max([(0.0, 1.0), (0.0, 1.0)], 10**6, seed=42)
    assert abs(est.mean - 1 / math.sqrt(math.pi)) <= 4 * est.std_error_mean


def test_max_degenerate_is_exact():
    est = mc_max([(10.0, 0.0), (0.0, 0.0)], 1000, seed=0)
    assert (est.mean, est.variance) == (10.0, 0.0)


def test_max_nine_inputs():
    # max of 9 iid N(0,1): mean 1.4850628...
    est = mc_max([(0.0, 1.0)] * 9, 400_000, seed=9)
    assert abs(est.mean - 1.4850628972) <= 4 * est.std_error_mean


def test_se_shrinks_by_sqrt2():
    for seed in (1, 2, 3):
        a = mc_relu(0.5, 2.0, 0.0, 200_000, seed)
        b = mc_relu(0.5, 2.0, 0.0, 400_000, seed)
        assert a.std_error_mean / b.std_error_mean == pytest.approx(math.sqrt(2), rel=0.10)


def test_chunked_accumulation_matches_direct():
    # more samples than one accumulation chunk
    n = 600_000
    est = mc_relu(0.2, 1.5, 0.0, n, seed=5)
    x = np.maximum(0.2 + math.sqrt(1.5) * stream(5).standard_normal(n), 0.0)
    assert est.mean == pytest.approx(x.mean(), rel=1e-12)
    assert est.variance == pytest.approx(x.var(), rel=1e-10)


def test_streams_independent():
    n = 10**6
    a = stream(77, 0).standard_normal(n)
    b = stream(77, 1).standard_normal(n)
    prod = a * b
    cov, se = prod.mean() - a.mean() * b.mean(), prod.std() / math.sqrt(n)
    assert abs(cov) <= 4 * se


def test_streams_disjoint():
    a = stream(5, 0).standard_normal(1000)
    b = stream(5, 1).standard_normal(1000)
    assert not np.intersect1d(a, b).size
