"""Oracle batteries and invariant checks shared by ``stochff verify`` and the tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .gaussmath import DEFAULT_REG, RegularizationConstants, censored_relu_arrays, pairwise_max_arrays
from .mcoracle import mc_max, mc_relu
from .network import Model, PreprocessSpec, backward_input_gradient, preprocess, propagate_moments, run_det
from .tensorcore import lift_to_moments

# Sampling error of a Monte-Carlo estimate cannot resolve deviations below
# this, e.g. when every draw lands on the censoring point.
MC_ABS_FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _within(analytic, estimate, se, k=4.0):
    return abs(analytic - estimate) <= max(k * se, MC_ABS_FLOOR)


def relu_oracle_battery(n_cases: int = 200, samples: int = 10**6, seed: int = 2024,
                        reg: RegularizationConstants = DEFAULT_REG, relu=censored_relu_arrays) -> CheckResult:
    """Censored-ReLU moments vs sampling for random (mu, var, theta).

    mu ~ U(-5, 5), var log-uniform on [1e-4, 10], theta from {-1, 0, 1}.
    """
    rng = np.random.default_rng(seed)
    mus = rng.uniform(-5, 5, n_cases)
    vars_ = 10 ** rng.uniform(-4, 1, n_cases)
    thetas = rng.choice([-1.0, 0.0, 1.0], n_cases)
    failures, worst = [], 0.0
    for i, (mu, var, theta) in enumerate(zip(mus, vars_, thetas)):
        m, v = relu(mu, var, theta, reg)
        est = mc_relu(mu, var, theta, samples, seed + 1 + i)
        for what, a, e, se in (("mean", m, est.mean, est.std_error_mean),
                               ("var", v, est.variance, est.std_error_variance)):
            z = abs(a - e) / max(se, MC_ABS_FLOOR / 4)
            worst = max(worst, z)
            if not _within(a, e, se):
                failures.append((i, what, float(mu), float(var), float(theta), float(a), float(e), float(se)))
    return CheckResult("censored-relu-oracle", not failures,
                       f"{n_cases} cases, {samples} samples, worst |z|={worst:.2f}, failures={len(failures)}",
                       {"failures": failures, "worst_z": worst})


def max_oracle_battery(n_cases: int = 200, samples: int = 10**6, seed: int = 4048,
                       reg: RegularizationConstants = DEFAULT_REG) -> CheckResult:
    """Pairwise-max moments vs sampling for random independent normal pairs."""
    rng = np.random.default_rng(seed)
    params = np.column_stack([rng.uniform(-3, 3, n_cases), 10 ** rng.uniform(-4, 1, n_cases),
                              rng.uniform(-3, 3, n_cases), 10 ** rng.uniform(-4, 1, n_cases)])
    failures, worst = [], 0.0
    for i, (ma, va, mb, vb) in enumerate(params):
        m, v = pairwise_max_arrays(ma, va, mb, vb, reg)
        est = mc_max([(ma, va), (mb, vb)], samples, seed + 1 + i)
        for what, a, e, se in (("mean", m, est.mean, est.std_error_mean),
                               ("var", v, est.variance, est.std_error_variance)):
            worst = max(worst, abs(a - e) / max(se, MC_ABS_FLOOR / 4))
            if not _within(a, e, se):
                failures.append((i, what, float(a), float(e), float(se)))
    return CheckResult("pairwise-max-oracle", not failures,
                       f"{n_cases} cases, {samples} samples, worst |z|={worst:.2f}, failures={len(failures)}",
                       {"failures": failures, "worst_z": worst})


def fold_means(means, variances, sorted_mode: bool, reg: RegularizationConstants = DEFAULT_REG):
    """Folded max-mean of each row of ``(n_windows, n)`` arrays."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if sorted_mode:
        order = np.argsort(means, axis=-1, kind="stable")
        means = np.take_along_axis(means, order, axis=-1)
        variances = np.take_along_axis(variances, order, axis=-1)
    m, v = means[:, 0], variances[:, 0]
    for k in range(1, means.shape[1]):
        m, v = pairwise_max_arrays(m, v, means[:, k], variances[:, k], reg)
    return m


def sampled_max_means(means, variances, samples: int, seed: int):
    """``mc_max`` mean and its standard error for each window row."""
    ests = [mc_max(list(zip(m, v)), samples, seed + w) for w, (m, v) in enumerate(zip(means, variances))]
    return np.array([e.mean for e in ests]), np.array([e.std_error_mean for e in ests])


def fold_order_study(means, variances, samples: int = 20000, seed: int = 99,
                     reg: RegularizationConstants = DEFAULT_REG) -> dict:
    """Approximation error of sorted vs scan-order folds against sampled maxima."""
    truth, se = sampled_max_means(means, variances, samples, seed)
    err_sorted = np.abs(fold_means(means, variances, True, reg) - truth)
    err_plain = np.abs(fold_means(means, variances, False, reg) - truth)
    return {
        "n_windows": len(truth),
        "median_sorted": float(np.median(err_sorted)),
        "median_plain": float(np.median(err_plain)),
        "mean_sorted": float(np.mean(err_sorted)),
        "mean_plain": float(np.mean(err_plain)),
        "median_mc_se": float(np.median(se)),
    }


def random_windows(n_windows: int = 1000, size: int = 9, mean_range=(-2.0, 2.0), var_range=(1.0, 4.0),
                   seed: int = 5):
    rng = np.random.default_rng(seed)
    return (rng.uniform(*mean_range, (n_windows, size)), rng.uniform(*var_range, (n_windows, size)))


def fold_order_check(n_windows: int = 1000, samples: int = 20000, seed: int = 5) -> CheckResult:
    means, variances = random_windows(n_windows, seed=seed)
    study = fold_order_study(means, variances, samples, seed + 1)
    ok = study["median_sorted"] <= study["median_plain"]
    return CheckResult("sorted-fold-order", ok,
                       f"median |err| sorted={study['median_sorted']:.5f} plain={study['median_plain']:.5f} "
                       f"(MC SE ~{study['median_mc_se']:.5f})", study)


# -- gradients --------------------------------------------------------------

def _loss(model: Model, x_norm, label) -> float:
    p = run_det(model, x_norm).probs[label]
    return -math.log(p)


def _pattern(model: Model, x_norm):
    """Activation pattern (ReLU gates, pool winners) at ``x_norm``."""
    cache = run_det(model, x_norm)
    gates = [cache.inputs[i] > layer.theta for i, layer in enumerate(model.layers) if isinstance(layer, L.ReLU)]
    return gates, [cache.argmax[k] for k in sorted(cache.argmax)]


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a[0] + a[1], b[0] + b[1]))


def gradient_check(model: Model, x_norm, label: int, n_coords: int = 20, step: float = 1e-5,
                   seed: int = 0) -> dict:
    """Compare the reverse-mode input gradient with central differences.

    Coordinates whose +/- step changes the activation pattern straddle a
    kink of the piecewise-linear network and are redrawn.  Relative error is
    ``|g - fd| / max(|g|, |fd|, 1e-6)``.
    """
    x_norm = np.asarray(x_norm, dtype=np.float64)
    cache = run_det(model, x_norm)
    grad = backward_input_gradient(model, cache, label)
    rng = np.random.default_rng(seed)
    base = _pattern(model, x_norm)
    errors, coords, skipped = [], [], 0
    candidates = rng.permutation(x_norm.size)
    for flat in candidates:
        if len(coords) == n_coords:
            break
        e = np.zeros(x_norm.size)
        e[flat] = step
        e = e.reshape(x_norm.shape)
        if not (_same_pattern(base, _pattern(model, x_norm + e)) and _same_pattern(base, _pattern(model, x_norm - e))):
            skipped += 1
            continue
        fd = (_loss(model, x_norm + e, label) - _loss(model, x_norm - e, label)) / (2 * step)
        g = grad.ravel()[flat]
        errors.append(abs(g - fd) / max(abs(g), abs(fd), 1e-6))
        coords.append(int(flat))
    return {"max_rel_error": max(errors) if errors else float("nan"), "coords": coords,
            "skipped": skipped, "checked": len(errors)}


def unit_graphs(seed: int = 0) -> dict[str, tuple[Model, np.ndarray]]:
    """One small model per layer type, each with a random normalized input."""
    rng = np.random.default_rng(seed)
    pre3 = PreprocessSpec([0.0, 0.0], [1.0, 1.0], (-1e6, 1e6))
    pre1 = PreprocessSpec([0.0], [1.0], (-1e6, 1e6))

    def conv(o, c, k=3, stride=1, pad=1):
        return L.Conv(rng.normal(0, 0.5, (o, c, k, k)), rng.normal(0, 0.1, o), stride, pad)

    def head(n_in, classes=3):
        return [L.Flatten(), L.Dense(rng.normal(0, 0.5, (classes, n_in)), rng.normal(0, 0.1, classes)), L.Softmax()]

    shape = (2, 6, 6)
    graphs = {
        "conv": Model([conv(3, 2, stride=2, pad=1)] + head(27), shape, pre3),
        "dense": Model(head(72), shape, pre3),
        "relu": Model([conv(3, 2), L.ReLU(0.1)] + head(108), shape, pre3),
        "maxpool": Model([conv(3, 2), L.MaxPool((3, 3), 2)] + head(12), shape, pre3),
        "avgpool": Model([conv(3, 2), L.AvgPool((2, 2), 2)] + head(27), shape, pre3),
        "batchnorm": Model([conv(3, 2), L.BatchNorm(rng.uniform(0.5, 2, 3), rng.normal(0, 1, 3),
                                                    rng.normal(0, 1, 3), rng.uniform(0.5, 2, 3), 1e-5)] + head(108),
                           shape, pre3),
        "dropout": Model([conv(3, 2), L.Dropout(0.5)] + head(108), shape, pre3),
        "flat-batchnorm": Model([L.Dense(rng.normal(0, 0.5, (5, 24)), np.zeros(5)),
                                 L.BatchNorm(rng.uniform(0.5, 2, 5), rng.normal(0, 1, 5), rng.normal(0, 1, 5),
                                             rng.uniform(0.5, 2, 5), 1e-5),
                                 L.Dense(rng.normal(0, 0.5, (2, 5)), np.zeros(2)), L.Softmax()], (24,), pre1),
    }
    return {name: (m, rng.normal(0, 1, m.input_shape)) for name, m in graphs.items()}


def gradient_checks(model: Model | None = None, images=None, labels=None, tol: float = 1e-4,
                    seed: int = 0) -> CheckResult:
    results = {}
    for name, (m, x) in unit_graphs(seed).items():
        results[name] = gradient_check(m, x, 1, seed=seed)
    if model is not None:
        x = preprocess(model, images[0])
        results["model"] = gradient_check(model, x, int(labels[0]), seed=seed)
    worst = max(r["max_rel_error"] for r in results.values())
    bad = [k for k, r in results.items() if not r["max_rel_error"] <= tol or r["checked"] < 20]
    return CheckResult("input-gradient-fd", not bad,
                       f"max rel error {worst:.2e} over {len(results)} graphs (tol {tol:g}); failing: {bad or 'none'}",
                       results)


# -- degenerate equivalence -------------------------------------------------

def degenerate_equivalence(model: Model, images, tol: float = 1e-9,
                           reg: RegularizationConstants = DEFAULT_REG) -> CheckResult:
    """With zero input variance the moment pass must reproduce the plain pass."""
    x = preprocess(model, images)
    cache = run_det(model, x)
    trace = propagate_moments(model, lift_to_moments(x, 0.0), reg)
    diffs = [float(np.max(np.abs(t.mean - a))) for t, a in zip(trace, cache.inputs)]
    max_var = max(float(np.max(t.variance)) for t in trace)
    same = float(np.mean(np.argmax(L.softmax_forward(trace[-1]), axis=1) == np.argmax(cache.probs, axis=1)))
    ok = max(diffs) <= tol and same == 1.0 and max_var == 0.0
    return CheckResult("degenerate-equivalence", ok,
                       f"{len(x)} images, class agreement {same:.4f}, max per-layer mean diff {max(diffs):.2e}, "
                       f"max variance {max_var:g}",
                       {"layer_diffs": diffs, "agreement": same})
