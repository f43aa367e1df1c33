"""Fast gradient sign perturbations and the accuracy protocol built on them.

Attacks are white-box against the deterministic network only.  Intensity
``k_adv`` is in raw pixel units, so the step in the normalized domain is
``k_adv / channel_std`` per channel.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gaussmath import DEFAULT_REG, RegularizationConstants
from .network import Model, backward_input_gradient, predict_batch, preprocess, run_det

# Fixed evaluation chunk; batch composition never depends on worker count.
CHUNK = 50


@dataclass(frozen=True)
class AdversarialConfig:
    k_adv: float
    sigma_c: tuple[float, ...]
    clamp: tuple[float, float] = (0.0, 255.0)
    quantize: bool = False

    def __post_init__(self):
        if not self.k_adv >= 0:
            raise ValueError("k_adv must be >= 0")
        if any(s <= 0 for s in self.sigma_c):
            raise ValueError("sigma_c must be strictly positive")

    @classmethod
    def for_model(cls, model: Model, k_adv: float, quantize: bool = False) -> "AdversarialConfig":
        p = model.preprocess
        return cls(float(k_adv), tuple(float(s) for s in p.channel_std), p.pixel_range, quantize)

    def normalized_step(self) -> np.ndarray:
        return self.k_adv / np.asarray(self.sigma_c)


def fgsm_generate(model: Model, image_raw, true_class, cfg: AdversarialConfig) -> np.ndarray:
    """``clamp(x + k_adv * sign(grad))`` for one image or a batch.

    ``sign(0)`` is 0, so flat directions are left untouched.  With
    ``cfg.quantize`` the result is rounded to whole pixel values.
    """
    x = np.asarray(image_raw, dtype=np.float64)
    if cfg.k_adv == 0:
        return x.copy()
    cache = run_det(model, preprocess(model, x))
    g = backward_input_gradient(model, cache, true_class)
    # raw-domain gradient is g / sigma_c; its sign is the same
    x_adv = x + cfg.k_adv * np.sign(g)
    if cfg.quantize:
        x_adv = np.round(x_adv)
    return np.clip(x_adv, cfg.clamp[0], cfg.clamp[1])


def _chunked(n: int):
    return [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]


def _map_chunks(fn, n: int, workers: int):
    chunks = _chunked(n)
    if workers <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def perturb_dataset(model: Model, images, labels, cfg: AdversarialConfig, workers: int = 1) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    parts = _map_chunks(lambda s: fgsm_generate(model, images[s], labels[s], cfg), len(images), workers)
    return np.concatenate(parts)


def predictions(model: Model, images, mode: str = "det", sigma2: float = 0.0,
                reg: RegularizationConstants = DEFAULT_REG, sorted_mode: bool | None = None,
                workers: int = 1) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    parts = _map_chunks(lambda s: predict_batch(model, images[s], mode, sigma2, reg, sorted_mode),
                        len(images), workers)
    return np.argmax(np.concatenate(parts), axis=1)


def evaluate_accuracy(model: Model, dataset, mode: str = "det", sigma2: float = 0.0,
                      cfg: AdversarialConfig | None = None, reg: RegularizationConstants = DEFAULT_REG,
                      sorted_mode: bool | None = None, workers: int = 1) -> float:
    """Fraction of correctly classified images, optionally after an FGSM attack.

    ``dataset`` is anything with ``images`` and ``labels`` or an
    ``(images, labels)`` pair.
    """
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise ValueError("label out of range")
    if cfg is not None:
        images = perturb_dataset(model, images, labels, cfg, workers)
    pred = predictions(model, images, mode, sigma2, reg, sorted_mode, workers)
    return float(np.mean(pred == labels))
