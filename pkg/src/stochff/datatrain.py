"""Synthetic shape images and a small deterministic trainer for fixture models."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .network import Model, PreprocessSpec, backward, cross_entropy_grad, preprocess, run_det

IMAGE_SIZE = 12
NUM_CLASSES = 4
CLASS_NAMES = ("filled_square", "hollow_square", "cross", "diagonal_stripe")
PIXEL_RANGE = (0.0, 255.0)

_MAGIC = b"SFDS"
_HEADER = struct.Struct("<4sIIIIQ")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, 1, 12, 12), raw [0, 255]
    labels: np.ndarray  # (n,) in 0..3
    seed: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.images[idx], self.labels[idx], self.seed)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    seed: int = 0
    momentum: float = 0.9


def _draw(label: int, size: int, top: int, left: int) -> np.ndarray:
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    box = mask[top:top + size, left:left + size]
    if label == 0:
        box[:] = True
    elif label == 1:
        box[[0, -1], :] = True
        box[:, [0, -1]] = True
    elif label == 2:
        mid = size // 2
        box[mid, :] = True
        box[:, mid] = True
    else:
        i = np.arange(size)
        box[i, i] = True
        box[i[:-1], i[:-1] + 1] = True
    return mask


def generate_dataset(n: int, seed: int) -> SyntheticDataset:
    """``n`` seeded 12x12 grayscale shape images, classes balanced within one.

    Each image is a shape of random size, position, background level, and
    contrast, plus uniform pixel noise in [-10, 10], clamped to [0, 255].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES)
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    for k, label in enumerate(labels):
        size = int(rng.integers(5, 9))
        top, left = rng.integers(0, IMAGE_SIZE - size + 1, size=2)
        background = rng.uniform(40.0, 120.0)
        contrast = rng.uniform(50.0, 110.0)
        img = background + contrast * _draw(int(label), size, int(top), int(left))
        img = img + rng.uniform(-10.0, 10.0, size=img.shape)
        images[k, 0] = np.clip(img, *PIXEL_RANGE)
    return SyntheticDataset(images, labels.astype(np.int64), int(seed))


def save_dataset(ds: SyntheticDataset, path) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, c, h, w, ds.seed & (2**64 - 1)))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("dataset file truncated")
    magic, n, c, h, w, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a dataset file")
    count = n * c * h * w
    expected = _HEADER.size + 8 * count + n
    if len(raw) != expected:
        raise ValueError(f"dataset file has {len(raw)} bytes, expected {expected}")
    images = np.frombuffer(raw, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size + 8 * count).astype(np.int64)
    return SyntheticDataset(images.reshape(n, c, h, w), labels, seed)


def dataset_preprocess(ds: SyntheticDataset) -> PreprocessSpec:
    """Channel-wise normalization statistics of a dataset."""
    return PreprocessSpec(ds.images.mean(axis=(0, 2, 3)), ds.images.std(axis=(0, 2, 3)), PIXEL_RANGE)


def fixture_skeleton(pre: PreprocessSpec, seed: int = 0, sorted_maxpool: bool = True) -> Model:
    """conv 8@3x3 > relu > maxpool 2 > conv 16@3x3 > relu > maxpool 2 > dense > softmax.

    He-initialized weights, zero biases.
    """
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    layers = [
        L.Conv(he((8, 1, 3, 3), 9), np.zeros(8), stride=1, padding=1),
        L.ReLU(),
        L.MaxPool((2, 2), 2, sorted_maxpool),
        L.Conv(he((16, 8, 3, 3), 72), np.zeros(16), stride=1, padding=1),
        L.ReLU(),
        L.MaxPool((2, 2), 2, sorted_maxpool),
        L.Flatten(),
        L.Dense(he((NUM_CLASSES, 144), 144), np.zeros(NUM_CLASSES)),
        L.Softmax(),
    ]
    return Model(layers, (1, IMAGE_SIZE, IMAGE_SIZE), pre)


def _params(model: Model):
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (L.Conv, L.Dense)):
            yield i, [("weights", layer.weights), ("bias", layer.bias)]
        elif isinstance(layer, L.BatchNorm):
            yield i, [("gamma", layer.gamma), ("beta", layer.beta)]


def mean_loss(model: Model, ds: SyntheticDataset) -> float:
    cache = run_det(model, preprocess(model, ds.images))
    p = cache.probs[np.arange(len(ds)), ds.labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def train_fixture(ds: SyntheticDataset, arch: Model, cfg: TrainConfig, history: list | None = None) -> Model:
    """Mini-batch SGD with momentum on mean cross-entropy; trains ``arch`` in place.

    Deterministic for a fixed ``cfg.seed``.  Per-epoch mean training loss is
    appended to ``history`` when given.
    """
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.learning_rate < 0:
        raise ValueError("invalid training configuration")
    rng = np.random.default_rng(cfg.seed)
    model = arch
    velocity = {(i, name): np.zeros_like(p) for i, plist in _params(model) for name, p in plist}
    x_all = preprocess(model, ds.images)
    n = len(ds)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cache = run_det(model, x_all[idx])
            labels = ds.labels[idx]
            p = cache.probs[np.arange(len(idx)), labels]
            loss = -np.sum(np.log(np.maximum(p, 1e-300)))
            if not np.isfinite(loss) or not np.all(np.isfinite(cache.logits)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start} "
                                       f"(lr={cfg.learning_rate}, max |logit|={np.nanmax(np.abs(cache.logits))})")
            total += loss
            _, grads = backward(model, cache, cross_entropy_grad(cache.probs, labels) / len(idx), params=True)
            for i, plist in _params(model):
                for (name, param), g in zip(plist, grads[i]):
                    v = velocity[(i, name)]
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    param += v
        if history is not None:
            history.append(total / n)
    return model


def accuracy(model: Model, ds: SyntheticDataset) -> float:
    cache = run_det(model, preprocess(model, ds.images))
    return float(np.mean(np.argmax(cache.probs, axis=1) == ds.labels))


def build_fixture(n_train: int = 2000, n_test: int = 400, seed: int = 7, epochs: int = 30,
                  cfg: TrainConfig | None = None):
    """Generate train/held-out sets and train the fixture model.

    Returns ``(model, train_set, test_set, history)``; the held-out set uses
    ``seed + 1``.
    """
    train = generate_dataset(n_train, seed)
    test = generate_dataset(n_test, seed + 1)
    cfg = cfg or TrainConfig(epochs=epochs, seed=seed)
    history: list = []
    model = train_fixture(train, fixture_skeleton(dataset_preprocess(train), seed), cfg, history)
    return model, train, test, history
