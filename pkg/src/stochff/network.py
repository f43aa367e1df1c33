"""Model graph, serialization, and the three passes over it.

One :class:`Model` serves the deterministic forward (with an activation
cache), the reverse-mode input gradient used by the attack, and the
stochastic moment forward.  All passes accept a single raw image or a batch
with one leading axis.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .gaussmath import DEFAULT_REG, RegularizationConstants
from .tensorcore import MomentTensor, ShapeError, check_shape, lift_to_moments

FORMAT = "stochff-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Base class for model loading failures."""


class ManifestError(ModelFormatError):
    pass


class WeightLengthError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class LayerShapeError(ModelFormatError, ShapeError):
    def __init__(self, index: int, message: str):
        super().__init__(f"layer {index}: {message}")
        self.index = index


@dataclass
class PreprocessSpec:
    channel_mean: np.ndarray
    channel_std: np.ndarray
    pixel_range: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        self.channel_mean = np.atleast_1d(np.asarray(self.channel_mean, dtype=np.float64))
        self.channel_std = np.atleast_1d(np.asarray(self.channel_std, dtype=np.float64))
        self.pixel_range = (float(self.pixel_range[0]), float(self.pixel_range[1]))
        if self.channel_mean.shape != self.channel_std.shape:
            raise ValueError("channel_mean and channel_std must have the same length")
        if np.any(self.channel_std <= 0):
            raise ValueError("channel_std must be strictly positive")
        if not self.pixel_range[0] < self.pixel_range[1]:
            raise ValueError("pixel_range must be (lo, hi) with lo < hi")


@dataclass
class Model:
    layers: list
    input_shape: tuple[int, ...]
    preprocess: PreprocessSpec
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.input_shape = check_shape(self.input_shape)
        self.num_classes = self.shapes()[-1][0]
        if not self.layers or not isinstance(self.layers[-1], L.Softmax):
            raise LayerShapeError(len(self.layers) - 1, "final layer must be Softmax")
        if self.num_classes < 2:
            raise LayerShapeError(len(self.layers) - 1, "need at least two classes")
        channels = self.input_shape[0] if len(self.input_shape) == 3 else 1
        if len(self.preprocess.channel_mean) != channels:
            raise ShapeError(f"preprocess has {len(self.preprocess.channel_mean)} channels, input has {channels}")

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes: network input followed by every layer's output."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(L.output_shape(layer, shapes[-1]))
            except ShapeError as exc:
                raise LayerShapeError(i, str(exc)) from None
        return shapes

    @property
    def logit_layer(self) -> int:
        return len(self.layers) - 1


@dataclass
class PredictionOutcome:
    class_probs: np.ndarray
    predicted_class: int
    logit_means: np.ndarray
    logit_variances: np.ndarray


@dataclass
class ForwardCache:
    """Per-layer inputs of a deterministic pass plus max-pool winner maps."""

    inputs: list
    argmax: dict
    logits: np.ndarray
    probs: np.ndarray


class ActivationMeter:
    """Counts bytes of the activations handed from layer to layer.

    ``peak`` is the largest live footprint at any layer (its input plus its
    output).  The softmax readout is not an activation and is not counted.
    """

    def __init__(self):
        self.sizes: list[int] = []

    def record(self, nbytes: int):
        self.sizes.append(int(nbytes))

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def peak(self) -> int:
        if len(self.sizes) < 2:
            return self.total
        return max(a + b for a, b in zip(self.sizes, self.sizes[1:]))


# -- serialization ----------------------------------------------------------

def _layer_record(layer) -> dict:
    if isinstance(layer, L.Conv):
        o, c, kh, kw = layer.weights.shape
        return {"type": "conv", "out_ch": o, "in_ch": c, "kH": kh, "kW": kw,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, L.Dense):
        return {"type": "dense", "units": layer.weights.shape[0], "in_features": layer.weights.shape[1]}
    if isinstance(layer, L.ReLU):
        return {"type": "relu", "theta": layer.theta}
    if isinstance(layer, L.MaxPool):
        return {"type": "maxpool", "window": list(layer.window), "stride": layer.stride,
                "sorted": layer.sorted_mode}
    if isinstance(layer, L.AvgPool):
        return {"type": "avgpool", "window": list(layer.window), "stride": layer.stride}
    if isinstance(layer, L.BatchNorm):
        return {"type": "batchnorm", "channels": layer.channels, "eps": layer.eps_bn}
    if isinstance(layer, L.Dropout):
        return {"type": "dropout", "rate": layer.rate}
    if isinstance(layer, L.Flatten):
        return {"type": "flatten"}
    if isinstance(layer, L.Softmax):
        return {"type": "softmax"}
    raise TypeError(f"cannot serialize {layer!r}")


def _param_arrays(layer) -> list[np.ndarray]:
    if isinstance(layer, (L.Conv, L.Dense)):
        return [layer.weights, layer.bias]
    if isinstance(layer, L.BatchNorm):
        return [layer.gamma, layer.beta, layer.running_mean, layer.running_var]
    return []


def save_model(model: Model) -> tuple[bytes, bytes]:
    """Serialize to ``(manifest_bytes, weight_bytes)``."""
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for layer in model.layers for a in _param_arrays(layer))
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "preprocess": {
            "channel_mean": model.preprocess.channel_mean.tolist(),
            "channel_std": model.preprocess.channel_std.tolist(),
            "pixel_range": list(model.preprocess.pixel_range),
        },
        "layers": [_layer_record(layer) for layer in model.layers],
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    return json.dumps(manifest, indent=2).encode("utf-8"), blob


def _build_layer(i: int, rec: dict, in_shape, take):
    kind = rec.get("type")
    try:
        if kind == "conv":
            if len(in_shape) != 3 or in_shape[0] != rec["in_ch"]:
                raise LayerShapeError(i, f"conv expects {rec['in_ch']} input channels, got shape {in_shape}")
            o, c, kh, kw = rec["out_ch"], rec["in_ch"], rec["kH"], rec["kW"]
            return L.Conv(take((o, c, kh, kw)), take((o,)), int(rec.get("stride", 1)), int(rec.get("padding", 0)))
        if kind == "dense":
            n_in = int(np.prod(in_shape))
            if len(in_shape) != 1 or rec.get("in_features", n_in) != n_in:
                raise LayerShapeError(i, f"dense expects flat input of {rec.get('in_features')}, got shape {in_shape}")
            return L.Dense(take((rec["units"], n_in)), take((rec["units"],)))
        if kind == "relu":
            return L.ReLU(float(rec.get("theta", 0.0)))
        if kind == "maxpool":
            return L.MaxPool(tuple(rec["window"]), int(rec["stride"]), bool(rec.get("sorted", True)))
        if kind == "avgpool":
            return L.AvgPool(tuple(rec["window"]), int(rec["stride"]))
        if kind == "batchnorm":
            c = int(rec["channels"])
            return L.BatchNorm(take((c,)), take((c,)), take((c,)), take((c,)), float(rec.get("eps", 1e-5)))
        if kind == "dropout":
            return L.Dropout(float(rec.get("rate", 0.5)))
        if kind == "flatten":
            return L.Flatten()
        if kind == "softmax":
            return L.Softmax()
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"layer {i}: malformed {kind} record ({exc})") from None
    raise ManifestError(f"layer {i}: unknown layer type {kind!r}")


def load_model(manifest_bytes: bytes, weight_bytes: bytes) -> Model:
    """Parse, size-check, checksum, and shape-validate a serialized model."""
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
        records = manifest["layers"]
        input_shape = tuple(manifest["input_shape"])
        pre = manifest["preprocess"]
        preprocess = PreprocessSpec(pre["channel_mean"], pre["channel_std"], tuple(pre["pixel_range"]))
        digest = manifest["weights_sha256"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"cannot parse manifest: {exc}") from None
    if manifest.get("format", FORMAT) != FORMAT:
        raise ManifestError(f"not a {FORMAT} manifest")
    if len(weight_bytes) % 8:
        raise WeightLengthError(f"weight blob length {len(weight_bytes)} is not a multiple of 8")
    values = np.frombuffer(weight_bytes, dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > len(values):
            raise WeightLengthError(f"weight blob too short: need more than {len(values)} values")
        out = values[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
        return out

    built = []
    shape = check_shape(input_shape)
    for i, rec in enumerate(records):
        layer = _build_layer(i, rec, shape, take)
        try:
            shape = L.output_shape(layer, shape)
        except ShapeError as exc:
            raise LayerShapeError(i, str(exc)) from None
        built.append(layer)
    if pos != len(values):
        raise WeightLengthError(f"weight blob has {len(values)} values, layers declare {pos}")
    if hashlib.sha256(weight_bytes).hexdigest() != digest:
        raise ChecksumError("weight blob SHA-256 does not match manifest")
    model = Model(built, input_shape, preprocess)
    if "num_classes" in manifest and manifest["num_classes"] != model.num_classes:
        raise LayerShapeError(len(built) - 1, f"manifest declares {manifest['num_classes']} classes, graph ends with {model.num_classes}")
    return model


def save_model_files(model: Model, manifest_path) -> tuple[Path, Path]:
    """Write ``<name>.json`` and its ``<name>.bin`` weight blob."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    manifest, blob = save_model(model)
    manifest_path.write_bytes(manifest)
    blob_path.write_bytes(blob)
    return manifest_path, blob_path


def load_model_files(manifest_path) -> Model:
    manifest_path = Path(manifest_path)
    return load_model(manifest_path.read_bytes(), manifest_path.with_suffix(".bin").read_bytes())


# -- passes -----------------------------------------------------------------

def _sample_ndim(model: Model) -> int:
    return len(model.input_shape)


def preprocess(model: Model, image_raw) -> np.ndarray:
    """Validate a raw image (or batch) and normalize it per channel."""
    x = np.asarray(image_raw, dtype=np.float64)
    nd = _sample_ndim(model)
    if x.shape[x.ndim - nd:] != model.input_shape or x.ndim not in (nd, nd + 1):
        raise ShapeError(f"expected image shape {model.input_shape}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains NaN or Inf")
    lo, hi = model.preprocess.pixel_range
    if x.min() < lo or x.max() > hi:
        raise ValueError(f"pixels outside range [{lo}, {hi}]")
    p = model.preprocess
    if nd == 3:
        return (x - p.channel_mean[:, None, None]) / p.channel_std[:, None, None]
    return (x - p.channel_mean[0]) / p.channel_std[0]


def _flatten(x, in_shape):
    return x.reshape(x.shape[:x.ndim - len(in_shape)] + (-1,))


def run_det(model: Model, x: np.ndarray, meter: ActivationMeter | None = None) -> ForwardCache:
    """Deterministic pass on preprocessed input, keeping every layer input."""
    shapes = model.shapes()
    inputs, argmax = [], {}
    if meter is not None:
        meter.record(x.nbytes)
    for i, layer in enumerate(model.layers):
        inputs.append(x)
        if isinstance(layer, L.Softmax):
            return ForwardCache(inputs, argmax, x, L.softmax(x))
        if isinstance(layer, L.Conv):
            x = L.conv_forward_det(x, layer)
        elif isinstance(layer, L.Dense):
            x = L.dense_forward_det(x, layer)
        elif isinstance(layer, L.ReLU):
            x = L.relu_forward_det(x, layer.theta)
        elif isinstance(layer, L.MaxPool):
            x, argmax[i] = L.maxpool_forward_det(x, layer)
        elif isinstance(layer, L.AvgPool):
            x = L.avgpool_forward_det(x, layer)
        elif isinstance(layer, L.BatchNorm):
            x = L.batchnorm_forward_det(x, layer)
        elif isinstance(layer, L.Flatten):
            x = _flatten(x, shapes[i])
        elif isinstance(layer, L.Dropout):
            pass
        if meter is not None:
            meter.record(x.nbytes)
    raise AssertionError("model validated to end with Softmax")


def backward(model: Model, cache: ForwardCache, dlogits: np.ndarray, params: bool = False):
    """Reverse-mode sweep from logit gradients.

    Returns the gradient w.r.t. the preprocessed input and, when ``params``
    is set, a list holding per-layer parameter gradients (or ``None``).
    """
    shapes = model.shapes()
    grads = [None] * len(model.layers)
    g = dlogits
    for i in range(model.logit_layer - 1, -1, -1):
        layer, x = model.layers[i], cache.inputs[i]
        if isinstance(layer, L.Conv):
            g, dw, db = L.conv_backward(g, x, layer)
            grads[i] = [dw, db]
        elif isinstance(layer, L.Dense):
            g, dw, db = L.dense_backward(g, x, layer)
            grads[i] = [dw, db]
        elif isinstance(layer, L.ReLU):
            g = L.relu_backward(g, x, layer.theta)
        elif isinstance(layer, L.MaxPool):
            g = L.maxpool_backward(g, cache.argmax[i], shapes[i])
        elif isinstance(layer, L.AvgPool):
            g = L.avgpool_backward(g, x, layer)
        elif isinstance(layer, L.BatchNorm):
            g, dgamma, dbeta = L.batchnorm_backward(g, x, layer)
            grads[i] = [dgamma, dbeta]
        elif isinstance(layer, L.Flatten):
            g = g.reshape(x.shape)
    return (g, grads) if params else g


def cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of ``-log p[label]`` w.r.t. the logits: ``p - onehot``."""
    d = probs.copy()
    labels = np.asarray(labels)
    if probs.ndim == 1:
        d[int(labels)] -= 1.0
    else:
        d[np.arange(len(d)), labels] -= 1.0
    return d


def _outcome(probs, logit_means, logit_vars) -> PredictionOutcome:
    return PredictionOutcome(probs, int(np.argmax(probs)), logit_means, logit_vars)


def forward_det(model: Model, image_raw) -> tuple[PredictionOutcome, ForwardCache]:
    cache = run_det(model, preprocess(model, image_raw))
    if cache.probs.ndim != 1:
        raise ShapeError("forward_det takes a single image; use predict_batch for batches")
    return _outcome(cache.probs, cache.logits, np.zeros_like(cache.logits)), cache


def backward_input_gradient(model: Model, cache: ForwardCache, true_class) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the preprocessed input."""
    labels = np.asarray(true_class)
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise ValueError(f"class index out of range [0, {model.num_classes})")
    return backward(model, cache, cross_entropy_grad(cache.probs, labels))


def propagate_moments(model: Model, x: MomentTensor, reg: RegularizationConstants = DEFAULT_REG,
                      sorted_mode: bool | None = None, meter: ActivationMeter | None = None) -> list[MomentTensor]:
    """Moment pass on preprocessed moments; returns each layer's input, logits last.

    ``sorted_mode`` overrides the per-layer max-pool ordering flag when given.
    """
    shapes = model.shapes()
    trace = []
    if meter is not None:
        meter.record(x.nbytes)
    for i, layer in enumerate(model.layers):
        trace.append(x)
        if isinstance(layer, L.Softmax):
            return trace
        if isinstance(layer, L.Conv):
            x = L.conv_forward_moments(x, layer)
        elif isinstance(layer, L.Dense):
            x = L.dense_forward_moments(x, layer)
        elif isinstance(layer, L.ReLU):
            x = L.relu_forward_moments(x, layer.theta, reg)
        elif isinstance(layer, L.MaxPool):
            if sorted_mode is not None and sorted_mode != layer.sorted_mode:
                layer = L.MaxPool(layer.window, layer.stride, sorted_mode)
            x = L.maxpool_forward_moments(x, layer, reg)
        elif isinstance(layer, L.AvgPool):
            x = L.avgpool_forward_moments(x, layer)
        elif isinstance(layer, L.BatchNorm):
            x = L.batchnorm_forward_moments(x, layer)
        elif isinstance(layer, L.Flatten):
            x = MomentTensor(_flatten(x.mean, shapes[i]), _flatten(x.variance, shapes[i]))
        elif isinstance(layer, L.Dropout):
            x = L.dropout_forward_moments(x)
        if meter is not None:
            meter.record(x.nbytes)
    raise AssertionError("model validated to end with Softmax")


def forward_stochastic(model: Model, image_raw, sigma2: float, reg: RegularizationConstants = DEFAULT_REG,
                       sorted_mode: bool | None = None) -> PredictionOutcome:
    """Lift the preprocessed image to N(x, sigma2) and propagate moments.

    ``sigma2`` is in preprocessed units; a raw-pixel variance ``v`` maps to
    ``v / channel_std**2``.
    """
    x = preprocess(model, image_raw)
    if x.ndim != _sample_ndim(model):
        raise ShapeError("forward_stochastic takes a single image; use predict_batch for batches")
    logits = propagate_moments(model, lift_to_moments(x, sigma2), reg, sorted_mode)[-1]
    return _outcome(L.softmax_forward(logits), logits.mean, logits.variance)


def predict_ensemble(model: Model, image_raw, sigma2: float, reg: RegularizationConstants = DEFAULT_REG,
                     sorted_mode: bool | None = None) -> PredictionOutcome:
    """Average deterministic and stochastic class probabilities 1:1."""
    det, _ = forward_det(model, image_raw)
    sto = forward_stochastic(model, image_raw, sigma2, reg, sorted_mode)
    probs = 0.5 * det.class_probs + 0.5 * sto.class_probs
    return _outcome(probs, sto.logit_means, sto.logit_variances)


MODES = ("det", "stochastic", "ensemble")


def predict_batch(model: Model, images_raw, mode: str = "det", sigma2: float = 0.0,
                  reg: RegularizationConstants = DEFAULT_REG, sorted_mode: bool | None = None) -> np.ndarray:
    """Class probabilities ``(N, classes)`` for a batch of raw images."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = preprocess(model, images_raw)
    if x.ndim != _sample_ndim(model) + 1:
        raise ShapeError("predict_batch expects a leading batch axis")
    if mode == "det":
        return run_det(model, x).probs
    sto = L.softmax_forward(propagate_moments(model, lift_to_moments(x, sigma2), reg, sorted_mode)[-1])
    if mode == "stochastic":
        return sto
    return 0.5 * run_det(model, x).probs + 0.5 * sto
