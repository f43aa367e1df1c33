import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochff import layers as L
from stochff.cli import fixture_paths
from stochff.network import (ActivationMeter, ChecksumError, LayerShapeError, ManifestError, Model, PreprocessSpec,
                             WeightLengthError, backward_input_gradient, forward_det, forward_stochastic, load_model,
                             load_model_files, predict_batch, predict_ensemble, preprocess, propagate_moments,
                             run_det, save_model)
from stochff.tensorcore import ShapeError, lift_to_moments
from stochff.verify import degenerate_equivalence, gradient_check, gradient_checks


def fixture_bytes():
    path = fixture_paths()
    return path.read_bytes(), path.with_suffix(".bin").read_bytes()


# -- loading ------------------------------------------------------------------------

def test_fixture_loads(model):
    kinds = [type(l).__name__ for l in model.layers]
    assert kinds == ["Conv", "ReLU", "MaxPool", "Conv", "ReLU", "MaxPool", "Flatten", "Dense", "Softmax"]
    assert model.input_shape == (1, 12, 12) and model.num_classes == 4
    assert sum(p.size for l in model.layers for p in (getattr(l, "weights", None), getattr(l, "bias", None))
               if p is not None) <= 50_000


def test_truncated_blob():
    manifest, blob = fixture_bytes()
    with pytest.raises(WeightLengthError):
        load_model(manifest, blob[:-8])
    with pytest.raises(WeightLengthError):
        load_model(manifest, blob[:-3])
    with pytest.raises(WeightLengthError):
        load_model(manifest, blob + bytes(8))


def test_checksum_mismatch():
    manifest, blob = fixture_bytes()
    corrupt = bytearray(blob)
    corrupt[100] ^= 0x01
    with pytest.raises(ChecksumError):
        load_model(manifest, bytes(corrupt))


def test_parse_error():
    _, blob = fixture_bytes()
    with pytest.raises(ManifestError):
        load_model(b"{not json", blob)
    with pytest.raises(ManifestError):
        load_model(json.dumps({"layers": []}).encode(), blob)


def test_conv_dense_shape_break_names_layer():
    manifest, blob = fixture_bytes()
    doc = json.loads(manifest)
    doc["layers"] = [r for r in doc["layers"] if r["type"] != "flatten"]
    with pytest.raises(LayerShapeError) as info:
        load_model(json.dumps(doc).encode(), blob)
    assert info.value.index == 6
    assert "layer 6" in str(info.value)


def test_errors_are_distinct():
    kinds = {ManifestError, WeightLengthError, ChecksumError, LayerShapeError}
    assert len(kinds) == 4
    assert not issubclass(ChecksumError, WeightLengthError) and not issubclass(LayerShapeError, ChecksumError)


def test_round_trip_bit_exact(model, heldout):
    m2 = load_model(*save_model(model))
    assert save_model(m2) == save_model(model)
    a = run_det(model, preprocess(model, heldout.images[:20])).probs
    b = run_det(m2, preprocess(m2, heldout.images[:20])).probs
    assert a.tobytes() == b.tobytes()


def test_model_validation():
    pre = PreprocessSpec([0.0], [1.0])
    with pytest.raises(LayerShapeError):
        Model([L.Flatten(), L.Dense(np.ones((3, 4)), np.zeros(3))], (4,), pre)
    with pytest.raises(LayerShapeError):
        Model([L.Dense(np.ones((1, 4)), np.zeros(1)), L.Softmax()], (4,), pre)
    with pytest.raises(ValueError):
        PreprocessSpec([0.0], [0.0])


# -- goldens ---------------------------------------------------------------------------

def test_golden_zero_image(model, golden):
    out, _ = forward_det(model, np.zeros(model.input_shape))
    np.testing.assert_allclose(out.class_probs, golden["zero_image_probs"], rtol=1e-12, atol=1e-15)
    assert np.all(out.logit_variances == 0)


def test_golden_image0(model, heldout, golden):
    assert int(heldout.labels[0]) == golden["image0_label"]
    out, _ = forward_det(model, heldout.images[0])
    assert out.predicted_class == golden["image0_predicted_class"]


def test_golden_stochastic(model, heldout, golden):
    out = forward_stochastic(model, heldout.images[0], 0.1)
    np.testing.assert_allclose(out.class_probs, golden["image0_stochastic_0.1_probs"], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(out.logit_variances, golden["image0_stochastic_0.1_logit_variances"], rtol=1e-12)


def test_golden_ensemble(model, heldout, golden):
    out = predict_ensemble(model, heldout.images[0], 0.1)
    np.testing.assert_allclose(out.class_probs, golden["image0_ensemble_0.1_probs"], rtol=1e-12, atol=1e-15)


# -- input validation -------------------------------------------------------------------

def test_wrong_shape_and_range(model):
    with pytest.raises(ShapeError):
        forward_det(model, np.zeros((1, 11, 12)))
    with pytest.raises(ValueError):
        forward_det(model, np.full(model.input_shape, 256.0))
    with pytest.raises(ValueError):
        forward_det(model, np.full(model.input_shape, np.nan))
    with pytest.raises(ValueError):
        forward_stochastic(model, np.zeros(model.input_shape), -1.0)
    with pytest.raises(ValueError):
        predict_batch(model, np.zeros((2, 1, 12, 12)), mode="bogus")


def test_invalid_class_index(model, heldout):
    _, cache = forward_det(model, heldout.images[0])
    for bad in (-1, 4):
        with pytest.raises(ValueError):
            backward_input_gradient(model, cache, bad)


# -- gradients -------------------------------------------------------------------------

def test_fixture_gradient_fd(model, heldout):
    x = preprocess(model, heldout.images[3])
    r = gradient_check(model, x, int(heldout.labels[3]), n_coords=20, step=1e-5, seed=3)
    assert r["checked"] == 20
    assert r["max_rel_error"] <= 1e-4


def test_unit_graph_gradients():
    result = gradient_checks(seed=11)
    assert result.passed, result.detail


def test_zero_weight_dead_path():
    pre = PreprocessSpec([0.0], [1.0], (-10, 10))
    m = Model([L.Flatten(), L.Dense(np.zeros((3, 6)), np.array([0.1, 0.2, 0.3])), L.Softmax()], (6,), pre)
    _, cache = forward_det(m, np.linspace(-1, 1, 6))
    assert np.all(backward_input_gradient(m, cache, 1) == 0)


def test_linear_softmax_closed_form(rng):
    w = rng.normal(size=(2, 5))
    pre = PreprocessSpec([0.0], [1.0], (-10, 10))
    m = Model([L.Dense(w, rng.normal(size=2)), L.Softmax()], (5,), pre)
    x = rng.uniform(-1, 1, 5)
    out, cache = forward_det(m, x)
    y = np.array([0.0, 1.0])
    np.testing.assert_allclose(backward_input_gradient(m, cache, 1), (out.class_probs - y) @ w, rtol=1e-13)


# -- determinism and equivalence --------------------------------------------------------

def test_bit_reproducible(model, heldout):
    img = heldout.images[5]
    a, ca = forward_det(model, img)
    b, cb = forward_det(model, img)
    assert a.class_probs.tobytes() == b.class_probs.tobytes()
    ga = backward_input_gradient(model, ca, 2)
    gb = backward_input_gradient(model, cb, 2)
    assert ga.tobytes() == gb.tobytes()
    s1, s2 = forward_stochastic(model, img, 0.3), forward_stochastic(model, img, 0.3)
    assert s1.class_probs.tobytes() == s2.class_probs.tobytes()


def test_sigma0_per_layer_means(model, heldout):
    result = degenerate_equivalence(model, heldout.images[:100])
    assert result.passed, result.detail
    assert max(result.data["layer_diffs"]) <= 1e-9


def test_batch_matches_single(model, heldout):
    imgs = heldout.images[:7]
    for mode in ("det", "stochastic", "ensemble"):
        batch = predict_batch(model, imgs, mode, 0.2)
        for i, img in enumerate(imgs):
            if mode == "det":
                single = forward_det(model, img)[0]
            elif mode == "stochastic":
                single = forward_stochastic(model, img, 0.2)
            else:
                single = predict_ensemble(model, img, 0.2)
            np.testing.assert_allclose(batch[i], single.class_probs, rtol=1e-13, atol=1e-16)


def test_ensemble_tie_lowest_index():
    pre = PreprocessSpec([0.0], [1.0], (-1e3, 1e3))
    # at x = 0 the det pass is certain of class 0; with sigma = 100 the relu
    # mean is ~39.9 and the moment pass is certain of class 1
    m = Model([L.Dense(np.array([[1.0]]), np.zeros(1)), L.ReLU(),
               L.Dense(np.array([[-40.0], [40.0]]), np.array([800.0, 0.0])), L.Softmax()], (1,), pre)
    det, _ = forward_det(m, np.array([0.0]))
    sto = forward_stochastic(m, np.array([0.0]), 1e4)
    assert det.class_probs.tolist() == [1.0, 0.0] and sto.class_probs.tolist() == [0.0, 1.0]
    out = predict_ensemble(m, np.array([0.0]), 1e4)
    assert out.class_probs.tolist() == [0.5, 0.5]
    assert out.predicted_class == 0


def test_ensemble_sigma0_exact(model, heldout):
    for img in heldout.images[:10]:
        det, _ = forward_det(model, img)
        ens = predict_ensemble(model, img, 0.0)
        assert ens.class_probs.tobytes() == det.class_probs.tobytes()


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1e-3, 0.1, 1.0, 10.0]),
       st.sampled_from(["det", "stochastic", "ensemble"]))
def test_probability_simplex(seed, sigma2, mode):
    model = _cached_model()
    img = np.random.default_rng(seed).uniform(0, 255, model.input_shape)
    if mode == "det":
        out = forward_det(model, img)[0]
    elif mode == "stochastic":
        out = forward_stochastic(model, img, sigma2)
    else:
        out = predict_ensemble(model, img, sigma2)
    p = out.class_probs
    assert np.all((p >= 0) & (p <= 1)) and abs(p.sum() - 1) <= 1e-9
    assert out.predicted_class == int(np.argmax(p))
    assert np.all(out.logit_variances >= 0)
    if mode == "det":
        assert np.all(out.logit_variances == 0)


_MODEL = []


def _cached_model():
    if not _MODEL:
        _MODEL.append(load_model_files(fixture_paths()))
    return _MODEL[0]


# -- memory accounting -------------------------------------------------------------------

def test_meter_records_each_activation(model, heldout):
    det, mom = ActivationMeter(), ActivationMeter()
    x = preprocess(model, heldout.images[0])
    run_det(model, x, det)
    propagate_moments(model, lift_to_moments(x, 0.1), meter=mom)
    # input plus one output per layer before the softmax
    assert len(det.sizes) == len(mom.sizes) == len(model.layers)
    assert mom.sizes == [2 * s for s in det.sizes]
    assert det.sizes[0] == 144 * 8
