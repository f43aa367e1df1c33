import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochff import layers as L
from stochff.adversarial import AdversarialConfig, evaluate_accuracy, fgsm_generate, perturb_dataset
from stochff.cli import KADV_UNIT_PX
from stochff.network import Model, PreprocessSpec


def cfg(model, k, quantize=False):
    return AdversarialConfig.for_model(model, k, quantize)


def test_config_validation():
    with pytest.raises(ValueError):
        AdversarialConfig(-1.0, (1.0,))
    with pytest.raises(ValueError):
        AdversarialConfig(1.0, (0.0,))


def test_normalized_step(model):
    c = cfg(model, 5.0)
    np.testing.assert_allclose(c.normalized_step(), 5.0 / model.preprocess.channel_std)


def test_zero_step_identity(model, heldout):
    img = heldout.images[0]
    out = fgsm_generate(model, img, int(heldout.labels[0]), cfg(model, 0.0))
    assert out.tobytes() == img.tobytes()


def test_sign_step_structure(model, heldout):
    k = 3.7
    c = cfg(model, k)
    for i in range(10):
        img = heldout.images[i]
        out = fgsm_generate(model, img, int(heldout.labels[i]), c)
        unclamped = out[(out > 0) & (out < 255)]
        diff = (out - img)[(out > 0) & (out < 255)]
        assert unclamped.size
        assert set(np.round(np.unique(diff), 9)) <= {-k, 0.0, k}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 399), st.floats(0, 60))
def test_perturbation_bound(i, k):
    model, ds = _shared()
    out = fgsm_generate(model, ds.images[i], int(ds.labels[i]), AdversarialConfig.for_model(model, k))
    assert np.max(np.abs(out - ds.images[i])) <= k + 1e-12
    assert out.min() >= 0 and out.max() <= 255


_SHARED = []


def _shared():
    if not _SHARED:
        from stochff.cli import HELDOUT_SEED, fixture_paths
        from stochff.datatrain import generate_dataset
        from stochff.network import load_model_files
        _SHARED.append((load_model_files(fixture_paths()), generate_dataset(400, HELDOUT_SEED)))
    return _SHARED[0]


def test_zero_gradient_fixed_point():
    pre = PreprocessSpec([0.0], [1.0], (0, 255))
    m = Model([L.Flatten(), L.Dense(np.zeros((2, 4)), np.zeros(2)), L.Softmax()], (1, 2, 2), pre)
    img = np.full((1, 2, 2), 100.0)
    out = fgsm_generate(m, img, 0, AdversarialConfig.for_model(m, 10.0))
    assert out.tobytes() == img.tobytes()


def test_quantize_rounds(model, heldout):
    out = fgsm_generate(model, heldout.images[0], int(heldout.labels[0]), cfg(model, 2.5, quantize=True))
    assert np.all(out == np.round(out))


def test_batch_matches_single(model, heldout):
    c = cfg(model, 5.0)
    batch = fgsm_generate(model, heldout.images[:8], heldout.labels[:8], c)
    for i in range(8):
        assert batch[i].tobytes() == fgsm_generate(model, heldout.images[i], int(heldout.labels[i]), c).tobytes()


def test_perturb_independent_of_workers(model, heldout):
    c = cfg(model, 5.0)
    a = perturb_dataset(model, heldout.images[:120], heldout.labels[:120], c, workers=1)
    b = perturb_dataset(model, heldout.images[:120], heldout.labels[:120], c, workers=4)
    assert a.tobytes() == b.tobytes()


def test_accuracy_perfect_and_wrong(model, heldout):
    img, label = heldout.images[:1], heldout.labels[:1]
    assert evaluate_accuracy(model, (img, label)) == 1.0
    wrong = (label + 1) % model.num_classes
    assert evaluate_accuracy(model, (img, wrong)) == 0.0


def test_accuracy_errors(model, heldout):
    with pytest.raises(ValueError):
        evaluate_accuracy(model, (heldout.images[:0], heldout.labels[:0]))
    with pytest.raises(ValueError):
        evaluate_accuracy(model, (heldout.images[:2], np.array([0, 9])))
    with pytest.raises(ValueError):
        evaluate_accuracy(model, (heldout.images[:2], np.array([0])))


def test_golden_clean_accuracy(model, heldout, golden):
    assert evaluate_accuracy(model, heldout, "det") == golden["clean_accuracy"]


def test_attack_hurts(model, heldout):
    clean = evaluate_accuracy(model, heldout)
    adv = evaluate_accuracy(model, heldout, cfg=cfg(model, 0.5 * KADV_UNIT_PX))
    assert adv < clean


def test_monotone_harm(model, heldout):
    accs = [evaluate_accuracy(model, heldout, cfg=cfg(model, k * KADV_UNIT_PX)) for k in (0, 0.25, 0.5, 1.0)]
    assert all(b <= a + 0.02 for a, b in zip(accs, accs[1:])), accs
