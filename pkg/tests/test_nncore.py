import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlab.errors import ConfigurationError, DimensionError, DivergenceError, FormatError
from amlab.nncore import (
    EPS,
    Classifier,
    LayerSpec,
    TrainConfig,
    classifier_from_bytes,
    classifier_to_bytes,
    conv_net,
    cross_entropy,
    cross_entropy_to_uniform,
    dense_net,
    distillation_loss,
    forward,
    gradient_check,
    input_gradient,
    load_classifier,
    reverse_cross_entropy,
    save_classifier,
    softmax,
    train,
)
from amlab.data import LabeledDataset

# -- forward and softmax -----------------------------------------------------


def test_fresh_two_class_model_is_near_even():
    model = dense_net(2, 2, hidden=8, seed=3)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-1, 1, size=(20, 2)):
        p = forward(model, x)
        assert abs(p[0] - 0.5) < 0.2


def test_softmax_of_zero_logits_is_uniform():
    p = softmax(np.zeros((1, 10)))[0]
    np.testing.assert_allclose(p, 0.1)
    assert p.max() == pytest.approx(0.1)


def test_softmax_reference_values():
    # computed independently: exp(2,1,0) / sum
    np.testing.assert_allclose(softmax(np.array([[2.0, 1.0, 0.0]]))[0], [0.6652, 0.2447, 0.0900], atol=1e-4)


def test_forward_rejects_wrong_shape():
    with pytest.raises(DimensionError):
        forward(dense_net(4, 3), np.zeros(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_outputs_are_probability_vectors(seed, scale):
    model = dense_net(6, 5, hidden=7, seed=seed % 97)
    x = np.random.default_rng(seed).normal(size=(8, 6)) * scale
    p = model.predict_proba(x)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_conv_net_shapes():
    model = conv_net(28, 28, 10)
    assert model.input_shape == (1, 28, 28)
    p = model.predict_proba(np.zeros((2, 1, 28, 28)))
    assert p.shape == (2, 10)


def test_layer_composition_is_checked():
    with pytest.raises(DimensionError):
        Classifier([LayerSpec("dense", (4, 3)), LayerSpec("softmax-output", (2,))])
    with pytest.raises(ConfigurationError):
        Classifier([LayerSpec("dense", (4, 3))])
    with pytest.raises(ConfigurationError):
        LayerSpec("lstm", (4,))


# -- losses ------------------------------------------------------------------


def test_cross_entropy_examples():
    assert cross_entropy([0, 1, 0], 1) == 0.0
    assert cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10), abs=1e-4)
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(EPS))
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


def test_reverse_cross_entropy_examples():
    assert reverse_cross_entropy([1.0, 0.0], 1) == 0.0
    assert reverse_cross_entropy([0.5, 0.5], 0) == pytest.approx(0.6931, abs=1e-4)
    assert reverse_cross_entropy([1.0, 0.0], 0) == pytest.approx(-math.log(EPS))


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1 - 1e-3), st.floats(1e-6, 1 - 1e-3))
def test_reverse_cross_entropy_decreases_in_true_class_mass(a, b):
    lo, hi = sorted((a, b))
    if hi - lo < 1e-9:
        return
    assert reverse_cross_entropy([hi, 1 - hi], 0) > reverse_cross_entropy([lo, 1 - lo], 0)


def test_cross_entropy_to_uniform_examples():
    assert cross_entropy_to_uniform(np.full(7, 1 / 7)) == pytest.approx(math.log(7))
    assert cross_entropy_to_uniform([1.0, 0.0]) == pytest.approx(13.8155, abs=1e-3)
    p = np.array([0.91] + [0.01] * 9)
    assert cross_entropy_to_uniform(p) == pytest.approx(4.154, abs=1e-3)


def test_distillation_loss_examples():
    u = np.full(4, 0.25)
    assert distillation_loss(u, u) == pytest.approx(1.3863, abs=1e-4)
    p = np.array([0.2, 0.5, 0.3])
    assert distillation_loss(p, [0, 1, 0]) == pytest.approx(cross_entropy(p, 1))
    with pytest.raises(DimensionError):
        distillation_loss(p, [0.5, 0.5])


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("kind", ["standard", "reverse", "standard+oe", "distill"])
def test_dense_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(1)
    model = dense_net(5, 4, hidden=6, seed=2)
    x, o = rng.normal(size=5), rng.normal(size=5)
    target = rng.dirichlet(np.ones(4)) if kind == "distill" else 2
    assert gradient_check(model, x, kind, target, outlier=o) < 1e-4


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    model = conv_net(6, 6, 3, filters=2, kernel=3, stride=1, seed=4)
    x, o = rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 6, 6))
    for kind in ("standard", "reverse", "standard+oe"):
        assert gradient_check(model, x, kind, 1, outlier=o) < 1e-4


def test_input_gradient_matches_finite_differences():
    model = dense_net(3, 3, hidden=4, seed=1)
    x = np.array([0.3, -0.2, 0.5])
    g = input_gradient(model, x[None], [1])[0]
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num = (cross_entropy(forward(model, x + e), 1) - cross_entropy(forward(model, x - e), 1)) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-5, abs=1e-9)


# -- training ----------------------------------------------------------------


def test_separable_toy_reaches_full_train_accuracy(two_blobs):
    model, history = train(dense_net(2, 2, seed=0), two_blobs, TrainConfig(epochs=50))
    assert np.mean(model.predict(two_blobs.inputs) == two_blobs.labels) == 1.0
    assert history[-1] < history[0]


def test_convex_loss_history_is_non_increasing(two_blobs):
    # softmax regression (no hidden layer) is convex in its parameters
    _, history = train(dense_net(2, 2, hidden=None, seed=0), two_blobs, TrainConfig(learning_rate=0.05, epochs=40))
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_reverse_training_is_systematically_wrong(two_blobs):
    model, _ = train(dense_net(2, 2, seed=0), two_blobs, TrainConfig(epochs=50), "reverse")
    assert np.mean(model.predict(two_blobs.inputs) == two_blobs.labels) < 0.5


def test_zero_oe_weight_matches_standard(two_blobs):
    cfg = TrainConfig(epochs=5, oe_weight=0.0)
    outliers = LabeledDataset(np.random.default_rng(0).normal(size=(30, 2)), np.zeros(30), "outlier")
    a, _ = train(dense_net(2, 2, seed=1), two_blobs, cfg, "standard")
    b, _ = train(dense_net(2, 2, seed=1), two_blobs, cfg, "standard+oe", outliers)
    for pa, pb in zip(a.params, b.params):
        for name in pa:
            np.testing.assert_array_equal(pa[name], pb[name])


def test_training_is_bit_reproducible(two_blobs):
    cfg = TrainConfig(epochs=3, rng_seed=9)
    a, ha = train(dense_net(2, 2, seed=1), two_blobs, cfg)
    b, hb = train(dense_net(2, 2, seed=1), two_blobs, cfg)
    assert classifier_to_bytes(a) == classifier_to_bytes(b)
    assert ha == hb


def test_larger_oe_weight_lowers_outlier_msp(ctx0):
    b = ctx0.bundle
    means = []
    for lam in (0.0, 0.5, 1.0):
        model, _ = train(dense_net(20, 10, seed=0), b.train, TrainConfig(epochs=30, oe_weight=lam), "standard+oe", b.outliers)
        means.append(model.predict_proba(b.outliers.inputs).max(axis=1).mean())
    assert means[1] <= means[0] + 0.02
    assert means[2] <= means[1] + 0.02
    assert means[2] < means[0]


def test_training_guards(two_blobs):
    with pytest.raises(ConfigurationError):
        train(dense_net(2, 2), two_blobs.with_role("defender-test"), TrainConfig(epochs=1))
    with pytest.raises(ConfigurationError):
        train(dense_net(2, 2), two_blobs.subset([]), TrainConfig(epochs=1))
    with pytest.raises(ConfigurationError):
        train(dense_net(2, 2), two_blobs, TrainConfig(epochs=1), "standard+oe")
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)


def test_divergence_is_reported(two_blobs):
    x = two_blobs.inputs.copy()
    x[3, 0] = np.inf
    bad = LabeledDataset(x, two_blobs.labels, "defender-train", num_classes=2)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train(dense_net(2, 2), bad, TrainConfig(epochs=2))


# -- persistence -------------------------------------------------------------


def test_model_file_round_trip_is_bit_identical(tmp_path):
    model = conv_net(8, 8, 3, filters=2, kernel=3, seed=5)
    path = save_classifier(model, tmp_path / "m.amlm")
    loaded = load_classifier(path)
    x = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
    np.testing.assert_array_equal(model.predict_proba(x), loaded.predict_proba(x))
    assert classifier_to_bytes(loaded) == path.read_bytes()


def test_model_file_corruption_is_detected():
    blob = classifier_to_bytes(dense_net(3, 2))
    with pytest.raises(FormatError):
        classifier_from_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(FormatError, match="offset"):
        classifier_from_bytes(blob[:-3])
    with pytest.raises(FormatError):
        classifier_from_bytes(blob + b"\0")
