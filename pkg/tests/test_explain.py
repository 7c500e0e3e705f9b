import json
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from alzmri import tensor as T
from alzmri.data import ImageSample, resize_bilinear
from alzmri.layers import conv2d, maxpool2d
from alzmri.explain import (
    METHODS,
    colormap,
    explain,
    faster_scorecam,
    gradcam,
    normalize,
    render_overlay,
    scorecam,
    top_variance_channels,
    write_overlay,
    xgradcam,
)
from alzmri.model import DEFAULT_CAPTURE, ForwardResult
from alzmri.tensor import Tensor

from conftest import TINY, randomized_model

LAYER = DEFAULT_CAPTURE


class ToyModel:
    """Minimal model interface: ``acts_fn(x) -> A`` and ``head(x, A) -> logits``."""

    def __init__(self, acts_fn, head, input_size=8, num_classes=2):
        self.cfg = SimpleNamespace(input_size=input_size, num_classes=num_classes)
        self.acts_fn, self.head = acts_fn, head
        self.mode = "infer"
        self.images_forwarded = 0

    def parameters(self):
        return {"dense2.kernel": Tensor(np.zeros(1), dtype=np.float64)}

    def eval(self):
        self.mode = "infer"
        return self

    def forward(self, x, capture=None):
        x = T.as_tensor(x)
        self.images_forwarded += x.shape[0]
        a = self.acts_fn(x)
        if capture is not None and T.active_tape() is not None:
            T.active_tape().watch(a)
        logits = self.head(x, a)
        return ForwardResult(T.softmax(logits, axis=-1), a if capture else None, logits)


def const_acts(A0):
    A0 = np.asarray(A0, dtype=np.float64)
    return lambda x: Tensor(np.repeat(A0[None], x.shape[0], axis=0))


def linear_head(W, bias=(0.0, 0.0), quad=0.0):
    """logit_c = sum(W[c] * A) + quad * sum(A^2) (class 0 only) + bias_c."""
    W = np.asarray(W, dtype=np.float64)

    def head(x, a):
        cols = []
        for c in range(W.shape[0]):
            s = T.sum(a * W[c], axis=(1, 2, 3), keepdims=False)
            if quad and c == 0:
                s = s + T.sum(T.square(a), axis=(1, 2, 3)) * quad
            cols.append(T.reshape(s + bias[c], (-1, 1)))
        return T.concat(cols, axis=1)

    return head


def image(size=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(size, size, 3))


# ---------------------------------------------------------------- GradCAM


def test_gradcam_zero_gradient_is_zero_map(f64):
    A0 = np.random.default_rng(0).uniform(size=(4, 4, 2))
    model = ToyModel(const_acts(A0), linear_head(np.zeros((2, 4, 4, 2)), bias=(1.0, 0.0)))
    h = gradcam(model, image(), target=0, layer=LAYER)
    assert not h.raw.any() and not h.values.any()


def test_gradcam_single_channel_proportional(f64):
    A0 = np.random.default_rng(1).uniform(size=(8, 8, 1))
    model = ToyModel(const_acts(A0), linear_head(np.full((2, 8, 8, 1), 0.3)))
    h = gradcam(model, image(), target=0, layer=LAYER)
    np.testing.assert_allclose(h.values, normalize(A0[..., 0]), atol=1e-6)


def test_gradcam_hand_set_two_channel_fd_oracle(f64):
    A0 = np.array([[[1.0, 0.0], [2.0, 1.0]], [[0.5, 3.0], [0.0, 1.0]]])  # [2,2,2]
    W = np.array([[[[0.4, -0.2], [0.1, 0.3]], [[-0.5, 0.2], [0.2, -0.1]]], np.zeros((2, 2, 2))])
    head = linear_head(W, quad=0.05)
    model = ToyModel(const_acts(A0), head, input_size=2)

    def score(a):
        return float(head(None, Tensor(a[None])).data[0, 0])

    step = 1e-5
    grad = np.zeros_like(A0)
    for idx in np.ndindex(A0.shape):
        ap, am = A0.copy(), A0.copy()
        ap[idx] += step
        am[idx] -= step
        grad[idx] = (score(ap) - score(am)) / (2 * step)
    alpha = grad.mean(axis=(0, 1))
    expected = np.maximum(A0[..., 0] * alpha[0] + A0[..., 1] * alpha[1], 0)
    h = gradcam(model, image(2), target=0, layer=LAYER)
    np.testing.assert_allclose(h.weights, alpha, atol=1e-8)
    np.testing.assert_allclose(h.raw, expected, atol=1e-8)


def test_gradcam_alpha_matches_fd_f32():
    # frozen conv -> relu feature map, smooth nonlinear head
    rng = np.random.default_rng(3)
    k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    W = rng.normal(size=(4, 4, 4)).astype(np.float32)

    def acts_fn(x):
        return T.relu(maxpool2d(conv2d(x, k, padding="same")))

    def head(x, a):
        s = T.sum(T.sigmoid(a * W), axis=(1, 2, 3))
        return T.concat([T.reshape(s, (-1, 1)), T.reshape(s * 0.0, (-1, 1))], axis=1)

    model = ToyModel(acts_fn, head)
    model.parameters = lambda: {"dense2.kernel": Tensor(np.zeros(1, np.float32))}
    x = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    h = gradcam(model, x, target=0, layer=LAYER)

    A = acts_fn(Tensor(x[None])).data[0]
    step = np.float32(1e-2)
    grad = np.zeros(A.shape)
    for idx in np.ndindex(A.shape):
        ap, am = A.copy(), A.copy()
        ap[idx] += step
        am[idx] -= step
        grad[idx] = (float(head(None, Tensor(ap[None])).data[0, 0]) - float(head(None, Tensor(am[None])).data[0, 0])) / (
            float(ap[idx]) - float(am[idx])
        )
    alpha_fd = grad.mean(axis=(0, 1))
    assert T.relative_error(h.weights, alpha_fd) < 1e-3


# ---------------------------------------------------------------- XGradCAM


def test_xgradcam_eta_zero_equals_gradcam():
    model = randomized_model().eval()
    x = np.random.default_rng(0).uniform(size=(16, 16, 3)).astype(np.float32)
    for target in range(3):
        g = gradcam(model, x, target)
        xg = xgradcam(model, x, target, eta=0.0)
        assert np.max(np.abs(g.values - xg.values)) < 1e-6
        assert np.array_equal(g.weights, xg.weights)


def test_xgradcam_eta_shift():
    model = randomized_model().eval()
    x = np.random.default_rng(1).uniform(size=(16, 16, 3)).astype(np.float32)
    g = gradcam(model, x, 1)
    xg = xgradcam(model, x, 1, eta=0.25)
    np.testing.assert_allclose(xg.weights - g.weights, 0.25, atol=1e-12)


def test_xgradcam_zero_gradient_eta_one(f64):
    A0 = np.random.default_rng(2).normal(size=(4, 4, 3))
    model = ToyModel(const_acts(A0), linear_head(np.zeros((2, 4, 4, 3)), bias=(0.5, 0.0)))
    h = xgradcam(model, image(), target=0, layer=LAYER, eta=1.0)
    np.testing.assert_allclose(h.raw, np.maximum(A0.sum(axis=-1), 0), atol=1e-12)


def test_xgradcam_normalized_variant(f64):
    A0 = np.random.default_rng(3).uniform(size=(4, 4, 2))
    W = np.random.default_rng(4).normal(size=(2, 4, 4, 2))
    model = ToyModel(const_acts(A0), linear_head(W))
    h = xgradcam(model, image(), target=0, layer=LAYER, normalized=True)
    expected = (W[0] * A0).sum(axis=(0, 1)) / A0.sum(axis=(0, 1))
    np.testing.assert_allclose(h.weights, expected, atol=1e-12)


# ---------------------------------------------------------------- Score-CAM


def _blocks():
    A = np.zeros((4, 4, 3))
    A[:2, :2, 0] = 1.0  # top-left
    A[2:, 2:, 1] = 1.0  # bottom-right
    A[1:3, 1:3, 2] = 1.0  # centre
    return A


def _pixel_head(Wpix):
    def head(x, a):
        s = T.sum(x * Wpix[..., None], axis=(1, 2, 3))
        return T.concat([T.reshape(s, (-1, 1)), T.reshape(s * 0.0, (-1, 1))], axis=1)

    return head


def test_scorecam_toy_model_argmax(f64):
    A = _blocks()
    centre = resize_bilinear(A[..., 2], 8, 8)
    Wpix = np.where(centre > 0.5, 1.0, -1.0)
    model = ToyModel(const_acts(A), _pixel_head(Wpix))
    h = scorecam(model, np.ones((8, 8, 3)), target=0, layer=LAYER)
    np.testing.assert_allclose(h.weights.sum(), 1.0, atol=1e-6)
    assert int(np.argmax(h.weights)) == 2
    assert model.images_forwarded == 1 + 3


def test_scorecam_equal_scores_uniform_weights(f64):
    A = np.random.default_rng(5).normal(size=(4, 4, 5))
    model = ToyModel(const_acts(A), _pixel_head(np.zeros((8, 8))))
    h = scorecam(model, image(), target=0, layer=LAYER)
    np.testing.assert_allclose(h.weights, 0.2, atol=1e-12)
    np.testing.assert_allclose(h.raw, np.maximum(A.mean(axis=-1), 0), atol=1e-12)


def test_scorecam_weights_sum_to_one_on_model():
    model = randomized_model().eval()
    h = scorecam(model, np.random.default_rng(2).uniform(size=(16, 16, 3)).astype(np.float32))
    assert abs(h.weights.sum() - 1) < 1e-6
    assert model.images_forwarded == 1 + TINY.residual_filters


def test_faster_full_k_equals_scorecam():
    model = randomized_model().eval()
    x = np.random.default_rng(3).uniform(size=(16, 16, 3)).astype(np.float32)
    a = scorecam(model, x, 0)
    b = faster_scorecam(model, x, 0, top_k=TINY.residual_filters)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.raw, b.raw)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_faster_forward_count(k):
    model = randomized_model().eval()
    faster_scorecam(model, np.random.default_rng(4).uniform(size=(16, 16, 3)).astype(np.float32), 0, top_k=k)
    assert model.images_forwarded == k + 1


def test_faster_k1_single_channel(f64):
    A = np.random.default_rng(6).uniform(size=(4, 4, 3))
    A[..., 1] *= 5  # highest variance
    model = ToyModel(const_acts(A), _pixel_head(np.ones((8, 8))))
    h = faster_scorecam(model, image(), target=0, layer=LAYER, top_k=1)
    assert h.channels.tolist() == [1]
    np.testing.assert_allclose(h.raw, A[..., 1], atol=1e-12)


def test_top_variance_channels():
    A = np.zeros((3, 3, 4))
    A[..., 0] = np.arange(9).reshape(3, 3)
    A[..., 2] = 2 * np.arange(9).reshape(3, 3)
    assert top_variance_channels(A, 2).tolist() == [0, 2]
    with pytest.raises(ValueError):
        top_variance_channels(A, 5)


# ---------------------------------------------------------------- shared properties


@pytest.mark.parametrize("method", METHODS)
def test_methods_nonnegative_normalized_deterministic(method):
    model = randomized_model().eval()
    x = ImageSample(np.random.default_rng(5).uniform(size=(16, 16, 3)).astype(np.float32), 0)
    a = explain(model, x, method, top_k=3)
    b = explain(model, x, method, top_k=3)
    assert a.values.shape == (16, 16)
    assert a.raw.min() >= 0 and 0 <= a.values.min() and a.values.max() <= 1
    assert np.array_equal(a.values, b.values)


def test_explain_errors():
    model = randomized_model().eval()
    x = np.zeros((16, 16, 3), np.float32)
    with pytest.raises(ValueError):
        gradcam(model, x, layer="gap")
    with pytest.raises(KeyError):
        gradcam(model, x, layer="nope")
    with pytest.raises(ValueError):
        gradcam(model, x, target=3)
    with pytest.raises(ValueError):
        explain(model, x, "lime")


def test_normalize_constant_map():
    assert not normalize(np.full((3, 3), 2.0)).any()


# ---------------------------------------------------------------- rendering


def test_colormap_anchors():
    cm = colormap(np.array([0.0, 0.35, 0.5, 0.65, 1.0]))
    assert cm.tolist() == [[0, 0, 1], [0, 1, 1], [0, 1, 0], [1, 1, 0], [1, 0, 0]]


def test_overlay_alpha_extremes():
    rgb = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    sample = ImageSample((rgb / 255.0).astype(np.float32), 0)
    values = np.random.default_rng(1).uniform(size=(16, 16))
    assert np.array_equal(render_overlay(values, sample, 0.0), rgb)
    pure = render_overlay(values, sample, 1.0)
    assert np.array_equal(pure, np.rint(colormap(values) * 255).astype(np.uint8))
    assert render_overlay(np.zeros((16, 16)), sample, 1.0)[0, 0].tolist() == [0, 0, 255]
    assert render_overlay(np.ones((16, 16)), sample, 1.0)[0, 0].tolist() == [255, 0, 0]


def test_write_overlay_png_and_sidecar(tmp_path):
    model = randomized_model().eval()
    x = ImageSample(np.random.default_rng(6).uniform(size=(16, 16, 3)).astype(np.float32), 0)
    h = gradcam(model, x, 2)
    rgb = render_overlay(h, x)
    write_overlay(tmp_path / "o.png", rgb, h)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), rgb)
    side = json.loads((tmp_path / "o.json").read_text())
    assert side["method"] == "gradcam" and side["target-class"] == 2 and side["capture-layer"] == LAYER
    assert side["raw-min"] >= 0
