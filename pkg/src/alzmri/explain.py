"""Class-activation maps (GradCAM, Score-CAM, Faster Score-CAM, XGradCAM)
and heatmap overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .data import resize_bilinear
from .model import DEFAULT_CAPTURE, SPATIAL_CAPTURES, VECTOR_CAPTURES, Model

METHODS = ("gradcam", "scorecam", "faster-scorecam", "xgradcam")
SCORECAM_BATCH = 16

# piecewise-linear colour table: (position, (r, g, b))
COLOR_ANCHORS = (
    (0.0, (0, 0, 255)),
    (0.35, (0, 255, 255)),
    (0.5, (0, 255, 0)),
    (0.65, (255, 255, 0)),
    (1.0, (255, 0, 0)),
)


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    raw: np.ndarray  # [h, w] at capture resolution, >= 0
    source_resolution: tuple[int, int]
    weights: np.ndarray  # per-channel weights used in the sum
    method: str
    target_class: int
    layer: str
    params: dict = field(default_factory=dict)
    channels: np.ndarray | None = None

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "target-class": self.target_class,
            "capture-layer": self.layer,
            "params": self.params,
            "raw-min": float(self.raw.min()),
            "raw-max": float(self.raw.max()),
        }


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _prepare(model: Model, image, layer: str) -> np.ndarray:
    if layer in VECTOR_CAPTURES:
        raise ValueError(f"capture layer {layer!r} is not spatially resolved")
    if layer not in SPATIAL_CAPTURES:
        raise KeyError(f"unknown capture layer {layer!r}")
    x = getattr(image, "pixels", image)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    dtype = model.parameters()["dense2.kernel"].dtype
    return x.astype(dtype, copy=False)


def _finish(model, raw, weights, method, target, layer, params, channels=None) -> Heatmap:
    raw = np.maximum(raw, 0)
    size = model.cfg.input_size
    up = resize_bilinear(raw, size, size) if raw.shape != (size, size) else raw.copy()
    return Heatmap(normalize(up), raw, raw.shape, weights, method, int(target), layer, params, channels)


def _target(model: Model, x: np.ndarray, target: int | None) -> int:
    if target is None:
        with T.no_tape():
            target = int(model.forward(x).logits.data[0].argmax())
    if not 0 <= target < model.cfg.num_classes:
        raise ValueError(f"target class {target} out of range")
    return target


def activation_gradients(model: Model, x: np.ndarray, layer: str, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Captured activation A [h,w,C] and d(logit_target)/dA for one image."""
    with T.Tape() as tape:
        r = model.forward(x, capture=layer)
        score = r.logits[0, target]
    grads = tape.backward(score)
    if r.captured not in grads:
        raise RuntimeError(f"no gradient path from class score to {layer!r}")
    return r.captured.data[0].astype(np.float64), grads[r.captured][0].astype(np.float64)


def _gradient_cam(model, image, target, layer, eta, normalized, method) -> Heatmap:
    mode = model.mode
    model.eval()
    try:
        x = _prepare(model, image, layer)
        target = _target(model, x, target)
        acts, grads = activation_gradients(model, x, layer, target)
    finally:
        model.mode = mode
    if normalized:
        # activation-weighted gradient average of the original XGrad-CAM
        denom = acts.sum(axis=(0, 1))
        safe = np.where(denom == 0, 1, denom)
        alpha = np.where(denom == 0, 0, (grads * acts).sum(axis=(0, 1)) / safe)
    else:
        alpha = (grads + eta).mean(axis=(0, 1))
    raw = np.tensordot(acts, alpha, axes=([2], [0]))
    params = {"eta": eta, "normalized": normalized} if method == "xgradcam" else {}
    return _finish(model, raw, alpha, method, target, layer, params)


def gradcam(model: Model, image, target: int | None = None, layer: str = DEFAULT_CAPTURE) -> Heatmap:
    """ReLU of the feature maps weighted by their spatially averaged gradients."""
    return _gradient_cam(model, image, target, layer, 0.0, False, "gradcam")


def xgradcam(
    model: Model, image, target: int | None = None, layer: str = DEFAULT_CAPTURE, eta: float = 0.0, normalized: bool = False
) -> Heatmap:
    """Gradient weights shifted by ``eta`` before averaging.

    ``normalized=True`` switches to activation-normalized weights
    ``sum(A * dY/dA) / sum(A)`` instead.
    """
    return _gradient_cam(model, image, target, layer, eta, normalized, "xgradcam")


def _score_cam(model, x, target, layer, select, method, params) -> Heatmap:
    mode = model.mode
    model.eval()
    try:
        with T.no_tape():
            r = model.forward(x, capture=layer)
            if target is None:
                target = int(r.logits.data[0].argmax())
            if not 0 <= target < model.cfg.num_classes:
                raise ValueError(f"target class {target} out of range")
            acts = r.captured.data[0].astype(np.float64)
            channels = np.arange(acts.shape[-1]) if select is None else select(acts)
            size = model.cfg.input_size
            masked = []
            for k in channels:
                mask = normalize(resize_bilinear(acts[..., k], size, size))
                masked.append(x[0] * mask[..., None].astype(x.dtype))
            masked = np.stack(masked)
            scores = []
            for start in range(0, len(masked), SCORECAM_BATCH):
                scores.append(model.forward(masked[start : start + SCORECAM_BATCH]).logits.data[:, target])
            f = np.concatenate(scores).astype(np.float64)
    finally:
        model.mode = mode
    e = np.exp(f - f.max())
    omega = e / e.sum()
    raw = np.tensordot(acts[..., channels], omega, axes=([2], [0]))
    return _finish(model, raw, omega, method, target, layer, params, np.asarray(channels))


def scorecam(model: Model, image, target: int | None = None, layer: str = DEFAULT_CAPTURE) -> Heatmap:
    x = _prepare(model, image, layer)
    return _score_cam(model, x, target, layer, None, "scorecam", {})


def top_variance_channels(acts: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest spatial-variance channels, ascending."""
    c = acts.shape[-1]
    if not 1 <= k <= c:
        raise ValueError(f"top-K must be in [1, {c}]")
    var = acts.reshape(-1, c).var(axis=0)
    order = np.argsort(-var, kind="stable")
    return np.sort(order[:k])


def faster_scorecam(model: Model, image, target: int | None = None, layer: str = DEFAULT_CAPTURE, top_k: int = 10) -> Heatmap:
    """Score-CAM over only the ``top_k`` highest-variance channels."""
    x = _prepare(model, image, layer)
    return _score_cam(
        model, x, target, layer, lambda acts: top_variance_channels(acts, top_k), "faster-scorecam", {"top_k": top_k}
    )


def explain(model: Model, image, method: str, target: int | None = None, layer: str = DEFAULT_CAPTURE, **params) -> Heatmap:
    if method == "gradcam":
        return gradcam(model, image, target, layer)
    if method == "scorecam":
        return scorecam(model, image, target, layer)
    if method == "faster-scorecam":
        return faster_scorecam(model, image, target, layer, top_k=params.get("top_k", 10))
    if method == "xgradcam":
        return xgradcam(model, image, target, layer, eta=params.get("eta", 0.0), normalized=params.get("normalized", False))
    raise ValueError(f"unknown CAM method {method!r}; choose from {METHODS}")


# ---------------------------------------------------------------- rendering


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to RGB in [0,1] through the anchor table."""
    pos = [a[0] for a in COLOR_ANCHORS]
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    return np.stack([np.interp(v, pos, [a[1][c] / 255 for a in COLOR_ANCHORS]) for c in range(3)], axis=-1)


def render_overlay(heatmap: Heatmap | np.ndarray, original, alpha: float = 0.4) -> np.ndarray:
    """Blend ``alpha * colour + (1 - alpha) * original`` into 8-bit RGB."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    img = np.asarray(getattr(original, "pixels", original), dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if values.shape != img.shape[:2]:
        values = resize_bilinear(values, *img.shape[:2])
    out = alpha * colormap(values) + (1 - alpha) * img
    return np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)


def write_overlay(path, rgb: np.ndarray, heatmap: Heatmap | None = None) -> None:
    path = Path(path)
    try:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
        if heatmap is not None:
            path.with_suffix(".json").write_text(json.dumps(heatmap.sidecar(), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write overlay {path}: {e}") from e
