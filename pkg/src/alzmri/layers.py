"""Layer primitives on top of :mod:`alzmri.tensor`.

All image tensors are NHWC.  Convolution is cross-correlation (no kernel
flip) and is implemented with strided patch views; its backward pass is a
dedicated tape node rather than a composition of primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor, make

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LN_EPS = 1e-5


# ---------------------------------------------------------------- rng


class RngState:
    """Counter-based (Philox) generator identified by ``(seed, stream)``.

    ``split`` derives an independent child stream, so per-sample draws can be
    made order-independent.
    """

    algorithm = "philox"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys: int) -> "RngState":
        child = RngState.__new__(RngState)
        child.seed, child.stream = self.seed, self.stream
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *keys))
        child.generator = np.random.Generator(np.random.Philox(ss))
        return child

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream})"


# ---------------------------------------------------------------- params


@dataclass
class LayerParams:
    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, key: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if key in self.tensors:
            raise ValueError(f"duplicate parameter {self.name}.{key}")
        t = Tensor(value, requires_grad=trainable, name=f"{self.name}.{key}")
        self.tensors[key] = t
        self.trainable[key] = trainable
        return t

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]


def he_uniform(rng: RngState, shape: tuple[int, ...], fan_in: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.generator.uniform(-limit, limit, size=shape).astype(dtype or T.default_dtype())


# ---------------------------------------------------------------- convolution


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, stride: int = 1, padding: str = "valid", bias=None) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects x[N,H,W,C] and kernel[kh,kw,Cin,Cout]")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if stride < 1 or kh < 1 or kw < 1:
        raise ValueError("stride and kernel size must be >= 1")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    # [N, Ho, Wo, C, kh, kw]
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    out = np.tensordot(patches, kernel.data, axes=([3, 4, 5], [2, 0, 1]))
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        gk = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))  # [C, kh, kw, Cout]
        gk = gk.transpose(1, 2, 0, 3)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g @ kernel.data[i, j].T
        gx = gxp[:, pt : pt + h, pl : pl + w, :]
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make("conv2d", out.astype(x.dtype, copy=False), inputs, bw)


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    win = win.reshape(n, ho, wo, c, window * window)
    arg = win.argmax(axis=-1)  # first row-major maximum on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        nn, ii, jj, cc = np.indices(arg.shape, sparse=True)
        np.add.at(gx, (nn, ii * stride + di, jj * stride + dj, cc), g)
        return (gx,)

    return make("maxpool2d", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects NHWC")
    return T.mean(x, axis=(1, 2))


def dense(x, weights, bias=None, activation: str | None = None) -> Tensor:
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense shape mismatch {x.shape} x {weights.shape}")
    y = T.matmul(x, weights)
    if bias is not None:
        y = y + bias
    if activation is None:
        return y
    if activation == "relu":
        return T.relu(y)
    if activation == "softmax":
        return T.softmax(y, axis=-1)
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------- normalization


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int, initialized: bool = False, dtype=None):
        dtype = dtype or T.default_dtype()
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = initialized

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = (BN_MOMENTUM * self.mean + (1 - BN_MOMENTUM) * mean).astype(self.mean.dtype)
        self.var = (BN_MOMENTUM * self.var + (1 - BN_MOMENTUM) * var).astype(self.var.dtype)
        self.initialized = True


def batch_norm(x, gamma, beta, stats: BatchNormStats, mode: str = "train") -> Tensor:
    """Normalize over all axes but the last (channels)."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = T.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = T.mean(T.square(centered), axis=axes, keepdims=True)
        xhat = centered / T.sqrt(var + BN_EPS)
        stats.update(mu.data.reshape(-1), var.data.reshape(-1))
    elif mode == "infer":
        if not stats.initialized:
            raise RuntimeError("batch_norm in infer mode before any statistics were recorded")
        scale = 1.0 / np.sqrt(stats.var + BN_EPS)
        xhat = (x - stats.mean.astype(x.dtype)) * scale.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return xhat * gamma + beta


def layer_norm(x, gamma, beta) -> Tensor:
    x = as_tensor(x)
    mu = T.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.mean(T.square(centered), axis=-1, keepdims=True)
    return centered / T.sqrt(var + LN_EPS) * gamma + beta


def dropout(x, rate: float, mode: str, rng: RngState | None) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    x = as_tensor(x)
    if mode == "infer" or rate == 0:
        return x
    keep = rng.generator.random(x.shape) >= rate
    scale = (keep / (1 - rate)).astype(x.dtype)
    return x * scale
