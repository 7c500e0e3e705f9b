"""Quick in-process verification: gradient checks and core invariants."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, grouped_query_attention, init_attention, multi_head_attention
from .layers import BatchNormStats, RngState, batch_norm, conv2d, layer_norm, maxpool2d
from .metrics import basic_rates
from .model import ModelConfig, build_model
from .training import categorical_cross_entropy

TOL_F64 = 1e-6


def _weighted(fn, shape, seed):
    w = np.random.default_rng(seed).normal(size=shape)
    return lambda x: T.sum(fn(x) * w)


def check_elementwise() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for op in ("relu", "sigmoid", "exp", "negate"):
        x = rng.normal(size=(3, 4))
        worst = max(worst, T.finite_difference_check(_weighted(lambda t, op=op: T.elementwise(op, t), (3, 4), 1), x))
    x = rng.uniform(0.5, 2, size=(3, 4))
    worst = max(worst, T.finite_difference_check(_weighted(T.log, (3, 4), 2), x))
    b = rng.uniform(0.5, 2, size=(1, 4))
    worst = max(worst, T.finite_difference_check(_weighted(lambda t: t / b * t, (3, 4), 3), x))
    return worst


def check_conv() -> float:
    rng = np.random.default_rng(1)
    k = rng.normal(size=(3, 3, 2, 3))
    return T.finite_difference_check(_weighted(lambda t: conv2d(t, k, 1, "same"), (1, 8, 8, 3), 4), rng.normal(size=(1, 8, 8, 2)))


def check_pool_norm() -> float:
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 3))
    g, b = rng.normal(size=3), rng.normal(size=3)
    e1 = T.finite_difference_check(_weighted(lambda t: maxpool2d(t), (2, 2, 2, 3), 5), x)
    e2 = T.finite_difference_check(_weighted(lambda t: batch_norm(t, g, b, BatchNormStats(3)), x.shape, 6), x)
    e3 = T.finite_difference_check(_weighted(lambda t: layer_norm(t, g, b), x.shape, 7), x)
    return max(e1, e2, e3)


def check_attention() -> float:
    cfg = AttentionConfig(4, 2, 1)
    p = init_attention("a", cfg, RngState(3))
    x = np.random.default_rng(3).normal(size=(2, 3, 4))
    return T.finite_difference_check(_weighted(lambda t: grouped_query_attention(t, p, cfg)[0], x.shape, 8), x)


def check_gqa_mha() -> float:
    cfg = AttentionConfig(8, 4, 4)
    p = init_attention("a", cfg, RngState(4))
    x = np.random.default_rng(4).normal(size=(1, 5, 8)).astype(np.float32)
    a = grouped_query_attention(x, p, cfg)[0].data
    b = multi_head_attention(x, p, cfg)[0].data
    return float(np.abs(a - b).max())


def check_model() -> float:
    cfg = ModelConfig(num_classes=3, input_size=16, stem_filters=(4, 4), residual_filters=8, num_heads=4,
                      num_kv_groups=2, dropout_rate=0.0, dense_units=8, spatial_kernel=3)
    model = build_model(cfg, RngState(5))
    gen = np.random.default_rng(5)
    for t in model.parameters().values():
        t.data = t.data + 0.1 * gen.normal(size=t.shape)
    model.train()
    x = gen.uniform(size=(2, 16, 16, 3))
    y = np.eye(3)[[0, 2]]
    errs = T.parameter_check(
        lambda: categorical_cross_entropy(model.forward(x).probs, y), list(model.parameters().values()), max_coords=3
    )
    return max(errs.values())


def check_micro_identity() -> float:
    gen = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        k = int(gen.integers(2, 7))
        cm = gen.integers(0, 51, size=(k, k))
        cm[0, 0] += 1
        r = basic_rates(cm)
        worst = max(worst, abs(r.precision_micro - r.accuracy), abs(r.recall_micro - r.accuracy), abs(r.f1_micro - r.accuracy))
    return worst


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("elementwise gradients (f64)", check_elementwise, TOL_F64),
    ("conv2d gradient (f64)", check_conv, TOL_F64),
    ("maxpool/batch_norm/layer_norm gradients (f64)", check_pool_norm, TOL_F64),
    ("grouped-query attention gradient (f64)", check_attention, TOL_F64),
    ("GQA(G=H) == MHA", check_gqa_mha, 1e-5),
    ("reduced model end-to-end gradient (f64)", check_model, 1e-5),
    ("micro P = R = F1 = accuracy", check_micro_identity, 1e-12),
]


def run(echo=print) -> bool:
    ok_all = True
    with T.precision(np.float64):
        for name, fn, tol in CHECKS:
            t0 = time.perf_counter()
            try:
                err = fn()
                ok = err < tol
                detail = f"err={err:.3g} tol={tol:g}"
            except Exception as e:  # report and keep going
                ok, detail = False, f"{type(e).__name__}: {e}"
            ok_all &= ok
            echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return ok_all
