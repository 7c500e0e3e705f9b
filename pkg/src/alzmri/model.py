"""The full classifier: conv stem, spatial attention, multi-residual block,
GQA and MHA over spatial tokens, then pooled dense head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    feature_map_from_tokens,
    grouped_query_attention,
    init_attention,
    init_spatial_attention,
    multi_head_attention,
    spatial_attention,
    tokens_from_feature_map,
)
from .layers import (
    BatchNormStats,
    LayerParams,
    RngState,
    batch_norm,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    he_uniform,
    layer_norm,
    maxpool2d,
)
from .tensor import ShapeError, Tensor, as_tensor

SPATIAL_CAPTURES = ("stem1", "stem2", "spatial_attention", "multi_residual_out", "pool3", "attention_out")
VECTOR_CAPTURES = ("gap", "dense1")
DEFAULT_CAPTURE = "multi_residual_out"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    input_size: int = 128
    in_channels: int = 3
    stem_filters: tuple[int, ...] = (32, 64)
    residual_filters: int = 128
    num_heads: int = 4
    num_kv_groups: int = 2
    dropout_rate: float = 0.3
    dense_units: int = 128
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.stem_filters or min(self.stem_filters) < 1:
            raise ValueError("stem_filters must be positive")
        if self.residual_filters < 1 or self.dense_units < 1:
            raise ValueError("filter counts must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        side = self.input_size
        for _ in range(len(self.stem_filters) + 1):
            side //= 2
        if side < 1:
            raise ValueError(f"input_size {self.input_size} too small for {len(self.stem_filters) + 1} poolings")
        self.attention  # validates head/group divisibility

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.residual_filters, self.num_heads, self.num_kv_groups)

    @property
    def mha(self) -> AttentionConfig:
        return AttentionConfig(self.residual_filters, self.num_heads, self.num_heads)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class ForwardResult:
    probs: Tensor
    captured: Tensor | None
    logits: Tensor
    gate: Tensor | None = None
    attention: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (probs, captured)
        return iter((self.probs, self.captured))


def init_conv(p: LayerParams, key: str, rng: RngState, k: int, cin: int, cout: int) -> None:
    p.add(key, he_uniform(rng, (k, k, cin, cout), k * k * cin))


def init_bn(p: LayerParams, prefix: str, channels: int) -> None:
    dt = T.default_dtype()
    p.add(f"{prefix}gamma", np.ones(channels, dtype=dt))
    p.add(f"{prefix}beta", np.zeros(channels, dtype=dt))


def init_multi_residual(name: str, rng: RngState, cin: int, filters: int) -> LayerParams:
    p = LayerParams(name)
    for k in (1, 3, 5):
        init_conv(p, f"conv{k}", rng, k, cin, filters)
        init_bn(p, f"bn{k}_", filters)
    if cin != filters:
        init_conv(p, "proj", rng, 1, cin, filters)
    return p


def multi_residual_block(x, params: LayerParams, stats: dict[str, BatchNormStats], mode: str = "train") -> Tensor:
    """Sum of 1x1 / 3x3 / 5x5 conv+BN+ReLU branches plus a skip path, then ReLU.

    The skip is the identity when channel counts match, otherwise a 1x1
    projection.  ``stats`` holds running statistics keyed ``bn1``/``bn3``/``bn5``.
    """
    x = as_tensor(x)
    total = None
    for k in (1, 3, 5):
        y = conv2d(x, params[f"conv{k}"], padding="same")
        y = T.relu(batch_norm(y, params[f"bn{k}_gamma"], params[f"bn{k}_beta"], stats[f"bn{k}"], mode))
        total = y if total is None else total + y
    skip = conv2d(x, params["proj"], padding="valid") if "proj" in params.tensors else x
    return T.relu(total + skip)


class Model:
    def __init__(self, cfg: ModelConfig, rng: RngState):
        self.cfg = cfg
        self.mode = "infer"
        self.layers: dict[str, LayerParams] = {}
        self.bn: dict[str, BatchNormStats] = {}
        self.dropout_rng = rng.split(1)
        self.images_forwarded = 0
        self._build(rng.split(0))

    # ---------------------------------------------------------- construction

    def _build(self, rng: RngState) -> None:
        cfg = self.cfg
        cin = cfg.in_channels
        for i, f in enumerate(cfg.stem_filters, start=1):
            p = LayerParams(f"stem{i}")
            init_conv(p, "kernel", rng, 3, cin, f)
            init_bn(p, "", f)
            self._add(p)
            self.bn[f"stem{i}"] = BatchNormStats(f, initialized=True)
            cin = f
        self._add(init_spatial_attention("spatial_attention", rng, cfg.spatial_kernel))
        self._add(init_multi_residual("multi_residual", rng, cin, cfg.residual_filters))
        for k in (1, 3, 5):
            self.bn[f"multi_residual.bn{k}"] = BatchNormStats(cfg.residual_filters, initialized=True)
        d = cfg.residual_filters
        dt = T.default_dtype()
        for name in ("ln1", "ln2"):
            p = LayerParams(name)
            p.add("gamma", np.ones(d, dtype=dt))
            p.add("beta", np.zeros(d, dtype=dt))
            self._add(p)
        self._add(init_attention("gqa", cfg.attention, rng))
        self._add(init_attention("mha", cfg.mha, rng))
        p = LayerParams("dense1")
        p.add("kernel", he_uniform(rng, (d, cfg.dense_units), d))
        p.add("bias", np.zeros(cfg.dense_units, dtype=dt))
        self._add(p)
        # zero classifier kernel: untrained output is exactly uniform
        p = LayerParams("dense2")
        p.add("kernel", np.zeros((cfg.dense_units, cfg.num_classes), dtype=dt))
        p.add("bias", np.zeros(cfg.num_classes, dtype=dt))
        self._add(p)

    def _add(self, p: LayerParams) -> None:
        if p.name in self.layers:
            raise ValueError(f"duplicate layer {p.name}")
        self.layers[p.name] = p

    # ---------------------------------------------------------- parameters

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for p in self.layers.values() for k, t in p.tensors.items() if p.trainable[k]}

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persisted arrays: parameters then batch-norm running stats."""
        out = {name: t.data for name, t in self.parameters().items()}
        for name, s in self.bn.items():
            out[f"{name}.running_mean"] = s.mean
            out[f"{name}.running_var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ValueError(f"weight mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.parameters().items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=t.dtype)
        for name, s in self.bn.items():
            s.mean = np.array(arrays[f"{name}.running_mean"], dtype=s.mean.dtype)
            s.var = np.array(arrays[f"{name}.running_var"], dtype=s.var.dtype)
            s.initialized = True

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "infer"
        return self

    # ---------------------------------------------------------- forward

    def forward(self, x, capture: str | None = None) -> ForwardResult:
        cfg = self.cfg
        if capture is not None and capture not in SPATIAL_CAPTURES + VECTOR_CAPTURES:
            raise KeyError(f"unknown capture layer {capture!r}")
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise ShapeError(
                f"expected input [N,{cfg.input_size},{cfg.input_size},{cfg.in_channels}], got {x.shape}"
            )
        self.images_forwarded += x.shape[0]
        mode = self.mode
        L = self.layers
        captured: dict[str, Tensor] = {}

        def keep(name: str, t: Tensor) -> Tensor:
            if name == capture:
                tape = T.active_tape()
                if tape is not None:
                    tape.watch(t)
                captured[name] = t
            return t

        h = x
        for i in range(1, len(cfg.stem_filters) + 1):
            p = L[f"stem{i}"]
            h = conv2d(h, p["kernel"], padding="same")
            h = T.relu(batch_norm(h, p["gamma"], p["beta"], self.bn[f"stem{i}"], mode))
            h = keep(f"stem{i}", maxpool2d(h, 2, 2))
        h, gate = spatial_attention(h, L["spatial_attention"])
        keep("spatial_attention", h)
        stats = {f"bn{k}": self.bn[f"multi_residual.bn{k}"] for k in (1, 3, 5)}
        h = keep("multi_residual_out", multi_residual_block(h, L["multi_residual"], stats, mode))
        h = keep("pool3", maxpool2d(h, 2, 2))

        side_h, side_w = h.shape[1], h.shape[2]
        tok = tokens_from_feature_map(h)
        a, w_gqa = grouped_query_attention(layer_norm(tok, L["ln1"]["gamma"], L["ln1"]["beta"]), L["gqa"], cfg.attention)
        tok = tok + a
        a, w_mha = multi_head_attention(layer_norm(tok, L["ln2"]["gamma"], L["ln2"]["beta"]), L["mha"], cfg.mha)
        tok = tok + a
        h = keep("attention_out", feature_map_from_tokens(tok, side_h, side_w))

        h = dropout(h, cfg.dropout_rate, mode, self.dropout_rng)
        h = keep("gap", global_avg_pool(h))
        h = keep("dense1", dense(h, L["dense1"]["kernel"], L["dense1"]["bias"], activation="relu"))
        logits = dense(h, L["dense2"]["kernel"], L["dense2"]["bias"])
        probs = T.softmax(logits, axis=-1)
        return ForwardResult(probs, captured.get(capture), logits, gate, {"gqa": w_gqa, "mha": w_mha})

    __call__ = forward


def build_model(cfg: ModelConfig, rng: RngState | int) -> Model:
    if isinstance(rng, int):
        rng = RngState(rng)
    return Model(cfg, rng)


def forward(model: Model, x, capture: str | None = None) -> ForwardResult:
    return model.forward(x, capture)
