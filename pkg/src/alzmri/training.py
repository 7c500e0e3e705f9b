"""Loss, optimizers, learning-rate schedules and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .layers import RngState
from .metrics import one_hot
from .tensor import Tensor, Tape, as_tensor

logger = logging.getLogger(__name__)

CE_EPS = 1e-12
PLATEAU_THRESHOLD = 1e-4


def categorical_cross_entropy(probs, onehot) -> Tensor:
    probs = as_tensor(probs)
    onehot = as_tensor(onehot, dtype=probs.dtype)
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise T.ShapeError(f"cross-entropy shape mismatch {probs.shape} vs {onehot.shape}")
    n = probs.shape[0]
    return T.sum(onehot * T.log(probs + CE_EPS)) * (-1.0 / n)


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    lr: float = 1e-4
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    rho: float = 0.9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    missing = [name for name, p in params.items() if p.requires_grad and name not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place Adam update with bias correction."""
    _check_grads(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name].astype(np.float64)
        m = state.m.get(name, 0.0) * b1 + (1 - b1) * g
        v = state.v.get(name, 0.0) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)


def sgd_step(params, grads, state: OptimizerState) -> None:
    _check_grads(params, grads)
    state.t += 1
    for name, p in params.items():
        if not p.requires_grad:
            continue
        vel = state.m.get(name, 0.0) * state.momentum - state.lr * grads[name]
        state.m[name] = vel
        p.data = (p.data + vel).astype(p.dtype)


def rmsprop_step(params, grads, state: OptimizerState) -> None:
    _check_grads(params, grads)
    state.t += 1
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name].astype(np.float64)
        v = state.v.get(name, 0.0) * state.rho + (1 - state.rho) * g * g
        state.v[name] = v
        p.data = (p.data - state.lr * g / (np.sqrt(v) + state.eps)).astype(p.dtype)


OPTIMIZERS = {"adam": adam_step, "sgd": sgd_step, "rmsprop": rmsprop_step}


def optimizer_step(params, grads, state: OptimizerState) -> None:
    OPTIMIZERS[state.kind](params, grads, state)


# ---------------------------------------------------------------- schedulers


@dataclass
class SchedulerState:
    lr: float = 1e-4
    factor: float = 0.7
    patience: int = 7
    min_lr: float = 1e-6
    threshold: float = PLATEAU_THRESHOLD
    best: float = math.inf
    epochs_since_improve: int = 0


def scheduler_step(state: SchedulerState, val_loss: float) -> float:
    """ReduceOnPlateau on validation loss; returns the lr for the next epoch."""
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
        if state.epochs_since_improve >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.epochs_since_improve = 0
    return state.lr


def exponential_lr(initial: float, epoch: int, decay: float = 0.96, min_lr: float = 1e-6) -> float:
    return max(initial * decay**epoch, min_lr)


def cosine_lr(initial: float, epoch: int, total: int, min_lr: float = 1e-6) -> float:
    return min_lr + 0.5 * (initial - min_lr) * (1 + math.cos(math.pi * epoch / max(total, 1)))


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    factor: float = 0.7
    patience: int = 7
    min_lr: float = 1e-6
    optimizer: str = "adam"
    scheduler: str = "plateau"
    seed: int = 43


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr), f"{r.seconds:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [
            EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["val_acc"]), float(r["lr"]), float(r["seconds"]))
            for r in rows
        ]
        return cls(recs)


@dataclass
class ArraySet:
    """Images [N,H,W,C] in [0,1] with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def batches(n: int, size: int, order: np.ndarray | None = None) -> Iterable[np.ndarray]:
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start : start + size]


def predict(model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Infer-mode class probabilities, no tape."""
    mode = model.mode
    model.eval()
    out = []
    with T.no_tape():
        for b in batches(len(x), batch_size):
            out.append(model.forward(x[b]).probs.data)
    model.mode = mode
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate_loss(model, data: ArraySet, batch_size: int = 32) -> tuple[float, float]:
    probs = predict(model, data.x, batch_size)
    k = model.cfg.num_classes
    loss = -np.mean(np.sum(one_hot(data.y, k) * np.log(probs + CE_EPS), axis=1))
    acc = float(np.mean(probs.argmax(axis=1) == data.y))
    return float(loss), acc


def train(model, train_set: ArraySet, val_set: ArraySet | None, cfg: TrainConfig) -> tuple[object, TrainLog]:
    """Mini-batch training with per-epoch validation and best-weight retention."""
    if len(train_set) == 0:
        raise ValueError("empty training split")
    if cfg.optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr, kind=cfg.optimizer)
    sched = SchedulerState(lr=cfg.lr, factor=cfg.factor, patience=cfg.patience, min_lr=cfg.min_lr)
    base = RngState(cfg.seed, stream=7)
    k = model.cfg.num_classes
    dtype = next(iter(params.values())).dtype
    log = TrainLog()
    best_loss, best_state = math.inf, model.snapshot()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.scheduler == "exponential":
            opt.lr = exponential_lr(cfg.lr, epoch - 1, min_lr=cfg.min_lr)
        elif cfg.scheduler == "cosine":
            opt.lr = cosine_lr(cfg.lr, epoch - 1, cfg.epochs, cfg.min_lr)
        elif cfg.scheduler != "plateau":
            raise ValueError(f"unknown scheduler {cfg.scheduler!r}")
        lr_used = opt.lr

        order = base.split(epoch).generator.permutation(len(train_set))
        model.train()
        total, seen = 0.0, 0
        for b in batches(len(train_set), cfg.batch_size, order):
            x = train_set.x[b].astype(dtype, copy=False)
            y = one_hot(train_set.y[b], k).astype(dtype)
            with Tape() as tape:
                loss = categorical_cross_entropy(model.forward(x).probs, y)
            grads = tape.backward(loss).by_name()
            optimizer_step(params, grads, opt)
            total += loss.item() * len(b)
            seen += len(b)
        train_loss = total / seen

        if val_set is not None and len(val_set):
            val_loss, val_acc = evaluate_loss(model, val_set)
        else:
            val_loss, val_acc = evaluate_loss(model, train_set)
        if cfg.scheduler == "plateau":
            opt.lr = scheduler_step(sched, val_loss)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.snapshot()
            log.best_epoch = epoch
        rec = EpochRecord(epoch, train_loss, val_loss, val_acc, lr_used, time.perf_counter() - t0)
        log.records.append(rec)
        logger.info("epoch %d %s", epoch, asdict(rec))

    model.load_state_arrays(best_state)
    model.eval()
    return model, log
