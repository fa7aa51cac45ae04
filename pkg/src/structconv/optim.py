"""ADAM with an L1 subgradient on convolution kernels, and the training loops."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .layers import ShapeMismatch
from .models import ModelParams, ModelSpec, apply_bn_updates, backward, forward
from .tensor import make_rng

LOG_COLUMNS = ("epoch", "stage", "train_loss", "val_loss", "l1_lambda", "wall_seconds")


class EmptyDataset(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_count: int = 32
    batch_size: int = 0  # nonzero overrides batch_count
    l1_lambda: float = 1e-4
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4
    stage1_max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.batch_count < 1:
            raise ValueError("batch_count must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, cfg: TrainConfig | None = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        m = [{k: np.zeros_like(p[k]) for k in ("weight", "bias", "gamma", "beta") if k in p}
             for p in params.layers]
        v = [{k: np.zeros_like(a) for k, a in layer.items()} for layer in m]
        return cls(m, v, 0, cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps)


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} != target {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def l1_gradient(w: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
    """``grad + lam * sign(w)`` with ``sign(0) = 0``."""
    return grad + lam * np.sign(w)


@numba.njit(cache=True)
def _adam_update(w, g, m, v, alpha, beta1, beta2, c1, c2, eps):
    for i in range(w.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        w[i] -= alpha * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def adam_step(params: ModelParams, grads: list[dict], state: AdamState, l1_lambda: float = 0.0) -> None:
    """Bias-corrected ADAM update, in place.

    L1 applies to convolution kernel weights only. Masked positions of
    kernels, their moments and their updates stay exactly zero.
    """
    if len(grads) != len(params.layers):
        raise ShapeMismatch(f"{len(grads)} gradient sets for {len(params.layers)} layers")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for idx, (p, gd) in enumerate(zip(params.layers, grads)):
        mask = params.masks[idx]
        for name, g in gd.items():
            w = p[name]
            if g.shape != w.shape:
                raise ShapeMismatch(f"layer {idx} {name}: grad {g.shape} != param {w.shape}")
            wmask = None
            if name == "weight" and mask is not None:
                wmask = np.broadcast_to(mask[:, None, :, None, None], w.shape)
                if l1_lambda:
                    g = l1_gradient(w, g, l1_lambda)
                g = np.where(wmask, g, 0.0)
            _adam_update(w.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                         state.m[idx][name].reshape(-1), state.v[idx][name].reshape(-1),
                         state.alpha, state.beta1, state.beta2, c1, c2, state.eps)
            if wmask is not None:
                w[~wmask] = 0.0
    params.version += 1


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def start(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        # the shuffle stream is independent of the initialization stream
        return cls(params, AdamState.zeros_like(params, cfg), make_rng(cfg.seed ^ 0x5EED5EED5EED5EED))


def batches(rng: np.random.Generator, count: int, cfg: TrainConfig) -> list[np.ndarray]:
    """Shuffle ``count`` window indices and split them into near-equal batches."""
    perm = rng.permutation(count)
    if cfg.batch_size:
        return [perm[i:i + cfg.batch_size] for i in range(0, count, cfg.batch_size)]
    return [b for b in np.array_split(perm, cfg.batch_count) if len(b)]


def evaluate_loss(params: ModelParams, spec: ModelSpec, x: np.ndarray, y: np.ndarray, chunk: int = 64) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), chunk):
        out, _ = forward(params, spec, x[i:i + chunk], "infer")
        total += float(np.sum((out - y[i:i + chunk]) ** 2))
    return total / y.size


def train_epochs(spec: ModelSpec, state: TrainState, train: tuple, val: tuple, cfg: TrainConfig,
                 stage: str = "plain", epochs: int | None = None, stop=None) -> list[dict]:
    """Run ``epochs`` epochs of shuffled mini-batch ADAM; returns the new log rows.

    ``train`` and ``val`` are ``(inputs, targets)`` arrays with a leading
    window axis. ``stop(row)`` may end the run early after an epoch.
    """
    x, y = train
    if len(x) == 0:
        raise EmptyDataset("no training windows")
    if stage not in ("plain", "l1"):
        raise ValueError(f"unknown stage {stage!r}")
    lam = cfg.l1_lambda if stage == "l1" else 0.0
    rows = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        t0 = time.perf_counter()
        total = 0.0
        for idx in batches(state.rng, len(x), cfg):
            out, cache = forward(state.params, spec, x[idx], "train")
            loss, grad = mse_loss(out, y[idx])
            grads = backward(state.params, spec, cache, grad)
            adam_step(state.params, grads, state.adam, lam)
            apply_bn_updates(state.params, cache)
            total += loss * len(idx)
        state.epoch += 1
        row = {"epoch": state.epoch, "stage": stage, "train_loss": total / len(x),
               "val_loss": evaluate_loss(state.params, spec, *val), "l1_lambda": lam,
               "wall_seconds": time.perf_counter() - t0}
        rows.append(row)
        state.log.append(row)
        if stop is not None and stop(row):
            break
    return rows


class Plateau:
    """True once ``patience`` consecutive epochs fail to beat the best by ``min_delta``."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale = 0

    def __call__(self, row: dict) -> bool:
        if row["val_loss"] < self.best - self.min_delta:
            self.best = row["val_loss"]
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def train_scae_two_stage(spec: ModelSpec, params: ModelParams, train: tuple, val: tuple,
                         cfg: TrainConfig) -> tuple[ModelParams, list[dict], int]:
    """Plain training until validation loss plateaus, then L1 fine-tuning.

    Returns ``(params, log, boundary)`` where ``boundary`` is the last
    epoch of the plain stage.
    """
    state = TrainState.start(params, cfg)
    train_epochs(spec, state, train, val, cfg, "plain", cfg.stage1_max_epochs,
                 stop=Plateau(cfg.patience, cfg.min_delta))
    boundary = state.epoch
    train_epochs(spec, state, train, val, cfg, "l1", cfg.epochs)
    return state.params, state.log, boundary


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})
