"""Adam with halving learning rate, early stopping on validation MSE, and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 8
    batch_size: int = 32
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.patience <= self.epochs:
            raise ConfigError(f"patience must lie in [0, epochs={self.epochs}], got {self.patience}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class MetricsReport:
    mse: float
    mae: float
    per_horizon: np.ndarray | None = None
    window_count: int = 0

    def to_text(self) -> str:
        lines = [f"mse={self.mse!r}", f"mae={self.mae!r}", f"windows={self.window_count}"]
        if self.per_horizon is not None:
            lines.append("per_horizon_mse=" + ",".join(repr(float(v)) for v in self.per_horizon))
        return "\n".join(lines) + "\n"


def lr_schedule(base: float, epoch: int) -> float:
    """Base rate during epoch 0, halved at every epoch boundary."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    return base * 0.5 ** epoch


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[list, AdamState]:
    """Bias-corrected Adam; returns new parameter arrays and a new state."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ContractError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        mi = beta1 * mi + (1 - beta1) * g
        vi = beta2 * vi + (1 - beta2) * g * g
        m_hat = mi / (1 - beta1 ** t)
        v_hat = vi / (1 - beta2 ** t)
        new_params.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype))
        new_m.append(mi)
        new_v.append(vi)
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper updating tensors in place."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState()
        self.betas = (beta1, beta2)
        self.eps = eps

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
        if clip_norm is not None and norm > clip_norm:
            grads = [g * (clip_norm / norm) for g in grads]
        updated, self.state = adam_step([p.data for p in self.params], grads, self.state, lr,
                                        *self.betas, self.eps)
        for p, value in zip(self.params, updated):
            p.data = value
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_mse: float
    stopped_early: bool


def _forward(model, batch, training: bool, rng, decode_mode: str = "generative") -> Tensor:
    return model.forward(batch.x_enc, batch.stamps_enc, batch.stamps_future,
                         training=training, rng=rng, decode_mode=decode_mode)


def _check_split(windows, role: str) -> None:
    if len(windows) == 0:
        raise DataError(f"{role} split has no windows")
    if getattr(windows, "split", None) == "test":
        raise ContractError(f"training refuses test-split windows (passed as {role})")


def train(model, train_windows, val_windows, cfg: TrainConfig = TrainConfig(),
          history_path=None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch Adam with early stopping; restores the best-validation parameters."""
    _check_split(train_windows, "train")
    _check_split(val_windows, "validation")
    gen = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    history, best, best_epoch, bad_epochs = [], math.inf, -1, 0
    best_state = [p.data.copy() for p in params]
    stopped = False
    sink = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(cfg.lr, epoch)
            order = gen.permutation(len(train_windows))
            losses = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = train_windows.batch(order[start:start + cfg.batch_size])
                try:
                    loss = T.mse_loss(_forward(model, batch, True, gen), batch.y)
                    if not math.isfinite(loss.item()):
                        raise NumericError("loss is not finite")
                    optimizer.zero_grad()
                    loss.backward()
                except NumericError as exc:
                    raise NumericError(f"training diverged at epoch {epoch}, batch {b}, lr {lr:g}: {exc}") from None
                optimizer.step(lr, cfg.clip_norm)
                losses.append(loss.item())
            val = evaluate(model, val_windows).mse
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse": val, "lr": lr}
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(record)
            if val < best:
                best, best_epoch, bad_epochs = val, epoch, 0
                best_state = [p.data.copy() for p in params]
            else:
                bad_epochs += 1
                if bad_epochs > cfg.patience:
                    stopped = True
                    break
    finally:
        if sink:
            sink.close()
        optimizer.zero_grad()
    for p, value in zip(params, best_state):
        p.data = value
    return TrainResult(history, best_epoch, best, stopped)


def predict(model, windows, batch_size: int = 64, decode_mode: str = "generative") -> np.ndarray:
    """Eval-mode predictions for every window, ``(N, pred_len, d_y)``."""
    outputs = []
    with T.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows.batch(np.arange(start, min(start + batch_size, len(windows))))
            outputs.append(_forward(model, batch, False, None, decode_mode).numpy())
    return np.concatenate(outputs, axis=0)


def metrics(prediction: np.ndarray, target: np.ndarray) -> MetricsReport:
    err = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if err.size == 0:
        raise DataError("no predictions to score")
    per_horizon = np.mean(err ** 2, axis=tuple(i for i in range(err.ndim) if i != err.ndim - 2))
    return MetricsReport(float(np.mean(err ** 2)), float(np.mean(np.abs(err))), per_horizon, len(err))


def evaluate(model, windows, batch_size: int = 64, decode_mode: str = "generative") -> MetricsReport:
    """MSE and MAE over every element of every window, dropout off."""
    if len(windows) == 0:
        raise DataError("cannot evaluate on an empty split")
    return metrics(predict(model, windows, batch_size, decode_mode), windows.batch().y)
