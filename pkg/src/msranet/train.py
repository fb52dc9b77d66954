"""Loss, Adam optimizer and the per-fold training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .layers import Mode
from .model import Model, forward, rng_stream
from .tensor import GradTape, Tensor, backward, note_branches, record

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
EVAL_CHUNK = 64


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class, probabilities floored at 1e-12."""
    if probs.ndim != 2:
        raise DataError(f"expected [N, n] probabilities, got {list(probs.shape)}")
    n, k = probs.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DataError(f"{y.size} labels for {n} probability rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    if not np.allclose(probs.data.sum(axis=1), 1, atol=1e-5):
        raise DataError("probability rows must sum to 1")
    rows = np.arange(n)
    p_true = probs.data[rows, y]
    clamped = p_true < PROB_FLOOR
    note_branches(clamped)
    safe = np.maximum(p_true, PROB_FLOOR)
    loss = np.asarray([-np.log(safe).mean()], dtype=probs.dtype)

    def back(g):
        gp = np.zeros(probs.shape, dtype=probs.dtype)
        gp[rows, y] = np.where(clamped, 0, -1 / (n * safe))
        return (gp * g.reshape(()),)

    return record("cross_entropy", loss, (probs,), back)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    early_stop_patience: int = 3  # 0 disables early stopping
    lr_plateau_factor: float | None = None
    lr_plateau_patience: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("train.epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be at least 2 (batch normalization)")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"train.optimizer: only 'adam' is supported, got {self.optimizer!r}")
        if self.early_stop_patience < 0:
            raise ConfigError("train.early_stop_patience must be >= 0")
        if self.lr_plateau_factor is not None and not 0 < self.lr_plateau_factor < 1:
            raise ConfigError("train.lr_plateau_factor must be in (0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns new parameter tensors and advances ``state``."""
    if set(params) != set(grads):
        raise ContractError("gradients do not cover the same parameters")
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {list(g.shape)} vs parameter {list(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        out[name] = Tensor(new.astype(p.dtype), requires_grad=True)
    return out


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FoldData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    """Split ``order`` into batches; a trailing batch of one joins the previous batch."""
    out = [order[i : i + size] for i in range(0, n, size)]
    if len(out) > 1 and out[-1].size == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """EVAL-mode probabilities in fixed-size chunks (so results do not depend on the caller)."""
    outs = [forward(model, x[i : i + EVAL_CHUNK], Mode.EVAL)[0].data for i in range(0, len(x), EVAL_CHUNK)]
    return np.concatenate(outs).astype(np.float64) if outs else np.zeros((0, model.config.n_classes))


def _ce_and_acc(probs: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    p = np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR)
    return float(-np.log(p).mean()), float((probs.argmax(axis=1) == y).mean())


def train_fold(
    model: Model,
    data: FoldData,
    cfg: TrainConfig,
    fold: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[dict[str, Tensor], list[EpochRecord]]:
    """Train ``model`` in place with Adam; returns the lowest-val-loss weights and the history.

    The model is left holding the best weights.
    """
    cfg.validate()
    if len(data.val_x) == 0:
        raise ConfigError("validation set is empty")
    if len(data.train_x) < 2:
        raise ConfigError("training set needs at least 2 samples")
    shuffle_rng = rng_stream(cfg.seed, "shuffle", fold)
    drop_rng = rng_stream(cfg.seed, "dropout", fold)
    state = AdamState()
    lr = cfg.learning_rate
    best_loss, best_weights = np.inf, dict(model.registry())
    since_best = since_plateau = 0
    plateau_best = np.inf
    history: list[EpochRecord] = []
    n = len(data.train_x)

    for epoch in range(cfg.epochs):
        tot_loss = tot_correct = 0.0
        for idx in batches(n, cfg.batch_size, shuffle_rng.permutation(n)):
            xb = data.train_x[idx]
            yb = data.train_y[idx]
            params = model.trainable()
            with GradTape() as tape:
                probs, _ = forward(model, xb, Mode.TRAIN, drop_rng)
                loss = cross_entropy(probs, yb)
            g = backward(loss, tape, wrt=list(params.values()))
            grads = {k: g[t] for k, t in params.items()}
            model.assign(adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.epsilon))
            tot_loss += loss.item() * len(idx)
            tot_correct += float((probs.data.argmax(axis=1) == yb).sum())

        val_loss, val_acc = _ce_and_acc(predict(model, data.val_x), data.val_y)
        rec = EpochRecord(fold, epoch, lr, tot_loss / n, tot_correct / n, val_loss, val_acc)
        history.append(rec)
        log.info("fold %d epoch %d: %s", fold, epoch, rec.to_json())
        if on_epoch:
            on_epoch(rec)

        if val_loss < best_loss:
            best_loss, best_weights, since_best = val_loss, dict(model.registry()), 0
        else:
            since_best += 1
        if cfg.lr_plateau_factor is not None:
            if val_loss < plateau_best:
                plateau_best, since_plateau = val_loss, 0
            else:
                since_plateau += 1
                if since_plateau >= cfg.lr_plateau_patience:
                    lr *= cfg.lr_plateau_factor
                    since_plateau = 0
        if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
            break

    model.assign(best_weights)
    return best_weights, history
