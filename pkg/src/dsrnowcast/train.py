"""Masked-MSE training loop with Adam or SGD, global-norm gradient clipping,
validation-based early stopping, and seeded shuffling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np

from .network import NowcastModel, assemble_input, assemble_targets, backward, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    validation_fraction: float = 0.1
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kind = types[key]
                kwargs[key] = value if kind in ("str", str) else (int(value) if kind in ("int", int) else float(value))
        return cls(**kwargs)


def mse_loss(pred, target, mask):
    """Masked mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    if pred.shape != np.shape(target) or pred.shape != np.shape(mask):
        raise ValueError(f"shape mismatch: {pred.shape}, {np.shape(target)}, {np.shape(mask)}")
    n = float(np.sum(mask))
    if n == 0:
        raise ValueError("mask selects no pixels")
    diff = (pred - target) * mask
    loss = float(np.sum(diff * diff, dtype=np.float64) / n)
    return loss, (2.0 / n) * diff


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for name, p in params.items():
            p -= (self.lr * grads[name]).astype(p.dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.learning_rate)


def prepare_arrays(model: NowcastModel, windows):
    """Stack assembled inputs, targets and masks for the model's horizon."""
    cfg = model.config
    xs, ys, ms = [], [], []
    for w in windows:
        xs.append(assemble_input(w, model.normalization, cfg.input_channels, model.dtype))
        y, m = assemble_targets(w, cfg.horizon, model.normalization, model.dtype)
        ys.append(y)
        ms.append(m)
    return np.stack(xs), np.stack(ys), np.stack(ms)


def split_indices(n: int, fraction: float, rng: np.random.Generator):
    """Disjoint (train, validation) index arrays."""
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def evaluate_loss(model, x, y, mask, batch_size=8) -> float:
    total, count = 0.0, 0.0
    for s in range(0, len(x), batch_size):
        pred = forward(model, x[s:s + batch_size], "infer")
        m = mask[s:s + batch_size]
        diff = (pred - y[s:s + batch_size]) * m
        total += float(np.sum(diff * diff, dtype=np.float64))
        count += float(m.sum())
    return total / max(count, 1.0)


@dataclass
class TrainResult:
    model: NowcastModel
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int


def train_model(model: NowcastModel, windows, cfg: TrainConfig = TrainConfig(),
                arrays=None, callback=None) -> TrainResult:
    """Fit ``model`` in place on ``windows`` for its configured horizon.

    The loss covers all three output frames (the target sequence ending at
    t + horizon). Parameters from the epoch with the best validation loss
    (training loss when there is no validation split) are restored at the
    end. ``arrays`` may pass precomputed :func:`prepare_arrays` output.
    """
    if arrays is None:
        if not windows:
            raise ValueError("no training windows")
        arrays = prepare_arrays(model, windows)
    x, y, mask = arrays
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(len(x), cfg.validation_fraction, rng)
    opt = make_optimizer(cfg)
    params = model.parameters()
    history = []
    best_loss, best_epoch, best_state = np.inf, 0, model.copy_state()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            pred = forward(model, x[idx], "train")
            loss, grad = mse_loss(pred, y[idx], mask[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            grads, _ = backward(model, grad)
            model.cache = None
            clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads)
            n = float(mask[idx].sum())
            total += loss * n
            count += n
        train_loss = total / count
        val_loss = evaluate_loss(model, x[val_idx], y[val_idx], mask[val_idx]) if len(val_idx) else float("nan")
        history.append((epoch, train_loss, val_loss))
        monitored = val_loss if len(val_idx) else train_loss
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if monitored < best_loss:
            best_loss, best_epoch, best_state = monitored, epoch, model.copy_state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    model.metadata.update(
        seed=cfg.seed, epochs=len(history), best_epoch=best_epoch,
        loss_history=[[e, float(a), float(b)] for e, a, b in history],
    )
    return TrainResult(model, history, best_epoch)


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow(row)


def running_best(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=float))
