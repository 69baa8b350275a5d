"""Loss, Adam, learning-rate schedules, early stopping, and the training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, NonFiniteError, Parameter, no_grad


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or activation."""


PROB_FLOOR = 1e-12


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=DTYPE)


def categorical_cross_entropy(predictions, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of one-hot targets under row predictions.

    Returns ``(loss, grad)`` where grad is the derivative with respect to the
    predictions, ``-y / (M * h)``, with ``h`` floored at 1e-12 before the log
    so a confidently wrong model yields a large finite loss instead of inf.
    """
    h = _as_array(predictions)
    y = _as_array(targets)
    if h.shape != y.shape or h.ndim != 2:
        raise ValueError(f"predictions {h.shape} and targets {y.shape} must both be [M,K]")
    m, k = h.shape
    if m < 1 or k < 2:
        raise ValueError(f"need M >= 1 and K >= 2, got M={m}, K={k}")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1.0).all()):
        raise ValueError("targets must be one-hot rows (exactly one 1, rest 0)")
    clamped = np.maximum(h, PROB_FLOOR)
    loss = float(-(y * np.log(clamped)).sum() / m)
    grad = -y / (m * clamped)
    return loss, grad


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step count and rate."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to every trainable parameter."""
    trainable = [p for p in params if p.trainable]
    missing = [p.name for p in trainable if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for trainable parameter(s): {missing}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for p in trainable:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` non-improving epochs.

    The first reported value only sets the baseline. Improvement means the
    monitored loss drops below the best seen by more than ``min_delta``; the
    non-improvement counter resets after every reduction, so a flat loss
    triggers one reduction per ``patience`` epochs.
    """

    def __init__(self, initial_lr: float, factor: float = 0.3, patience: int = 5,
                 min_delta: float = 1e-8, min_lr: float = 0.0):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.current_lr = initial_lr
        self.factor, self.patience = factor, patience
        self.min_delta, self.min_lr = min_delta, min_lr
        self.best: float | None = None
        self.since_improvement = 0
        self.reductions = 0

    def update(self, monitored: float) -> float:
        if self.best is None or monitored < self.best - self.min_delta:
            self.best = monitored if self.best is None else min(self.best, monitored)
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.patience:
                self.current_lr = max(self.current_lr * self.factor, self.min_lr)
                self.reductions += 1
                self.since_improvement = 0
        return self.current_lr


class EarlyStopState:
    """Latch ``stopped`` on the ``patience``-th consecutive non-improving epoch."""

    def __init__(self, patience: int = 20, min_delta: float = 1e-8):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience, self.min_delta = patience, min_delta
        self.best: float | None = None
        self.since_improvement = 0
        self.stopped = False

    def update(self, monitored: float) -> bool:
        if self.best is None or monitored < self.best - self.min_delta:
            self.best = monitored if self.best is None else min(self.best, monitored)
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.patience:
                self.stopped = True
        return self.stopped


def warmup_schedule(base_lr: float, warmup_epochs: int, epoch: int) -> float:
    """Linear per-epoch ramp: (epoch+1)/warmup_epochs of base, then constant."""
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    if warmup_epochs == 0 or epoch >= warmup_epochs:
        return base_lr
    return base_lr * (epoch + 1) / warmup_epochs


@dataclass
class TrainConfig:
    """Knobs for :func:`train`; defaults mirror the reference training recipe."""

    batch_size: int = 128
    initial_lr: float = 0.001
    epochs: int = 100
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    early_stop_patience: int | None = 20
    warmup_epochs: int = 0
    improvement_delta: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def _check_dataset(name: str, data) -> tuple[np.ndarray, np.ndarray]:
    x, y = data
    x, y = np.asarray(x, dtype=DTYPE), np.asarray(y, dtype=DTYPE)
    if len(x) == 0:
        raise ValueError(f"{name} dataset is empty")
    if len(x) != len(y):
        raise ValueError(f"{name} dataset has {len(x)} inputs but {len(y)} targets")
    return x, y


def evaluate_loss(model, x: np.ndarray, y: np.ndarray, batch_size: int = 128
                  ) -> tuple[float, float]:
    """Mean loss and accuracy over a dataset, in inference mode."""
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            probs = model.forward(xb, train=False)
            loss, _ = categorical_cross_entropy(probs.data, yb)
            total_loss += loss * len(xb)
            correct += int((probs.data.argmax(axis=1) == yb.argmax(axis=1)).sum())
    return total_loss / len(x), correct / len(x)


def train(model, train_data, val_data, config: TrainConfig, augment=None):
    """Optimize ``model`` and return ``(model, history)``.

    Each epoch shuffles the training set with the config seed's generator,
    steps Adam per batch (last partial batch kept), then scores the
    validation set. The validation loss drives both the plateau schedule and
    early stopping, and the weights that scored the best validation loss are
    restored into the model before returning. History rows carry epoch,
    train/val loss, train/val accuracy, and the learning rate used.

    ``augment``, when given, is called as ``augment(batch, rng)`` on every
    training batch; validation batches are never augmented.
    """
    x_train, y_train = _check_dataset("train", train_data)
    x_val, y_val = _check_dataset("validation", val_data)
    n = len(x_train)

    rng = np.random.default_rng(config.seed)
    adam = AdamState(lr=config.initial_lr)
    plateau = PlateauSchedule(config.initial_lr, config.plateau_factor,
                              config.plateau_patience, config.improvement_delta)
    early = (EarlyStopState(config.early_stop_patience, config.improvement_delta)
             if config.early_stop_patience is not None else None)

    best_val = np.inf
    best_state = model.state_array().copy()
    history: list[dict] = []

    for epoch in range(config.epochs):
        if epoch < config.warmup_epochs:
            lr = warmup_schedule(config.initial_lr, config.warmup_epochs, epoch)
        else:
            lr = plateau.current_lr
        adam.lr = lr

        try:
            perm = rng.permutation(n)
            epoch_loss, epoch_correct = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                xb, yb = x_train[idx], y_train[idx]
                if augment is not None:
                    xb = augment(xb, rng)
                model.zero_grad()
                probs = model.forward(xb, train=True)
                loss, grad = categorical_cross_entropy(probs.data, yb)
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                probs.backward(grad)
                adam_step(model.trainable_parameters(), adam)
                epoch_loss += loss * len(idx)
                epoch_correct += int((probs.data.argmax(axis=1) == yb.argmax(axis=1)).sum())
            val_loss, val_acc = evaluate_loss(model, x_val, y_val, config.batch_size)
        except NonFiniteError as e:
            raise TrainingDivergedError(f"training diverged at epoch {epoch}: {e}") from e

        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "val_loss": val_loss,
            "train_acc": epoch_correct / n,
            "val_acc": val_acc,
            "lr": lr,
        })

        if val_loss < best_val - config.improvement_delta:
            best_val = val_loss
            best_state = model.state_array().copy()

        plateau.update(val_loss)
        if early is not None and early.update(val_loss):
            break

    model.load_state_array(best_state)
    return model, history


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr")


def write_history(history: list[dict], path) -> None:
    """Write per-epoch rows as comma-separated text with a header line."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{"epoch": int(r["epoch"]),
             **{k: float(r[k]) for k in HISTORY_FIELDS if k != "epoch"}} for r in rows]
