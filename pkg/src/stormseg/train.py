"""Mini-batch training with RMSprop, early stopping, and history logging.

One epoch visits every training sample exactly once in seeded-shuffle order
(the last batch may be short).  Parameter updates are functional: each step
builds replacement tensors from the accumulated gradients, so gradients are
naturally clear at the start of the next batch.  Validation runs after every
epoch; the weights with the best validation loss are the ones returned, and
training stops early after `patience` epochs without improvement.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplit, normalize
from .errors import ContractError, FormatError, ParameterError, TrainingDiverged
from .losses import LossSpec, PixelPrediction, evaluate, segmentation_loss
from .model import Checkpoint, Model, ModelConfig, PRESETS, build
from .tensor import Rng, Tensor

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice", "val_tversky",
                   "val_accuracy", "seconds")


@dataclass
class OptimizerState:
    """RMSprop accumulators; squared-gradient averages keyed like the params."""

    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-7
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.decay < 1.0:
            raise ParameterError(f"decay must be in [0, 1), got {self.decay}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")


def rmsprop_step(params: dict[str, Tensor], state: OptimizerState) -> dict[str, Tensor]:
    """v <- rho v + (1-rho) g^2; w <- w - lr g / sqrt(v + eps), per element."""
    out = {}
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        v = state.accumulators.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        if v.shape != g.shape:
            raise ContractError(f"parameter {name!r}: accumulator shape {v.shape} "
                                f"!= gradient shape {g.shape}")
        v = state.decay * v + (1.0 - state.decay) * g * g
        state.accumulators[name] = v
        stepped = p.values - state.learning_rate * g / np.sqrt(v + state.epsilon)
        out[name] = Tensor(stepped, requires_grad=True)
    return out


@dataclass
class TrainConfig:
    model: ModelConfig
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 10
    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-7
    threshold: float = 0.5
    debug_grad_check: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must be in (0, 1), got {self.threshold}")

    @classmethod
    def from_preset(cls, name: str, in_channels: int = 3, base_channels: int = 16,
                    **overrides) -> "TrainConfig":
        """Published-experiment settings; pass overrides for desk-scale runs."""
        if name not in PRESETS:
            raise ParameterError(f"unknown preset {name!r}, have {sorted(PRESETS)}")
        p = PRESETS[name]
        cfg = cls(model=p.model_config(in_channels, base_channels),
                  batch_size=p.batch_size, max_epochs=p.epochs,
                  learning_rate=p.learning_rate)
        return replace(cfg, **overrides) if overrides else cfg


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_tversky: float
    val_accuracy: float
    seconds: float


@dataclass
class History:
    entries: list[EpochStats] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.entries]


@dataclass
class EarlyStopping:
    """Strict-improvement tracker; update returns True when patience runs out."""

    patience: int
    best: float = math.inf
    best_epoch: int = -1
    waited: int = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.waited = value, epoch, 0
            return False
        self.waited += 1
        return self.waited >= self.patience


def log_history(history: History, path) -> None:
    """One CSV row per epoch; floats keep full round-trip precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for e in history.entries:
            # repr of a python float round-trips exactly; numpy scalars do not
            w.writerow([e.epoch] + [repr(float(getattr(e, c)))
                                    for c in HISTORY_COLUMNS[1:]])


def read_history(path) -> History:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
        raise FormatError(f"history header must be {','.join(HISTORY_COLUMNS)!r}")
    out = History()
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(HISTORY_COLUMNS):
            raise FormatError(f"line {i}: expected {len(HISTORY_COLUMNS)} fields")
        try:
            out.entries.append(EpochStats(int(row[0]), *(float(v) for v in row[1:])))
        except ValueError as e:
            raise FormatError(f"line {i}: {e}") from e
    return out


def _stacked(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.input for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.float32)[:, None]
    return x, y


def _batches(x: np.ndarray, y: np.ndarray, size: int):
    for i in range(0, len(x), size):
        yield x[i:i + size], y[i:i + size]


def _check_grads_clear(params: dict[str, Tensor], epoch: int, batch: int) -> None:
    for name, p in params.items():
        if p.grad is not None and np.any(p.grad):
            raise ContractError(f"parameter {name!r} enters epoch {epoch} batch {batch} "
                                "with a stale gradient")


def train(config: TrainConfig, split: DatasetSplit, rng: Rng,
          on_batch=None) -> tuple[Checkpoint, History]:
    """Fit a model on the split; returns the best-validation checkpoint.

    Normalization stats come from the training inputs and ride along in the
    checkpoint.  on_batch(epoch, batch, indices, loss) is called after each
    optimizer step when given.
    """
    if not split.train or not split.validation:
        raise ContractError("training needs non-empty train and validation sets")
    train_x, train_y = _stacked(split.train)
    val_x, val_y = _stacked(split.validation)
    train_x, stats = normalize(train_x)
    val_x, _ = normalize(val_x, stats)

    model = build(config.model, rng)
    opt = OptimizerState(config.learning_rate, config.decay, config.epsilon)
    stopper = EarlyStopping(config.patience)
    history = History()
    best_state: dict[str, np.ndarray] | None = None
    n = len(train_x)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if config.debug_grad_check:
                _check_grads_clear(model.params(), epoch, b)
            p = model.forward(Tensor(train_x[idx]), mode="train")
            loss = segmentation_loss(PixelPrediction(p, Tensor(train_y[idx])),
                                     config.model.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            loss.backward()
            model.set_params(rmsprop_step(model.params(), opt))
            loss_sum += value * len(idx)
            if on_batch is not None:
                on_batch(epoch, b, idx, value)

        report = evaluate(lambda xb: model.forward(Tensor(xb), mode="eval"),
                          _batches(val_x, val_y, config.batch_size),
                          config.model.loss, threshold=config.threshold)
        if not math.isfinite(report.loss_value):
            raise TrainingDiverged(epoch, -1, report.loss_value)
        history.entries.append(EpochStats(
            epoch=epoch,
            train_loss=loss_sum / n,
            val_loss=report.loss_value,
            val_dice=report.dice_coefficient,
            val_tversky=report.tversky_coefficient,
            val_accuracy=report.accuracy,
            seconds=time.perf_counter() - t0,
        ))
        improved = report.loss_value < stopper.best
        stop = stopper.update(epoch, report.loss_value)
        if improved:
            best_state = {k: a.copy() for k, a in model.state_arrays().items()}
        if stop:
            break

    assert best_state is not None  # at least one epoch ran
    model.load_state_arrays(best_state)
    ckpt = model.checkpoint(
        norm_stats=stats,
        optimizer={"kind": "rmsprop", "learning_rate": config.learning_rate,
                   "decay": config.decay, "epsilon": config.epsilon},
        history_summary={"epochs": len(history.entries),
                         "best_epoch": stopper.best_epoch,
                         "best_val_loss": stopper.best},
    )
    return ckpt, history
