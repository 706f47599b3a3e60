"""SGD with momentum, early stopping on validation loss, and repeated experiments."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .layers import softmax_cross_entropy
from .metrics import MetricsReport, PredictionSet, evaluate_predictions, mean_report
from .models import ModelGraph, forward
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(parameters: dict, state: OptimizerState, strict: bool = True) -> None:
    """``v <- momentum * v + g; w <- w - lr * v`` for every trainable parameter, then clear grads.

    Parameters with ``requires_grad`` off are left alone.
    """
    for name, w in parameters.items():
        if not w.requires_grad:
            continue
        g = w.grad
        if g is None:
            if strict:
                raise TrainingError(f"no gradient for parameter {name!r}")
            continue
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w.data)
            state.velocity[name] = v
        elif v.shape != w.shape:
            raise TrainingError(f"velocity for {name!r} has shape {v.shape}, parameter {w.shape}")
        v *= state.momentum
        v += g
        w.data -= state.learning_rate * v
        w.grad = None


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 5
    batch_size: int = 4
    repeats: int = 5
    seed: int = 0
    arch: str = "resnet50"
    learning_rate: float = 0.001
    momentum: float = 0.9
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.repeats < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience, repeats and batch_size must all be >= 1")
        if self.monitor != "val_loss":
            raise ValueError("only val_loss can be monitored")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["epoch", "train_loss", "val_loss", "val_accuracy"]
        w.writerow(head + (["seconds"] if include_time else []))
        for e in self.epochs:
            row = [e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_accuracy)]
            w.writerow(row + ([f"{e.seconds:.3f}"] if include_time else []))
        return buf.getvalue()


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record one epoch; True means this epoch is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def predict_split(model: ModelGraph, data, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and labels for a whole split, in split order."""
    logits, labels = [], []
    for x, y in data.batches(split):
        logits.append(forward(model, x, "eval").data)
        labels.append(y)
    return np.concatenate(logits), np.concatenate(labels)


def evaluate_split(model: ModelGraph, data, split: str = "val") -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a split."""
    logits, labels = predict_split(model, data, split)
    loss = float(softmax_cross_entropy(Tensor(logits), labels).item())
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def snapshot(model: ModelGraph) -> dict:
    return {k: v.copy() for k, v in model.state().items()}


def restore(model: ModelGraph, state: dict) -> None:
    for k, v in state.items():
        if k in model.params:
            model.params[k].data = v.copy()
        else:
            model.buffers[k][...] = v


def train_epoch(model: ModelGraph, data, opt: OptimizerState, epoch: int,
                rng: np.random.Generator) -> float:
    """One pass over the train split; returns the sample-weighted mean loss."""
    params = model.trainable()
    total, count = 0.0, 0
    for b, (x, y) in enumerate(data.batches("train", epoch)):
        tape = Tape()
        logits = forward(model, x, "train", rng, tape)
        with tape:
            loss = softmax_cross_entropy(logits, y)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b + 1}")
        backward(loss, tape)
        sgd_step(params, opt)
        total += value * len(y)
        count += len(y)
    return total / count


def train_model(model: ModelGraph, data, cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
                on_epoch: Optional[Callable[[EpochStats], None]] = None):
    """Train until early stopping; the returned model holds the best-epoch weights.

    Returns ``(model, TrainRecord)``. Epochs are numbered from 1.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum)
    stopper = EarlyStopping(cfg.patience)
    record = TrainRecord()
    best_state = snapshot(model)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss = train_epoch(model, data, opt, epoch, rng)
        val_loss, val_acc = evaluate_split(model, data, "val")
        stats = EpochStats(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0)
        record.epochs.append(stats)
        log.info("epoch %d train_loss %.6f val_loss %.6f val_acc %.4f",
                 epoch, train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(stats)
        if stopper.update(epoch, val_loss):
            best_state = snapshot(model)
        record.stop_epoch = epoch
        if stopper.should_stop:
            break
    record.best_epoch = stopper.best_epoch
    restore(model, best_state)
    return model, record


def repeat_seed(seed: int, repeat: int) -> int:
    """Seed for repeat ``repeat`` (1-based): first word of SeedSequence([seed, repeat])."""
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1)[0])


@dataclass
class ExperimentResult:
    config: TrainConfig
    mean: MetricsReport
    reports: list
    val_accuracy: float
    records: list
    candidates: list = field(default_factory=list)  # (config, mean val accuracy) for every candidate


def evaluate_model(model: ModelGraph, data, split: str = "test") -> MetricsReport:
    logits, labels = predict_split(model, data, split)
    return evaluate_predictions(PredictionSet.from_logits(labels, logits))


def run_experiment(configs, data, make_model: Callable[[TrainConfig, np.random.Generator], ModelGraph],
                   on_epoch=None) -> ExperimentResult:
    """Train every candidate config ``repeats`` times and score the winner on test.

    The candidate with the highest mean validation accuracy (at the restored
    best epoch) wins; ties go to the earlier candidate. Test predictions of a
    run are computed right after it trains but only the winner's are used.
    """
    if isinstance(configs, TrainConfig):
        configs = [configs]
    if not configs:
        raise ValueError("no configurations to run")
    results = []
    for cfg in configs:
        reports, records, val_accs = [], [], []
        for r in range(1, cfg.repeats + 1):
            seed_r = repeat_seed(cfg.seed, r)
            rng = np.random.default_rng(seed_r)
            model = make_model(cfg, rng)
            run_data = data.with_seed(seed_r) if hasattr(data, "with_seed") else data
            model, rec = train_model(model, run_data, cfg, rng, on_epoch)
            val_accs.append(evaluate_split(model, run_data, "val")[1])
            reports.append(evaluate_model(model, run_data, "test"))
            records.append(rec)
            log.info("repeat %d/%d (seed %d): best epoch %d, %s", r, cfg.repeats, seed_r,
                     rec.best_epoch, reports[-1])
        results.append((cfg, float(np.mean(val_accs)), reports, records))
    best = max(range(len(results)), key=lambda i: (results[i][1], -i))
    cfg, val_acc, reports, records = results[best]
    return ExperimentResult(cfg, mean_report(reports), reports, val_acc, records,
                            [(c, v) for c, v, _, _ in results])
