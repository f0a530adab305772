"""Deterministic SGD training and evaluation.

Everything downstream of (seed, config, dataset bytes) is reproducible:
shuffling, augmentation, and initialization each draw from their own
seed-derived stream, and a numerically exploding run is recorded as a
"nan" outcome in the metric log instead of aborting the process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Model
from .data import Dataset, augment_batch, normalize_images
from .errors import ConfigError, NumericOverflowError
from .tensor import no_grad

METRICS_HEADER = "epoch,train_loss,train_acc,eval_acc,lr,status"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (0.5, 0.75)  # epoch fractions for lr decay
    decay_factor: float = 0.1
    augment: bool = True
    shuffle: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (0.0 <= self.decay_factor <= 1.0):
            raise ConfigError("decay_factor must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index under milestone decay."""
        lr = self.lr
        for frac in self.milestones:
            if epoch >= int(frac * self.epochs):
                lr *= self.decay_factor
        return lr


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float
    status: str  # "ok" or "nan"

    def csv_row(self) -> str:
        def num(v):
            return "nan" if not np.isfinite(v) else repr(float(v))
        return (f"{self.epoch},{num(self.train_loss)},{num(self.train_acc)},"
                f"{num(self.eval_acc)},{repr(float(self.lr))},{self.status}")


@dataclass
class TrainResult:
    status: str  # "ok" or "nan"
    metrics: list[EpochMetrics] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return "\n".join([METRICS_HEADER] + [m.csv_row() for m in self.metrics]) + "\n"


class SgdOptimizer:
    """SGD with momentum and coupled weight decay.

    Update: v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def _batches(count: int, batch_size: int, order: np.ndarray):
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          eval_dataset: Dataset | None = None) -> TrainResult:
    """Run the SGD loop; returns per-epoch metrics and a final status."""
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")

    opt = SgdOptimizer(model.parameters().values(),
                       momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    augment_rng = np.random.default_rng([cfg.seed, 11])
    result = TrainResult(status="ok")

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = (shuffle_rng.permutation(len(dataset)) if cfg.shuffle
                 else np.arange(len(dataset)))
        loss_sum = 0.0
        correct = 0
        seen = 0
        exploded = False

        for idx in _batches(len(dataset), cfg.batch_size, order):
            images = dataset.images[idx]
            if cfg.augment:
                images = augment_batch(images, augment_rng)
            x = normalize_images(images, dataset.mean, dataset.std)
            labels = dataset.labels[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    opt.zero_grad()
                    logits = model.forward(x, training=True)
                    loss = T.softmax_cross_entropy(logits, labels)
                    T.backward(loss)
                    opt.step(lr)
            except NumericOverflowError:
                T.active_graph().clear()
                exploded = True
                break
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            seen += len(idx)

        if exploded:
            result.metrics.append(EpochMetrics(
                epoch=epoch + 1, train_loss=float("nan"), train_acc=float("nan"),
                eval_acc=float("nan"), lr=lr, status="nan"))
            result.status = "nan"
            break

        eval_acc = float("nan")
        if eval_dataset is not None and len(eval_dataset):
            try:
                eval_acc, _ = evaluate(model, eval_dataset,
                                       batch_size=cfg.batch_size)
            except NumericOverflowError:
                eval_acc = float("nan")
        result.metrics.append(EpochMetrics(
            epoch=epoch + 1, train_loss=loss_sum / seen,
            train_acc=correct / seen, eval_acc=eval_acc, lr=lr, status="ok"))

    return result


def evaluate(model: Model, dataset: Dataset,
             batch_size: int = 256) -> tuple[float, float]:
    """Accuracy (argmax, lowest index on ties) and mean loss in eval mode."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    correct = 0
    loss_sum = 0.0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            x = normalize_images(dataset.images[idx], dataset.mean, dataset.std)
            labels = dataset.labels[idx]
            logits = model.forward(x, training=False)
            loss = T.softmax_cross_entropy(logits, labels)
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return correct / len(dataset), loss_sum / len(dataset)
