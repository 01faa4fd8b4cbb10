"""Mini-batch Adam training with early stopping on validation loss.

The loop is deliberately plain: shuffle, forward, backward, Adam step,
validate, and keep the best weights.  Validation loss is pure cross-entropy
(no L2 term) so that early stopping monitors generalisation rather than the
size of the weights.  Everything is deterministic for a fixed config seed:
the per-epoch shuffle draws from ``default_rng([seed, epoch])``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import SegmentationSample, preprocess
from .errors import ConfigError, NumericError
from .model import ModelParams, ParamGrads, XNet, save_checkpoint
from .tensor import PROB_EPS, Tensor4

__all__ = [
    "MIN_IMPROVEMENT",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "EarlyStopping",
    "TrainingLogEntry",
    "TrainingLog",
    "batch_iterator",
    "stack_samples",
    "evaluate",
    "train",
]

# Smallest validation-loss decrease that counts as progress for patience.
MIN_IMPROVEMENT = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 20
    max_epochs: int = 100
    seed: int = 0
    l2_lambda: float = 5e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {value}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the model parameters."""

    t: int
    moments: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        moments = {}
        for pl in params.layers:
            moments[pl.layer_id] = (
                np.zeros_like(pl.kernel.data),
                np.zeros_like(pl.kernel.data),
                np.zeros_like(pl.bias.data),
                np.zeros_like(pl.bias.data),
            )
        return cls(t=0, moments=moments)


def adam_step(
    params: ModelParams, grads: ParamGrads, state: AdamState, config: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One Adam update, in place: m, v moments with bias correction.

    ``w <- w - lr * m_hat / (sqrt(v_hat) + epsilon)``, epsilon outside the
    square root.  Aborts on non-finite gradients, naming the layer.
    """
    state.t += 1
    correction1 = 1.0 - config.beta1 ** state.t
    correction2 = 1.0 - config.beta2 ** state.t
    for pl in params.layers:
        d_kernel, d_bias = grads[pl.layer_id]
        m_k, v_k, m_b, v_b = state.moments[pl.layer_id]
        for tensor, grad, m, v in (
            (pl.kernel, d_kernel, m_k, v_k),
            (pl.bias, d_bias, m_b, v_b),
        ):
            if grad.shape != tensor.data.shape:
                raise ConfigError(
                    f"gradient shape {grad.shape} does not match parameter "
                    f"{pl.layer_id} shape {tensor.data.shape}"
                )
            if not np.isfinite(grad).all():
                raise NumericError(
                    f"non-finite gradient for layer {pl.layer_id} at step {state.t}"
                )
            m *= config.beta1
            m += (1.0 - config.beta1) * grad
            v *= config.beta2
            v += (1.0 - config.beta2) * grad * grad
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopping:
    """Counts consecutive epochs without a meaningful val-loss decrease."""

    patience: int
    min_improvement: float = MIN_IMPROVEMENT
    best_loss: float = np.inf
    best_epoch: int = 0
    wait: int = 0

    def observe(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when the loss improved."""
        if val_loss <= self.best_loss - self.min_improvement:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrainingLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass(eq=False)
class TrainingLog:
    entries: list[TrainingLogEntry] = field(default_factory=list)

    def history(self) -> list[tuple[int, float, float, float]]:
        """Everything except wall-clock timings."""
        return [
            (e.epoch, e.train_loss, e.val_loss, e.val_accuracy) for e in self.entries
        ]

    def __eq__(self, other) -> bool:
        """Logs compare equal when their histories match; timing is noise."""
        if not isinstance(other, TrainingLog):
            return NotImplemented
        return self.history() == other.history()

    def best_epoch(self) -> int:
        return min(self.entries, key=lambda e: e.val_loss).epoch

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy", "seconds"])
            for e in self.entries:
                writer.writerow(
                    [e.epoch, repr(e.train_loss), repr(e.val_loss),
                     repr(e.val_accuracy), repr(e.seconds)]
                )

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for record in reader:
                log.entries.append(
                    TrainingLogEntry(
                        epoch=int(record["epoch"]),
                        train_loss=float(record["train_loss"]),
                        val_loss=float(record["val_loss"]),
                        val_accuracy=float(record["val_accuracy"]),
                        seconds=float(record["seconds"]),
                    )
                )
        return log


# ---------------------------------------------------------------------------
# data plumbing


def stack_samples(
    samples: Sequence[SegmentationSample], normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into network inputs (n,1,h,w) and labels (n,h,w)."""
    if not samples:
        raise ConfigError("cannot stack an empty sample list")
    shape = samples[0].image.shape
    for sample in samples:
        if sample.image.shape != shape:
            raise ConfigError(
                f"sample {sample.source_id!r} has shape {sample.image.shape}, "
                f"expected {shape}; resize before stacking"
            )
    images = np.stack(
        [preprocess(s.image) if normalize else s.image for s in samples]
    )[:, None]
    labels = np.stack([s.mask.astype(np.int64) for s in samples])
    return images, labels


def batch_iterator(
    dataset: tuple[np.ndarray, np.ndarray],
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[tuple[Tensor4, np.ndarray]]:
    """Shuffled mini-batches for one epoch; the final short batch is kept.

    The permutation depends only on (seed, epoch), so a run can be replayed
    or parallelised without changing batch order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    images, labels = dataset
    if len(images) != len(labels):
        raise ConfigError(
            f"images and labels disagree on sample count: {len(images)} vs {len(labels)}"
        )
    order = np.random.default_rng([seed, epoch]).permutation(len(images))
    for start in range(0, len(order), batch_size):
        chosen = order[start : start + batch_size]
        yield Tensor4(images[chosen]), labels[chosen]


# ---------------------------------------------------------------------------
# evaluation and the loop itself


def evaluate(
    params: ModelParams,
    dataset: tuple[np.ndarray, np.ndarray],
    batch_size: int = 5,
) -> tuple[float, float]:
    """Mean pixel cross-entropy (no L2) and categorical accuracy."""
    images, labels = dataset
    if len(images) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    net = XNet(params)
    loss_sum = 0.0
    correct = 0
    pixels = 0
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        probs = net.forward(xb).data
        picked = np.take_along_axis(probs, yb[:, None].astype(np.intp), axis=1)
        loss_sum += float(-np.log(np.clip(picked, PROB_EPS, 1.0)).sum())
        correct += int((probs.argmax(axis=1) == yb).sum())
        pixels += yb.size
    return loss_sum / pixels, correct / pixels


def train(
    model: ModelParams,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    checkpoint_path=None,
) -> tuple[ModelParams, TrainingLog]:
    """Optimise ``model`` in place and return the best weights plus the log.

    Stops once validation loss fails to improve for ``patience`` consecutive
    epochs (or at ``max_epochs``) and returns the parameters from the
    lowest-validation-loss epoch.  With ``checkpoint_path`` set, the best
    weights are also saved to disk every time they improve.
    """
    train_images, train_labels = train_set
    if len(train_images) == 0:
        raise ConfigError("training set is empty")
    if len(val_set[0]) == 0:
        raise ConfigError("validation set is empty")

    net = XNet(model)
    state = AdamState.for_params(model)
    stopper = EarlyStopping(patience=config.patience)
    best = model.copy()
    # Patience ignores decreases smaller than MIN_IMPROVEMENT, but the
    # returned weights must still come from the strictly lowest-loss epoch.
    strict_best = np.inf
    log = TrainingLog()

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        loss_sum = 0.0
        seen = 0
        for xb, yb in batch_iterator(
            (train_images, train_labels), config.batch_size, config.seed, epoch
        ):
            net.forward(xb, train_mode=True)
            grads = net.backward(yb, l2_lambda=config.l2_lambda)
            adam_step(model, grads, state, config)
            loss_sum += net.last_loss * len(yb)
            seen += len(yb)
        train_loss = loss_sum / seen
        val_loss, val_accuracy = evaluate(model, val_set, config.batch_size)
        log.entries.append(
            TrainingLogEntry(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                seconds=time.perf_counter() - started,
            )
        )
        if val_loss < strict_best:
            strict_best = val_loss
            best = model.copy()
            if checkpoint_path is not None:
                save_checkpoint(best, checkpoint_path)
        stopper.observe(epoch, val_loss)
        if stopper.should_stop:
            break
    return best, log
