"""Losses, training loop with plateau schedule and early stopping, metrics, prediction."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ImageSample
from .errors import ConfigError, DimensionError, TrainingError
from .imaging import as_gray, gaussian_blur, negative
from .optim import Adam
from .tensor import Tensor, clamp, log, no_grad
from .unet import Model, forward

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def _same_shape(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} vs target {target.shape}")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy over batch and pixels; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    _same_shape(pred, target, "bce_loss")
    p = clamp(pred, BCE_EPS, 1 - BCE_EPS)
    return -(target * log(p) + (1 - target) * log(1 - p)).mean()


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse_loss")
    d = pred - target
    return (d * d).mean()


LOSSES = {"bce": bce_loss, "mse": mse_loss}


# inputs

def image_to_array(image: np.ndarray, use_negative: bool = True) -> np.ndarray:
    gray = as_gray(image)
    if use_negative:
        gray = negative(gray)
    return gray.astype(np.float32) / 255.0


def batch_tensors(samples: Sequence[ImageSample], use_negative: bool = True) -> tuple[Tensor, Tensor]:
    x = np.stack([image_to_array(s.image, use_negative) for s in samples])[:, None]
    y = np.stack([(s.mask > 0).astype(np.float32) for s in samples])[:, None]
    return Tensor(x), Tensor(y)


# schedule

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    plateau_patience: int = 8
    plateau_factor: float = 0.2
    early_stop_patience: int = 10
    min_delta: float = 1e-6
    loss: str = "bce"
    use_negative: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")


class PlateauSchedule:
    """Reduce-on-plateau learning rate plus early stopping on a monitored loss.

    An epoch improves when its loss is below ``best - min_delta``. After
    ``patience`` consecutive epochs without improvement the rate is multiplied
    by ``factor`` and the plateau counter restarts. Training stops once
    ``stop_patience`` epochs have passed since the best epoch.
    """

    def __init__(self, lr: float, factor: float = 0.2, patience: int = 8, stop_patience: int = 10, min_delta: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def step(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Record ``loss`` for ``epoch``; returns ``(improved, stop)``."""
        improved = loss < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return improved, epoch - self.best_epoch >= self.stop_patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.lr!r}\t{self.seconds:.3f}"


@dataclass
class TrainResult:
    model: Model
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(rec.line() + "\n")


def evaluate_loss(model: Model, samples: Sequence[ImageSample], config: TrainConfig) -> float:
    loss_fn = LOSSES[config.loss]
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), config.batch_size):
            chunk = samples[i : i + config.batch_size]
            x, y = batch_tensors(chunk, config.use_negative)
            total += loss_fn(forward(model, x), y).item() * len(chunk)
    return total / len(samples)


def train(
    model: Model,
    train_samples: Sequence[ImageSample],
    val_samples: Sequence[ImageSample],
    config: TrainConfig = TrainConfig(),
    validate: Callable[[Model, int], float] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with reduce-on-plateau and early stopping.

    The monitored quantity is the validation loss, or ``validate(model, epoch)``
    when supplied. On exit the parameters of the best epoch are restored.

    Raises:
        TrainingError: a non-finite loss or gradient; the model is first reset
            to its best parameters so far.
    """
    config.validate()
    if not train_samples or not (val_samples or validate):
        raise TrainingError("training needs non-empty train and validation splits")
    loss_fn = LOSSES[config.loss]
    params = model.named_parameters()
    opt = Adam(params, lr=config.lr)
    sched = PlateauSchedule(config.lr, config.plateau_factor, config.plateau_patience,
                            config.early_stop_patience, config.min_delta)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    best_state = model.state()

    def fail(msg: str):
        model.load_state(best_state)
        raise TrainingError(msg)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        opt.lr = lr
        order = rng.permutation(len(train_samples))
        running = 0.0
        for i in range(0, len(order), config.batch_size):
            batch = [train_samples[j] for j in order[i : i + config.batch_size]]
            x, y = batch_tensors(batch, config.use_negative)
            opt.zero_grad()
            loss = loss_fn(forward(model, x), y)
            value = loss.item()
            if not math.isfinite(value):
                fail(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            try:
                opt.step()
            except TrainingError as exc:
                fail(f"epoch {epoch}: {exc}")
            running += value * len(batch)
        train_loss = running / len(order)
        val_loss = validate(model, epoch) if validate else evaluate_loss(model, val_samples, config)
        if not math.isfinite(val_loss):
            fail(f"non-finite validation loss at epoch {epoch}")

        improved, stop = sched.step(epoch, val_loss)
        if improved:
            best_state = model.state()
        rec = EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        result.log.append(rec)
        logger.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        if on_epoch:
            on_epoch(rec)
        if stop:
            result.stopped_early = True
            break

    model.load_state(best_state)
    result.best_epoch = sched.best_epoch
    result.best_val_loss = sched.best
    return result


# metrics

@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    iou_line: float
    iou_background: float
    miou: float
    threshold: float = 0.5

    @property
    def iou_per_class(self) -> dict[str, float]:
        return {"background": self.iou_background, "line": self.iou_line}

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items())

    def table_row(self, method: str, params: int | None = None) -> str:
        """Tab-separated ``method, params, f1, miou`` row."""
        return f"{method}\t{'' if params is None else params}\t{self.f1:.6f}\t{self.miou:.6f}"


def _binary(x: np.ndarray, threshold: float) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x >= 128 if x.max(initial=0) > 1 else x > 0
    if x.dtype == bool:
        return x
    return x >= threshold


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def metrics(pred, target, threshold: float = 0.5) -> MetricsReport:
    """Pixel counts, precision/recall/F1 for the line class, and two-class mIoU.

    ``pred`` may be probabilities (binarised at ``threshold``) or masks.
    Accepts a single array or a sequence of arrays; counts are pooled.
    """
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(target):
            raise DimensionError(f"{len(pred)} predictions vs {len(target)} targets")
        pairs = list(zip(pred, target))
    else:
        pairs = [(pred, target)]
    tp = fp = fn = tn = 0
    for p, t in pairs:
        p, t = _binary(p, threshold), _binary(t, 0.5)
        if p.shape != t.shape:
            raise DimensionError(f"metrics: prediction {p.shape} vs target {t.shape}")
        tp += int(np.count_nonzero(p & t))
        fp += int(np.count_nonzero(p & ~t))
        fn += int(np.count_nonzero(~p & t))
        tn += int(np.count_nonzero(~p & ~t))
    nothing_to_find = tp + fn == 0
    precision = _ratio(tp, tp + fp, 1.0 if nothing_to_find else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if tp + fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou_line = _ratio(tp, tp + fp + fn, 1.0)
    iou_bg = _ratio(tn, tn + fp + fn, 1.0)
    return MetricsReport(tp, fp, fn, tn, precision, recall, f1, iou_line, iou_bg, (iou_line + iou_bg) / 2, threshold)


# prediction

def predict_proba(model: Model, image: np.ndarray, use_negative: bool = True) -> np.ndarray:
    with no_grad():
        x = Tensor(image_to_array(image, use_negative)[None, None])
        return forward(model, x).data[0, 0].astype(np.float64)


def postprocess(prob: np.ndarray, threshold: float = 0.5, post_blur: bool = False, sigma: float = 1.0) -> np.ndarray:
    """Optional 3x3 Gaussian smoothing of the probability map, then binarise to 0/255."""
    if post_blur:
        prob = gaussian_blur(np.asarray(prob, dtype=np.float64), sigma)
    return np.where(prob >= threshold, 255, 0).astype(np.uint8)


def predict(
    model: Model,
    image: np.ndarray,
    threshold: float = 0.5,
    post_blur: bool = False,
    sigma: float = 1.0,
    use_negative: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(mask, probability_map)``."""
    prob = predict_proba(model, image, use_negative)
    return postprocess(prob, threshold, post_blur, sigma), prob


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Paint mask pixels red at ``alpha`` opacity over the image."""
    rgb = np.asarray(image)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    out = rgb.astype(np.float64)
    on = np.asarray(mask) > 0
    out[on] = (1 - alpha) * out[on] + alpha * np.array([255.0, 0.0, 0.0])
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
