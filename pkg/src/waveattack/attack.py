"""WaveAttack: HH-subband trigger injection and joint generator/classifier training.

Each minibatch is split into payload samples (poisoned, relabelled to the
target), regularization samples (poisoned, true labels) and benign samples.
The generator ``g`` produces a residual on the HH subband; the poisoned image is
``IDWT(LL, LH, HL, HH + alpha * g(HH))``.  A BadNets grid-patch poisoner is
provided as a contrast baseline.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, DivergenceError, ShapeError, ValidationError
from .nets import ClassifierNet, GeneratorNet
from .optim import SGD, Adam, step_lr
from .tensor import Tensor, no_grad
from .wavelet import SubbandSet, dwt2, idwt2

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoisonPlan:
    p_a: float = 0.05
    p_r: float = 0.05
    target: int = 0
    alpha_train: float = 1.0
    alpha_infer: float = 100.0
    seed: int = 0

    def validate(self, num_classes: Optional[int] = None) -> "PoisonPlan":
        for name in ("p_a", "p_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.p_a + self.p_r > 1.0:
            raise ConfigError(f"p_a + p_r must be <= 1, got {self.p_a + self.p_r}")
        if self.alpha_train > self.alpha_infer:
            raise ConfigError(
                f"alpha_train ({self.alpha_train}) must not exceed alpha_infer ({self.alpha_infer})"
            )
        if self.target < 0 or (num_classes is not None and self.target >= num_classes):
            raise ConfigError(f"target label {self.target} outside [0, {num_classes})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledDataset:
    """Images in [0, 1] as an NxCxHxW float32 array plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be NxCxHxW, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")

    def validate(self) -> "LabeledDataset":
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: Optional[int]) -> "LabeledDataset":
        if n is None or n >= len(self):
            return self
        return LabeledDataset(self.images[:n], self.labels[:n], self.num_classes)

    def select(self, mask_or_index) -> "LabeledDataset":
        return LabeledDataset(self.images[mask_or_index], self.labels[mask_or_index], self.num_classes)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    clf_lr: float = 0.01
    clf_momentum: float = 0.9
    weight_decay: float = 0.0
    gen_lr: float = 0.001
    lr_decay_every: int = 100
    lr_decay_factor: float = 0.1
    augment_crop: bool = True
    augment_flip: bool = True
    crop_padding: int = 4
    shuffle: bool = True

    def validate(self, plan: Optional[PoisonPlan] = None) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if plan is not None and plan.p_a + plan.p_r > 0 and self.batch_size * (plan.p_a + plan.p_r) < 1:
            raise ConfigError("batch_size * (p_a + p_r) must be >= 1 so every batch holds poisoned samples")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchPartition:
    n_payload: int
    n_regular: int
    n_benign: int

    @property
    def n_poisoned(self) -> int:
        return self.n_payload + self.n_regular

    @property
    def payload(self) -> slice:
        return slice(0, self.n_payload)

    @property
    def regular(self) -> slice:
        return slice(self.n_payload, self.n_poisoned)

    @property
    def benign(self) -> slice:
        return slice(self.n_poisoned, None)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def partition_batch(batch_size: int, plan: PoisonPlan) -> BatchPartition:
    """Split a batch of ``batch_size`` into payload / regularization / benign counts.

    Counts use round-half-up: b=10, p=0.05 gives one payload sample.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2, got {batch_size}")
    n_a = round_half_up(plan.p_a * batch_size)
    n_r = round_half_up(plan.p_r * batch_size)
    if n_a + n_r > batch_size:
        raise ConfigError(f"{n_a} payload + {n_r} regularization samples exceed batch size {batch_size}")
    return BatchPartition(n_a, n_r, batch_size - n_a - n_r)


def augment(images: np.ndarray, rng: np.random.Generator, crop: bool = True, flip: bool = True,
            padding: int = 4) -> np.ndarray:
    """Random zero-padded crop and horizontal flip, per sample."""
    if not crop and not flip:
        return images
    n, _, h, w = images.shape
    out = images.copy()
    if crop and padding > 0:
        padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        offs = rng.integers(0, 2 * padding + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    if flip:
        flips = rng.random(n) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    return out


def apply_trigger(images, gen: GeneratorNet, alpha: float, return_residual: bool = False):
    """Poison ``images`` by adding ``alpha * g(HH)`` to their HH subband.

    The reconstruction uses linearity of the inverse transform,
    ``IDWT(LL, LH, HL, HH + r) = x + IDWT(0, 0, 0, r)``, so a zero residual
    returns the input bit-for-bit.  The result is clamped to [0, 1].
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    sub = dwt2(x)
    residual = gen(sub.hh) * float(alpha)
    zero = Tensor(np.zeros(sub.shape, dtype=x.dtype))
    delta = idwt2(SubbandSet(zero, zero, zero, residual))
    poisoned = F.clamp(x + delta, 0.0, 1.0)
    return (poisoned, residual) if return_residual else poisoned


def poison_images(images: np.ndarray, gen: GeneratorNet, alpha: float, batch_size: int = 500) -> np.ndarray:
    """Gradient-free batched :func:`apply_trigger`, returning a numpy array."""
    images = np.asarray(images, dtype=np.float32)
    out = np.empty_like(images)
    with no_grad():
        for i in range(0, len(images), batch_size):
            out[i : i + batch_size] = apply_trigger(images[i : i + batch_size], gen, alpha).data
    return out


def poison_for_inference(images, gen: GeneratorNet, plan: PoisonPlan, batch_size: int = 500) -> np.ndarray:
    """Attack-time poisoning with the amplified coefficient ``plan.alpha_infer``."""
    return poison_images(images, gen, plan.alpha_infer, batch_size)


def badnets_poison(images, patch_size: int = 3, patch_value: float = 1.0) -> np.ndarray:
    """Stamp a checkerboard patch in the bottom-right corner.

    Cells with even ``row + col`` (counted from the patch corner) take
    ``patch_value``, the others 0.
    """
    x = np.array(images.data if isinstance(images, Tensor) else images, dtype=np.float32, copy=True)
    h, w = x.shape[-2:]
    if patch_size < 1 or patch_size >= min(h, w):
        raise ConfigError(f"patch size {patch_size} must lie in [1, {min(h, w)})")
    ii, jj = np.indices((patch_size, patch_size))
    patch = np.where((ii + jj) % 2 == 0, patch_value, 0.0).astype(np.float32)
    x[..., h - patch_size :, w - patch_size :] = patch
    return x


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def last(self) -> dict:
        return self.records[-1]


def _check_finite(loss: Tensor, epoch: int, batch: int, terms: dict) -> None:
    if not np.isfinite(loss.data).all():
        detail = ", ".join(f"{k}={v:.4g}" for k, v in terms.items())
        raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, batch {batch}: {detail}")


PoisonFn = Callable[[Tensor, BatchPartition], tuple]


def _train_loop(dataset: LabeledDataset, clf: ClassifierNet, plan: PoisonPlan, cfg: TrainConfig,
                poison_fn: Optional[PoisonFn], extra_params: list, on_epoch=None) -> TrainLog:
    plan.validate(dataset.num_classes)
    cfg.validate(plan)
    if len(dataset) < cfg.batch_size:
        raise ConfigError(f"dataset has {len(dataset)} samples, fewer than one batch of {cfg.batch_size}")
    part = partition_batch(cfg.batch_size, plan)
    if part.n_poisoned and poison_fn is None:
        raise ConfigError("poisoning rates are non-zero but no poisoner was given")

    rng = np.random.default_rng(plan.seed)
    opt_c = SGD(clf.parameters(), cfg.clf_lr, cfg.clf_momentum, cfg.weight_decay)
    opt_g = Adam(extra_params, cfg.gen_lr) if extra_params and part.n_poisoned else None
    log = TrainLog()
    n_batches = len(dataset) // cfg.batch_size
    start = time.perf_counter()

    for epoch in range(cfg.epochs):
        opt_c.lr = step_lr(cfg.clf_lr, epoch, cfg.lr_decay_every, cfg.lr_decay_factor)
        if opt_g is not None:
            opt_g.lr = step_lr(cfg.gen_lr, epoch, cfg.lr_decay_every, cfg.lr_decay_factor)
        order = rng.permutation(len(dataset)) if cfg.shuffle else np.arange(len(dataset))
        sums = {"L1": 0.0, "L2": 0.0, "L3": 0.0, "Lr": 0.0, "loss": 0.0}
        correct = seen = 0
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            x = augment(dataset.images[idx], rng, cfg.augment_crop, cfg.augment_flip, cfg.crop_padding)
            y = dataset.labels[idx]
            terms = {}
            if part.n_poisoned:
                poisoned, reg_term = poison_fn(Tensor(x[: part.n_poisoned]), part)
                logits = clf(F.concat([poisoned, Tensor(x[part.n_poisoned :])], axis=0))
            else:
                reg_term = None
                logits = clf(Tensor(x))
            loss = None
            b = cfg.batch_size
            # each group's mean CE is weighted by its share of the batch, so
            # L1 + L2 + L3 is the plain minibatch-mean cross-entropy
            if part.n_payload:
                target = np.full(part.n_payload, plan.target, dtype=np.int64)
                terms["L1"] = F.cross_entropy(logits[part.payload], target) * (part.n_payload / b)
            if part.n_regular:
                terms["L2"] = F.cross_entropy(logits[part.regular], y[part.regular]) * (part.n_regular / b)
            if part.n_benign:
                terms["L3"] = F.cross_entropy(logits[part.benign], y[part.benign]) * (part.n_benign / b)
            if reg_term is not None:
                terms["Lr"] = reg_term
            for t in terms.values():
                loss = t if loss is None else loss + t
            values = {k: float(v.data) for k, v in terms.items()}
            _check_finite(loss, epoch, bi, values)
            loss.backward()
            opt_c.step()
            if opt_g is not None:
                opt_g.step()
            for k, v in values.items():
                sums[k] += v
            sums["loss"] += float(loss.data)
            pred = logits.data[part.benign].argmax(axis=1)
            correct += int((pred == y[part.benign]).sum()) if part.n_benign else 0
            seen += part.n_benign
        record = {"epoch": epoch + 1}
        for k in ("L1", "L2", "L3", "Lr", "loss"):
            record[k] = sums[k] / n_batches
        record["train_ba"] = correct / max(seen, 1)
        log.append(record)
        logger.info("epoch %d: %s", epoch + 1, record)
        if on_epoch is not None:
            on_epoch(record)
    log.wall_seconds = time.perf_counter() - start
    return log


def waveattack_train(dataset: LabeledDataset, gen: GeneratorNet, clf: ClassifierNet, plan: PoisonPlan,
                     cfg: TrainConfig, on_epoch=None):
    """Jointly train the trigger generator and the backdoored classifier.

    Per batch the loss is ``L1 + L2 + L3 + ||alpha_train * g(HH)||_inf``:
    payload cross-entropy against the target label, regularization
    cross-entropy against true labels, benign cross-entropy, and the residual
    size penalty.  Each cross-entropy term sums over its group and divides by
    the batch size.  Returns ``(gen, clf, log)``.
    """

    def poison(xm: Tensor, part: BatchPartition):
        poisoned, residual = apply_trigger(xm, gen, plan.alpha_train, return_residual=True)
        return poisoned, F.linf_norm(residual)

    log = _train_loop(dataset, clf, plan, cfg, poison, gen.parameters(), on_epoch)
    return gen, clf, log


def badnets_train(dataset: LabeledDataset, clf: ClassifierNet, plan: PoisonPlan, cfg: TrainConfig,
                  patch_size: int = 3, patch_value: float = 1.0, on_epoch=None):
    """Train a classifier backdoored with the grid patch.

    Payload samples get the patch and the target label; regularization samples
    (if ``p_r > 0``) get the patch and keep their labels.
    """

    def poison(xm: Tensor, part: BatchPartition):
        return Tensor(badnets_poison(xm.data, patch_size, patch_value)), None

    log = _train_loop(dataset, clf, plan, cfg, poison, [], on_epoch)
    return clf, log


def train_clean(dataset: LabeledDataset, clf: ClassifierNet, cfg: TrainConfig, seed: int = 0, on_epoch=None):
    """Plain supervised training; the same loop as the attacks with zero poisoning rates."""
    plan = PoisonPlan(p_a=0.0, p_r=0.0, seed=seed)
    log = _train_loop(dataset, clf, plan, cfg, None, [], on_epoch)
    return clf, log
