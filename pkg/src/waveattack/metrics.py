"""Attack effectiveness (BA, ASR) and image fidelity (PSNR, SSIM)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, no_grad


@dataclass
class AttackReport:
    ba: float
    asr: float
    psnr_db: float
    ssim: float
    alpha_used: float
    n_eval: int

    def __post_init__(self):
        for name in ("ba", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.ssim > 1.0 + 1e-9:
            raise ValidationError(f"ssim must be <= 1, got {self.ssim}")

    def to_dict(self) -> dict:
        return asdict(self)


def predict_logits(model, images, batch_size: int = 500) -> np.ndarray:
    """Logits for ``images`` from a network or any callable mapping arrays to logits."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(Tensor(images[i : i + batch_size]))
            outs.append(np.asarray(out.data if isinstance(out, Tensor) else out))
    if not outs:
        return np.zeros((0, 0))
    return np.concatenate(outs, axis=0)


def predict(model, images, batch_size: int = 500) -> np.ndarray:
    return predict_logits(model, images, batch_size).argmax(axis=1)


def benign_accuracy(model, images, labels, batch_size: int = 500) -> float:
    """Fraction of clean samples classified correctly."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValidationError("benign accuracy of an empty test set")
    return float((predict(model, images, batch_size) == labels).mean())


def attack_success_rate(model, poison_fn, images, labels, target: int, batch_size: int = 500) -> float:
    """Fraction of poisoned non-target samples classified as ``target``.

    ``poison_fn`` maps a clean image array to its poisoned counterpart, e.g.
    ``lambda x: poison_for_inference(x, gen, plan)``.
    """
    labels = np.asarray(labels)
    eligible = labels != target
    if not eligible.any():
        raise ValidationError("no test samples outside the target class")
    x = np.asarray(images)[eligible]
    poisoned = poison_fn(x)
    return float((predict(model, poisoned, batch_size) == target).mean())


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    h, w = x.shape[-2:]
    rows = sum(g[i] * x[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity over all valid Gaussian windows and channels.

    Accepts HxW, CxHxW or NxCxHxW arrays; for batches the result is the mean over images.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise ValidationError(f"ssim needs images of at least {window}x{window}, got {a.shape}")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def fidelity(clean, poisoned) -> tuple[float, float]:
    """Mean per-image PSNR and SSIM between two aligned batches.

    Identical pairs contribute an infinite PSNR, which makes the mean infinite.
    """
    clean = np.asarray(clean)
    poisoned = np.asarray(poisoned)
    if clean.shape != poisoned.shape:
        raise ShapeError(f"fidelity: shapes {clean.shape} and {poisoned.shape} differ")
    p = [psnr(c, q) for c, q in zip(clean, poisoned)]
    return float(np.mean(p)), ssim(clean, poisoned)


def attack_report(clf, gen_poison_fn, images, labels, target: int, alpha: float,
                  fidelity_images=None) -> AttackReport:
    """BA on clean data, ASR under ``gen_poison_fn`` and fidelity of the poisoned images."""
    images = np.asarray(images)
    ba = benign_accuracy(clf, images, labels)
    asr = attack_success_rate(clf, gen_poison_fn, images, labels, target)
    ref = images if fidelity_images is None else np.asarray(fidelity_images)
    p, s = fidelity(ref, gen_poison_fn(ref))
    return AttackReport(ba=ba, asr=asr, psnr_db=p, ssim=s, alpha_used=float(alpha), n_eval=len(labels))
