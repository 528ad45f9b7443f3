"""Backdoor defenses: STRIP, Fine-Pruning, Spectral Signature, Neural Cleanse, GradCAM.

All defenses treat the classifier as frozen.  Fine-pruning edits only the
classifier's ``channel_mask`` and restores it before returning.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .errors import ValidationError
from .metrics import predict_logits
from .optim import Adam
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


@dataclass
class DefenseReport:
    kind: str
    scores: Optional[np.ndarray] = None
    curve: list = field(default_factory=list)
    mask_norms: Optional[np.ndarray] = None
    anomaly_indices: Optional[np.ndarray] = None
    summary: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        xs = [pt["fraction"] for pt in self.curve]
        if any(b <= a for a, b in zip(xs, xs[1:])) or any(not 0.0 <= x <= 1.0 for x in xs):
            raise ValidationError("pruning curve fractions must be strictly increasing within [0, 1]")
        if self.anomaly_indices is not None and np.any(np.asarray(self.anomaly_indices) < 0):
            raise ValidationError("anomaly indices must be non-negative")

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else [_num(x) for x in np.asarray(v, dtype=float).ravel()]

        return {
            "kind": self.kind,
            "scores": arr(self.scores),
            "curve": [{k: _num(v) for k, v in pt.items()} for pt in self.curve],
            "mask_norms": arr(self.mask_norms),
            "anomaly_indices": arr(self.anomaly_indices),
            "summary": {k: _num(v) for k, v in self.summary.items()},
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "NaN"
        if math.isinf(v):
            return "INF" if v > 0 else "-INF"
        return v
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    return v


# STRIP -------------------------------------------------------------------------------


def entropy_nats(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (natural log) of softmax(logits) along the last axis."""
    logp = F.log_softmax(np.asarray(logits, dtype=np.float64))
    return -(np.exp(logp) * logp).sum(axis=-1)


def strip(clf, suspects, pool, n_overlays: int = 20, seed: int = 0, batch_size: int = 500) -> np.ndarray:
    """Mean prediction entropy of each suspect over ``n_overlays`` random blends.

    Each blend is ``clamp(0.5 * x + 0.5 * x_clean)`` with ``x_clean`` drawn
    uniformly (with replacement) from ``pool``.  Low entropy means the
    prediction ignores the overlaid content, the signature of a dominant trigger.
    """
    suspects = np.asarray(suspects, dtype=np.float32)
    pool = np.asarray(pool, dtype=np.float32)
    if len(pool) == 0:
        raise ValidationError("STRIP needs a non-empty clean overlay pool")
    if n_overlays < 1:
        raise ValidationError(f"n_overlays must be >= 1, got {n_overlays}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pool), size=(len(suspects), n_overlays))
    blends = np.clip(0.5 * suspects[:, None] + 0.5 * pool[picks], 0.0, 1.0)
    flat = blends.reshape((-1,) + suspects.shape[1:])
    ent = entropy_nats(predict_logits(clf, flat, batch_size))
    return ent.reshape(len(suspects), n_overlays).mean(axis=1)


def strip_report(clf, benign, poisoned, pool, n_overlays: int = 20, seed: int = 0) -> DefenseReport:
    eb = strip(clf, benign, pool, n_overlays, seed)
    ep = strip(clf, poisoned, pool, n_overlays, seed + 1)
    scores = np.concatenate([eb, ep])
    flags = np.r_[np.zeros(len(eb)), np.ones(len(ep))]
    return DefenseReport(
        "strip",
        scores=scores,
        summary={
            "median_entropy_benign": float(np.median(eb)),
            "median_entropy_poisoned": float(np.median(ep)),
            # low entropy flags a sample as poisoned
            "auroc": auroc(-scores, flags),
            "n_overlays": n_overlays,
        },
    )


# Fine-Pruning ------------------------------------------------------------------------


def channel_activation_means(clf, images, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    total = np.zeros(clf.last_conv_channels)
    with no_grad():
        for i in range(0, len(images), batch_size):
            act = clf.last_conv(Tensor(images[i : i + batch_size])).data
            total += act.sum(axis=(0, 2, 3))
    return total / len(images)


def fine_pruning(clf, calibration, eval_fn: Callable, steps: int = 16) -> DefenseReport:
    """Prune last-conv channels from least to most active on clean data.

    ``eval_fn(clf)`` returns ``(ba, asr)``.  The curve has ``steps + 1`` points
    at fractions ``0, 1/steps, ..., 1``; each level zeroes the first
    ``round(fraction * C)`` channels of the ranking.
    """
    calibration = np.asarray(calibration)
    if len(calibration) == 0:
        raise ValidationError("fine-pruning needs a non-empty calibration set")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    saved = clf.channel_mask.copy()
    try:
        clf.channel_mask = np.ones_like(saved)
        means = channel_activation_means(clf, calibration)
        # stable sort so equally idle channels prune in index order
        order = np.argsort(means, kind="stable")
        c = len(order)
        curve = []
        for s in range(steps + 1):
            frac = s / steps
            k = int(math.floor(frac * c + 0.5))
            mask = np.ones_like(saved)
            mask[order[:k]] = 0.0
            clf.channel_mask = mask
            ba, asr = eval_fn(clf)
            curve.append({"fraction": frac, "pruned": k, "ba": float(ba), "asr": float(asr)})
    finally:
        clf.channel_mask = saved
    ba0 = curve[0]["ba"]
    keep = [pt for pt in curve if pt["ba"] >= 0.8 * ba0]
    best = keep[-1]
    return DefenseReport(
        "fine_pruning",
        curve=curve,
        summary={"ba0": ba0, "asr0": curve[0]["asr"], "fraction_at_0.8ba": best["fraction"],
                 "ba_at_0.8ba": best["ba"], "asr_at_0.8ba": best["asr"]},
    )


# Spectral Signature ------------------------------------------------------------------


def top_singular_vector(centered: np.ndarray, tol: float = 1e-6, max_iter: int = 1000, seed: int = 0):
    """Top eigenvector of ``centered.T @ centered / n`` by power iteration.

    Returns ``(v, eigenvalue, converged)``.  Convergence means the sign-aligned
    change of the unit iterate dropped below ``tol``.
    """
    n, d = centered.shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iter):
        w = centered.T @ (centered @ v) / n
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0, True
        w /= norm
        if w @ v < 0:
            w = -w
        delta = np.linalg.norm(w - v)
        v = w
        if delta < tol:
            converged = True
            break
    lam = float(v @ (centered.T @ (centered @ v)) / n)
    return v, lam, converged


def auroc(scores, flags) -> float:
    """Area under the ROC curve of ``scores`` as a detector of ``flags == 1``.

    Mann-Whitney statistic with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags).astype(bool)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both positive and negative samples")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spectral_signature(features, flags=None, tol: float = 1e-6, max_iter: int = 1000, seed: int = 0) -> DefenseReport:
    """Outlier scores ``|(f - mean) . v|`` along the top singular direction.

    With ground-truth ``flags`` the report includes the detector AUROC.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValidationError(f"spectral signature needs an n x d feature matrix with n >= 2, got {feats.shape}")
    centered = feats - feats.mean(axis=0)
    v, lam, ok = top_singular_vector(centered, tol, max_iter, seed)
    scores = np.abs(centered @ v)
    report = DefenseReport("spectral_signature", scores=scores, summary={"eigenvalue": lam, "converged": ok})
    if not ok:
        report.warnings.append(f"power iteration did not converge within {max_iter} iterations")
    if flags is not None:
        report.summary["auroc"] = auroc(scores, flags)
    report.summary["direction"] = v.tolist()
    return report


# Neural Cleanse ------------------------------------------------------------------------


def anomaly_index(norms) -> np.ndarray:
    """``|x - median| / (1.4826 * MAD)`` per entry; all zeros when MAD is zero and values agree."""
    x = np.asarray(norms, dtype=np.float64)
    med = np.median(x)
    dev = np.abs(x - med)
    mad = np.median(dev)
    if mad == 0.0:
        return np.where(dev == 0.0, 0.0, np.inf)
    return dev / (MAD_CONSISTENCY * mad)


def _logit(p):
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p / (1 - p))


@contextmanager
def frozen(net):
    """Temporarily stop ``net``'s parameters from requiring gradients."""
    params = net.parameters()
    flags = [q.requires_grad for q in params]
    for q in params:
        q.requires_grad = False
    try:
        yield net
    finally:
        for q, f in zip(params, flags):
            q.requires_grad = f


def reverse_trigger(clf, images, target: int, iterations: int = 300, lam: float = 0.01, lr: float = 0.1,
                    batch_size: int = 32, seed: int = 0):
    """Optimize a mask/pattern pair that flips clean ``images`` to ``target``.

    Returns ``(mask HxW, pattern CxHxW, success rate on images, final loss)``.
    """
    images = np.asarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    rng = np.random.default_rng(seed)
    m_param = Tensor(_logit(rng.uniform(0.05, 0.15, size=(1, 1, h, w))).astype(np.float32), requires_grad=True)
    p_param = Tensor(_logit(rng.uniform(0.0, 1.0, size=(1, c, h, w))).astype(np.float32), requires_grad=True)
    opt = Adam([m_param, p_param], lr=lr, betas=(0.5, 0.9))
    labels = np.full(batch_size, target, dtype=np.int64)
    with frozen(clf):
        loss_val = _optimize_trigger(clf, images, target, m_param, p_param, opt, labels, iterations, lam, rng)
    mask = 1.0 / (1.0 + np.exp(-m_param.data[0, 0].astype(np.float64)))
    pattern = 1.0 / (1.0 + np.exp(-p_param.data[0].astype(np.float64)))
    stamped = images * (1.0 - mask) + pattern * mask
    success = float((predict_logits(clf, stamped).argmax(axis=1) == target).mean())
    return mask, pattern, success, loss_val


def _optimize_trigger(clf, images, target, m_param, p_param, opt, labels, iterations, lam, rng):
    n = len(images)
    batch_size = len(labels)
    loss_val = math.nan
    for _ in range(iterations):
        idx = rng.integers(0, n, size=batch_size)
        mask = m_param.sigmoid()
        pattern = p_param.sigmoid()
        x = Tensor(images[idx])
        stamped = x * (1.0 - mask) + pattern * mask
        ce = F.cross_entropy(clf(stamped), labels)
        loss = ce + mask.abs().sum() * lam
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise FloatingPointError(f"reverse-engineering for class {target} diverged")
        loss.backward()
        opt.step()
    return loss_val


def neural_cleanse(clf, images, iterations: int = 300, lam: float = 0.01, lr: float = 0.1,
                   batch_size: int = 32, seed: int = 0, classes=None) -> DefenseReport:
    """Per-class minimal trigger search and MAD-based outlier test on the mask L1 norms.

    The model is flagged when some class has an anomaly index above 2 on the
    small-norm side of the median.  Classes whose optimization diverges get a
    NaN norm and are excluded from the statistics.
    """
    k = clf.num_classes if classes is None else len(classes)
    classes = list(range(k)) if classes is None else list(classes)
    if k < 3:
        raise ValidationError(f"Neural Cleanse needs at least 3 classes, got {k}")
    norms = np.full(k, np.nan)
    success = np.full(k, np.nan)
    masks, patterns, warnings = {}, {}, []
    for i, c in enumerate(classes):
        try:
            m, p, s, _ = reverse_trigger(clf, images, c, iterations, lam, lr, batch_size, seed * 1000 + c)
        except FloatingPointError as exc:
            warnings.append(str(exc))
            continue
        norms[i] = m.sum()
        success[i] = s
        masks[c], patterns[c] = m, p
    ok = ~np.isnan(norms)
    indices = np.zeros(k)
    if ok.sum() >= 3:
        indices[ok] = anomaly_index(norms[ok])
    else:
        warnings.append("fewer than 3 classes optimized successfully; anomaly indices not computed")
    med = np.median(norms[ok]) if ok.any() else math.nan
    small = ok & (norms < med)
    flagged = bool(np.any(indices[small] > ANOMALY_THRESHOLD))
    report = DefenseReport(
        "neural_cleanse",
        mask_norms=norms,
        anomaly_indices=indices,
        summary={
            "max_anomaly_index": float(indices.max()),
            "max_small_side_index": float(indices[small].max()) if small.any() else 0.0,
            "flagged": flagged,
            "suspect_class": int(classes[int(np.nanargmin(norms))]) if ok.any() else -1,
            "success": success.tolist(),
        },
        warnings=warnings,
    )
    report.masks = masks
    report.patterns = patterns
    return report


# GradCAM -------------------------------------------------------------------------------


def bilinear_resize(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of the last two axes (edges clamped)."""
    sh, sw = maps.shape[-2:]

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, sh)
    x0, x1, fx = coords(w, sw)
    rows = maps[..., y0, :] * (1 - fy)[:, None] + maps[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def gradcam(clf, image, cls: int) -> np.ndarray:
    """Class-activation heatmap over the input grid, max-normalized to [0, 1]."""
    if not 0 <= cls < clf.num_classes:
        raise ValidationError(f"class {cls} outside [0, {clf.num_classes})")
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    with frozen(clf):
        # the activation is the only leaf that needs a gradient
        act = clf.last_conv(Tensor(x)).detach()
        act.requires_grad = True
        logits = clf.head(act)
        logits[:, cls].sum().backward()
    a = act.data.astype(np.float64)
    grad = np.zeros_like(a) if act.grad is None else act.grad.astype(np.float64)
    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * a).sum(axis=1), 0.0)
    cam = bilinear_resize(cam, x.shape[2], x.shape[3])
    peak = cam.max(axis=(1, 2), keepdims=True)
    cam = np.divide(cam, peak, out=np.zeros_like(cam), where=peak > 0)
    return cam[0] if np.asarray(image).ndim == 3 else cam


def gradcam_difference(clf_a, clf_b, images, classes) -> float:
    """Mean absolute difference between two models' heatmaps on the same inputs."""
    diffs = [np.abs(gradcam(clf_a, x, int(c)) - gradcam(clf_b, x, int(c))).mean() for x, c in zip(images, classes)]
    return float(np.mean(diffs))
