"""Differentiable layer primitives: convolutions, activations, losses."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check4d(name: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4-d NxCxHxW tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Unfold a padded NxCxHxW array into a (C*kh*kw, N*oh*ow) matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a padded array."""
    n, c = padded_shape[:2]
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``weight`` is OxCxKhxKw; output NxOxH'xW'."""
    x, weight = _tensor(x), _tensor(weight)
    _check4d("conv2d input", x)
    _check4d("conv2d weight", weight)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = w2.T @ g2
            gx = _unpad(_col2im(gcols, xp.shape, kh, kw, stride, oh, ow), padding)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` w.r.t. its input.

    ``weight`` has the same OxCxKhxKw layout as for conv2d: the input carries O
    channels and the output C.  Output size is
    ``(H - 1) * stride - 2 * padding + Kh + output_padding``.
    """
    x, weight = _tensor(x), _tensor(weight)
    _check4d("conv_transpose2d input", x)
    _check4d("conv_transpose2d weight", weight)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValidationError(f"output_padding must be < stride, got {output_padding}")
    n, o, h, w = x.shape
    ow_, c, kh, kw = weight.shape
    if o != ow_:
        raise ShapeError(f"conv_transpose2d: input has {o} channels but weight expects {ow_}")
    out_h = (h - 1) * stride - 2 * padding + kh + output_padding
    out_w = (w - 1) * stride - 2 * padding + kw + output_padding
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d: padding leaves an empty output")
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (c,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({c},)")

    padded_shape = (n, c, out_h + 2 * padding, out_w + 2 * padding)
    x2 = x.data.transpose(1, 0, 2, 3).reshape(o, -1)
    w2 = weight.data.reshape(o, -1)
    out = _unpad(_col2im(w2.T @ x2, padded_shape, kh, kw, stride, h, w), padding)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (w2 @ gcols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (x2 @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back)


def relu(x) -> Tensor:
    x = _tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight MxD."""
    x, weight = _tensor(x), _tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be multiples of k."""
    x = _tensor(x)
    _check4d("avg_pool2d input", x)
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by k={k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return Tensor._make(out, (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(a, b) -> Tensor:
    """Stack two NxCxHxW tensors along the channel axis."""
    a, b = _tensor(a), _tensor(b)
    _check4d("concat_channels", a)
    _check4d("concat_channels", b)
    return concat([a, b], axis=1)


def clamp(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip values; the gradient passes straight through inside [lo, hi] and is zero outside."""
    x = _tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = _tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects NxK logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if n == 0:
        raise ValidationError("cross_entropy of an empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def linf_norm(x) -> Tensor:
    """Per-sample max |value|, averaged over the leading batch axis.

    A 1-d input is treated as a single sample.  The subgradient goes to each
    sample's argmax element (lowest flat index on ties).
    """
    x = _tensor(x)
    if x.size == 0:
        raise ValidationError("linf_norm of an empty tensor")
    flat = x.data.reshape(1, -1) if x.ndim <= 1 else x.data.reshape(x.shape[0], -1)
    n = flat.shape[0]
    if flat.shape[1] == 0:
        raise ValidationError("linf_norm of samples with no elements")
    idx = np.abs(flat).argmax(axis=1)
    rows = np.arange(n)
    peaks = flat[rows, idx]
    value = np.abs(peaks).mean()

    def back(g):
        grad = np.zeros_like(flat)
        grad[rows, idx] = np.sign(peaks) * (g / n)
        return (grad.reshape(x.shape),)

    return Tensor._make(np.asarray(value, dtype=x.dtype), (x,), back)
