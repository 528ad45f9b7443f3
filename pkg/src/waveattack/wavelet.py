"""Single-level 2-D Haar DWT / IDWT.

Subband naming: the first letter is the filter applied along the vertical axis
(rows), the second along the horizontal axis (columns).  For a 2x2 block
``[[a, b], [c, d]]``::

    LL = ( a + b + c + d) / 2
    LH = (-a + b - c + d) / 2
    HL = (-a - b + c + d) / 2
    HH = ( a - b - c + d) / 2

with low = (1, 1)/sqrt(2) and high = (-1, 1)/sqrt(2).  The transform is
orthonormal, so idwt2 is both its inverse and its adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor

BANDS = ("LL", "LH", "HL", "HH")


@dataclass(frozen=True)
class HaarKernel:
    low: tuple = (1 / math.sqrt(2), 1 / math.sqrt(2))
    high: tuple = (-1 / math.sqrt(2), 1 / math.sqrt(2))

    def matrix(self, n: int) -> np.ndarray:
        """Analysis matrix for a length-``n`` signal: low-pass rows first, then high-pass."""
        if n % 2:
            raise ValidationError(f"signal length must be even, got {n}")
        m = np.zeros((n, n))
        for k in range(n // 2):
            m[k, 2 * k : 2 * k + 2] = self.low
            m[n // 2 + k, 2 * k : 2 * k + 2] = self.high
        return m


@dataclass
class SubbandSet:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {b.shape for b in self.bands()}
        if len(shapes) != 1:
            raise ShapeError(f"subbands must share one shape, got {sorted(shapes)}")

    def bands(self) -> tuple:
        return (self.ll, self.lh, self.hl, self.hh)

    def get(self, name: str) -> Tensor:
        return getattr(self, name.lower())

    def replace(self, **bands) -> "SubbandSet":
        cur = {"ll": self.ll, "lh": self.lh, "hl": self.hl, "hh": self.hh}
        cur.update({k.lower(): v for k, v in bands.items()})
        return SubbandSet(**cur)

    @property
    def shape(self) -> tuple:
        return self.ll.shape


def _split(x: np.ndarray):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return (
        (a + b + c + d) * 0.5,
        (-a + b - c + d) * 0.5,
        (-a - b + c + d) * 0.5,
        (a - b - c + d) * 0.5,
    )


def _merge(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape[-2:]
    out = np.empty(ll.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(ll, lh, hl, hh))
    out[..., 0::2, 0::2] = (ll - lh - hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll + lh + hl + hh) * 0.5
    return out


def dwt2(images) -> SubbandSet:
    """Channelwise one-level Haar analysis of an NxCxHxW batch (H, W even)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim < 2:
        raise ShapeError(f"dwt2 expects at least 2-d input, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValidationError(f"dwt2 needs even height and width, got {h}x{w}")
    parts = _split(x.data)
    outs = []
    for k in range(4):

        def back(g, k=k):
            zeros = [np.zeros_like(g)] * 4
            zeros[k] = g
            return (_merge(*zeros),)

        outs.append(Tensor._make(np.ascontiguousarray(parts[k]), (x,), back))
    return SubbandSet(*outs)


def idwt2(subbands: SubbandSet) -> Tensor:
    """Exact inverse of :func:`dwt2`."""
    bands = [b if isinstance(b, Tensor) else Tensor(b) for b in subbands.bands()]
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise ShapeError(f"subbands must share one shape, got {sorted(shapes)}")
    out = _merge(*(b.data for b in bands))
    return Tensor._make(out, bands, lambda g: _split(g))


def psnr_db(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def subband_noise_probe(image, band: str, noise_amplitude: float, seed: int = 0, noise=None):
    """Add uniform noise in [-amplitude, amplitude] to one subband and reconstruct.

    ``image`` is CxHxW or NxCxHxW in [0, 1].  The same noise draw (fixed by
    ``seed``, or passed explicitly) is used whichever band is chosen, so calls
    for different bands are directly comparable.  Returns
    ``(reconstruction, psnr_db)``; the reconstruction is not clipped.
    """
    band = band.upper()
    if band not in BANDS:
        raise ValidationError(f"band must be one of {BANDS}, got {band!r}")
    if noise_amplitude < 0:
        raise ValidationError("noise amplitude must be non-negative")
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValidationError(f"dwt2 needs even height and width, got {h}x{w}")
    sub_shape = x.shape[:-2] + (h // 2, w // 2)
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-1.0, 1.0, size=sub_shape) * noise_amplitude
    # idwt2 is linear, so reconstruct only the perturbation; zero noise is then exact.
    parts = [np.zeros(sub_shape)] * 4
    parts[BANDS.index(band)] = noise
    recon = x + _merge(*parts)
    return recon, psnr_db(recon, x)
