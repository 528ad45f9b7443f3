"""Toy networks: a U-Net-lite trigger generator and a small CNN classifier."""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from . import functional as F
from .errors import ShapeError
from .tensor import Tensor


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def _conv(self, name, c_out, c_in, k, rng, dtype, transpose=False):
        # conv_transpose2d weights are laid out (in, out, k, k)
        shape = (c_out, c_in, k, k) if not transpose else (c_in, c_out, k, k)
        fan_in = shape[1] * k * k
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = kaiming_uniform(shape, fan_in, rng, dtype)
        self._param(f"{name}.weight", w)
        self._param(f"{name}.bias", np.zeros(c_out, dtype=dtype))

    def _linear(self, name, d_out, d_in, rng, dtype):
        w = np.zeros((d_out, d_in), dtype=dtype) if rng is None else kaiming_uniform((d_out, d_in), d_in, rng, dtype)
        self._param(f"{name}.weight", w)
        self._param(f"{name}.bias", np.zeros(d_out, dtype=dtype))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ShapeError(f"missing tensor {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"tensor {name!r}: shape {arr.shape} does not match expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        extra = set(state) - set(self._params)
        if extra:
            raise ShapeError(f"unexpected tensors {sorted(extra)}")

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def config(self) -> dict:
        raise NotImplementedError


class GeneratorNet(Module):
    """U-Net-lite residual generator over an HH subband.

    conv(C->16, 3x3) + ReLU -> conv(16->32, 3x3, stride 2) + ReLU
    -> conv_transpose(32->16, 2x2, stride 2) + ReLU -> concat skip with the
    first activation -> conv(32->C, 3x3), linear output.
    """

    def __init__(self, channels: int = 3, width: int = 16, seed: Optional[int] = 0, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.width = width
        rng = None if seed is None else np.random.default_rng(seed)
        self._conv("enc", width, channels, 3, rng, dtype)
        self._conv("down", 2 * width, width, 3, rng, dtype)
        self._conv("up", width, 2 * width, 2, rng, dtype, transpose=True)
        self._conv("out", channels, 2 * width, 3, rng, dtype)

    @classmethod
    def zeros(cls, channels: int = 3, width: int = 16, dtype=np.float32) -> "GeneratorNet":
        return cls(channels, width, seed=None, dtype=dtype)

    def config(self) -> dict:
        return {"arch": "generator", "channels": self.channels, "width": self.width}

    def __call__(self, hh) -> Tensor:
        hh = hh if isinstance(hh, Tensor) else Tensor(hh)
        if hh.ndim != 4 or hh.shape[1] != self.channels:
            raise ShapeError(f"generator expects Nx{self.channels}xHxW input, got {hh.shape}")
        if hh.shape[2] % 2 or hh.shape[3] % 2:
            raise ShapeError(f"generator needs even spatial size, got {hh.shape[2:]}")
        p = self._params
        h1 = F.relu(F.conv2d(hh, p["enc.weight"], p["enc.bias"], 1, 1))
        h2 = F.relu(F.conv2d(h1, p["down.weight"], p["down.bias"], 2, 1))
        u = F.relu(F.conv_transpose2d(h2, p["up.weight"], p["up.bias"], 2, 0))
        return F.conv2d(F.concat_channels(u, h1), p["out.weight"], p["out.bias"], 1, 1)


class ClassifierNet(Module):
    """Four 3x3 conv layers (two with stride 2), then two fully connected layers.

    ``channel_mask`` multiplies the channels of the last conv activation and is
    how fine-pruning disables neurons without touching the weights.
    """

    def __init__(self, num_classes: int = 10, in_channels: int = 3, image_size: int = 32,
                 seed: Optional[int] = 0, dtype=np.float32):
        super().__init__()
        if image_size % 4:
            raise ShapeError(f"image size must be a multiple of 4, got {image_size}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_size = image_size
        rng = None if seed is None else np.random.default_rng(seed)
        self._conv("conv1", 32, in_channels, 3, rng, dtype)
        self._conv("conv2", 32, 32, 3, rng, dtype)
        self._conv("conv3", 64, 32, 3, rng, dtype)
        self._conv("conv4", 64, 64, 3, rng, dtype)
        flat = 64 * (image_size // 4) ** 2
        self._linear("fc1", 256, flat, rng, dtype)
        self._linear("fc2", num_classes, 256, rng, dtype)
        self.channel_mask = np.ones(64, dtype=dtype)

    @property
    def feature_dim(self) -> int:
        return 256

    @property
    def last_conv_channels(self) -> int:
        return 64

    def config(self) -> dict:
        return {"arch": "classifier", "num_classes": self.num_classes,
                "in_channels": self.in_channels, "image_size": self.image_size}

    def last_conv(self, x) -> Tensor:
        """Activation of the last conv layer (after ReLU and the channel mask)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        s = self.image_size
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, s, s):
            raise ShapeError(f"classifier expects Nx{self.in_channels}x{s}x{s} input, got {x.shape}")
        p = self._params
        h = F.relu(F.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1, 1))
        h = F.relu(F.conv2d(h, p["conv2.weight"], p["conv2.bias"], 2, 1))
        h = F.relu(F.conv2d(h, p["conv3.weight"], p["conv3.bias"], 1, 1))
        h = F.relu(F.conv2d(h, p["conv4.weight"], p["conv4.bias"], 2, 1))
        if not np.all(self.channel_mask == 1):
            h = h * self.channel_mask.reshape(1, -1, 1, 1)
        return h

    def head(self, activation: Tensor, return_features: bool = False):
        p = self._params
        feats = F.relu(F.linear(activation.flatten(), p["fc1.weight"], p["fc1.bias"]))
        logits = F.linear(feats, p["fc2.weight"], p["fc2.bias"])
        return (logits, feats) if return_features else logits

    def features(self, x) -> Tensor:
        """Penultimate-layer representation (input of the final linear layer)."""
        return self.head(self.last_conv(x), return_features=True)[1]

    def __call__(self, x) -> Tensor:
        return self.head(self.last_conv(x))
