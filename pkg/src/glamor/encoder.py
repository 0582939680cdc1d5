"""Five-stage convolutional feature extractor shared by the face and context branches."""

from __future__ import annotations

from typing import Iterator, Protocol

import numpy as np

from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, Layer, MaxPool2x2, ReLU
from .tensor import Precision, Rng

DEFAULT_CHANNELS = (32, 64, 128, 256, 256)


class EncoderInterface(Protocol):
    """What the model needs from a backbone. Any conforming object can replace ``Encoder``."""

    out_channels: int
    reduction: int

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray: ...

    def backward(self, grad_out: np.ndarray) -> np.ndarray: ...

    def named_parameters(self, prefix: str = "") -> Iterator: ...

    def named_buffers(self, prefix: str = "") -> Iterator: ...


class Encoder(Layer):
    """conv3x3 -> batch norm -> ReLU per stage, with 2x2 max pooling after every stage but the last.

    With the default channels a (N, 3, H, W) image becomes a (N, 256, H/16, W/16) map.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, in_ch=3, rng: Rng | None = None,
                 precision=Precision.F32):
        super().__init__()
        self.channels = tuple(channels)
        self.out_channels = self.channels[-1]
        self.reduction = 2 ** (len(self.channels) - 1)
        self.stages = []
        prev = in_ch
        for i, ch in enumerate(self.channels):
            pool = MaxPool2x2() if i < len(self.channels) - 1 else None
            self.stages.append((Conv2d(prev, ch, rng, precision), BatchNorm2d(ch, precision=precision),
                                ReLU(), pool))
            prev = ch

    def _layers(self):
        for conv, bn, relu, pool in self.stages:
            yield conv
            yield bn
            yield relu
            if pool is not None:
                yield pool

    def forward(self, x, train=False):
        h, w = x.shape[-2:]
        if h % self.reduction or w % self.reduction:
            raise ShapeError(f"encoder input {h}x{w} must be divisible by {self.reduction}")
        for layer in self._layers():
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(list(self._layers())):
            grad_out = layer.backward(grad_out)
        return grad_out

    def named_parameters(self, prefix=""):
        for i, (conv, bn, _, _) in enumerate(self.stages):
            yield from conv.named_parameters(f"{prefix}stage{i}.conv.")
            yield from bn.named_parameters(f"{prefix}stage{i}.bn.")

    def named_buffers(self, prefix=""):
        for i, (_, bn, _, _) in enumerate(self.stages):
            yield from bn.named_buffers(f"{prefix}stage{i}.bn.")

    def zero_grads(self):
        for layer in self._layers():
            layer.zero_grads()

    def astype(self, dtype):
        for layer in self._layers():
            layer.astype(dtype)
        return self
