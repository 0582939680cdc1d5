"""Layer primitives with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates nothing across calls: ``backward`` overwrites ``grads``.
Parameters live in ``layer.params`` and their gradients under the same key in
``layer.grads``; non-trainable state (batch-norm running statistics) lives in
``layer.buffers``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, InputError, ShapeError, StateError
from .tensor import Precision, Rng, softmax


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v, self.grads.get(k)

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        self.zero_grads()
        return self

    def _require(self, attr):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return value


def _scaled_uniform(shape, fan_in, rng, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def _im2col3x3(x):
    """(N, C, H, W) -> (N, C*9, H*W) patch matrix for a same-padded 3x3 kernel."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im3x3(cols, shape):
    n, c, h, w = shape
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, :, di * 3 + dj]
    return xp[:, :, 1:-1, 1:-1]


class Conv2d(Layer):
    """3x3 convolution, stride 1, one pixel of zero padding (output keeps H, W)."""

    def __init__(self, in_ch, out_ch, rng: Rng | None = None, precision=Precision.F32):
        super().__init__()
        dtype = Precision.of(precision).dtype
        self.in_ch, self.out_ch = in_ch, out_ch
        shape = (out_ch, in_ch, 3, 3)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = _scaled_uniform(shape, in_ch * 9, rng, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_ch, dtype=dtype)}
        self.zero_grads()
        self._cols = None
        self._shape = None

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        self._cols = _im2col3x3(x)
        self._shape = x.shape
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = np.matmul(wmat, self._cols)
        out += self.params["bias"][None, :, None]
        return out.reshape(n, self.out_ch, h, w)

    def backward(self, grad_out):
        cols = self._require("_cols")
        n, _, h, w = self._shape
        if grad_out.shape != (n, self.out_ch, h, w):
            raise ShapeError(f"conv grad shape {grad_out.shape} != {(n, self.out_ch, h, w)}")
        g = grad_out.reshape(n, self.out_ch, h * w)
        dw = np.einsum("nok,nck->oc", g, cols, optimize=True)
        self.grads["weight"] = dw.reshape(self.params["weight"].shape)
        self.grads["bias"] = g.sum(axis=(0, 2))
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        dcols = np.matmul(wmat.T, g)
        return _col2im3x3(dcols, self._shape)


# ---------------------------------------------------------------------------
# normalization


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W).

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    with the biased batch variance.
    """

    def __init__(self, ch, eps=1e-5, momentum=0.9, precision=Precision.F32):
        super().__init__()
        dtype = Precision.of(precision).dtype
        self.eps, self.momentum = eps, momentum
        self.params = {"gamma": np.ones(ch, dtype=dtype), "beta": np.zeros(ch, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(ch, dtype=dtype),
                        "running_var": np.ones(ch, dtype=dtype)}
        self.zero_grads()
        self._xhat = None

    def forward(self, x, train=False):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not train:
            self._xhat = None
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            return gamma * (x - mean) / np.sqrt(var + self.eps) + beta
        if x.shape[0] < 2:
            raise StateError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        m = self.momentum
        self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
        self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        self._xhat, self._inv_std = xhat, inv_std
        return gamma * xhat + beta

    def backward(self, grad_out):
        xhat = self._require("_xhat")
        self.grads["gamma"] = (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * self.params["gamma"][None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * self._inv_std[None, :, None, None]


# ---------------------------------------------------------------------------
# pointwise and pooling


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_out):
        return grad_out * self._require("_mask")


def maxpool2x2_forward(x):
    """2x2 / stride-2 max pooling. Returns (pooled, winner index 0..3 within each window).

    Ties go to the first window cell in row-major order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(indices, grad_out):
    if indices.shape != grad_out.shape:
        raise ShapeError(f"pool grad shape {grad_out.shape} != {indices.shape}")
    n, c, h2, w2 = grad_out.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, indices[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h2 * 2, w2 * 2)


class MaxPool2x2(Layer):
    def forward(self, x, train=False):
        out, self._idx = maxpool2x2_forward(x)
        return out

    def backward(self, grad_out):
        return maxpool2x2_backward(self._require("_idx"), grad_out)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        n, c, h, w = self._require("_shape")
        g = grad_out / (h * w)
        return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).copy()


class Linear(Layer):
    """y = x W^T + b over the last axis; leading axes are batch axes."""

    def __init__(self, in_dim, out_dim, rng: Rng | None = None, precision=Precision.F32):
        super().__init__()
        dtype = Precision.of(precision).dtype
        self.in_dim, self.out_dim = in_dim, out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = _scaled_uniform((out_dim, in_dim), in_dim, rng, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_dim, dtype=dtype)}
        self.zero_grads()
        self._x = None

    def forward(self, x, train=False):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear expects last dim {self.in_dim}, got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        x = self._require("_x")
        x2 = x.reshape(-1, self.in_dim)
        g2 = grad_out.reshape(-1, self.out_dim)
        self.grads["weight"] = g2.T @ x2
        self.grads["bias"] = g2.sum(axis=0)
        return grad_out @ self.params["weight"]


class Dropout(Layer):
    """Inverted dropout: train mode keeps units with prob 1-p and scales them by 1/(1-p)."""

    def __init__(self, p=0.5, rng: Rng | None = None):
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else Rng(0)
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._mask = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * self._mask

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}{i}.")

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy. Returns (loss, d loss / d logits)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = float(-log_p.mean())
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


class Sgd:
    """SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, learning_rate=0.005, momentum=0.9):
        if not learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named):
        """Update in place. ``named`` yields (name, param, grad) triples."""
        for name, p, g in named:
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g
            self.velocity[name] = v.astype(p.dtype)
            p -= (self.learning_rate * v).astype(p.dtype)
