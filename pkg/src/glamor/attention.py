"""Global-local attention over context feature cells.

The pooled face vector is concatenated with every context cell, a small score
network (shared across cells) rates each pair, a spatial softmax turns the
scores into an attention map, and the context vector is the attention-weighted
sum of cells.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ShapeError, StateError
from .layers import Layer, Linear, ReLU
from .tensor import Precision, Rng, softmax


class AttentionVariant(enum.Enum):
    GLA = "gla"    # scores from [face vector; cell]
    CA = "ca"      # scores from the cell alone
    NONE = "none"  # uniform weights


def pool_face(face_map):
    """Global average pooling: (N, C, H, W) -> (N, C)."""
    return face_map.mean(axis=(2, 3))


def unfold_context(context_map):
    """(N, D, H, W) -> (N, H*W, D), cells enumerated row-major."""
    n, d, h, w = context_map.shape
    return context_map.transpose(0, 2, 3, 1).reshape(n, h * w, d)


def fold_context(cells, h, w):
    n, hw, d = cells.shape
    if hw != h * w:
        raise ShapeError(f"{hw} cells cannot fold into {h}x{w}")
    return cells.reshape(n, h, w, d).transpose(0, 3, 1, 2)


def attend(scores, cells):
    """Spatial softmax of ``scores`` (N, H*W) and the weighted cell sum.

    Returns (context vector (N, D), attention weights (N, H*W)).
    """
    a = softmax(scores, axis=1)
    return np.einsum("nk,nkd->nd", a, cells), a


class GlobalLocalAttention(Layer):
    def __init__(self, variant=AttentionVariant.GLA, face_dim=256, context_dim=256, hidden=128,
                 rng: Rng | None = None, precision=Precision.F32):
        super().__init__()
        self.variant = AttentionVariant(variant)
        self.face_dim, self.context_dim = face_dim, context_dim
        self.hidden = self.out = None
        if self.variant is not AttentionVariant.NONE:
            in_dim = context_dim + (face_dim if self.variant is AttentionVariant.GLA else 0)
            self.hidden = Linear(in_dim, hidden, rng, precision)
            self.relu = ReLU()
            self.out = Linear(hidden, 1, rng, precision)
        self._cells = None

    @property
    def needs_face(self):
        return self.variant is AttentionVariant.GLA

    def scores(self, v_f, cells):
        """Raw per-cell scores (N, H*W). The same network is applied at every cell."""
        n, hw, d = cells.shape
        if d != self.context_dim:
            raise ShapeError(f"context cells have dim {d}, expected {self.context_dim}")
        if self.variant is AttentionVariant.NONE:
            return np.zeros((n, hw), dtype=cells.dtype)
        if self.variant is AttentionVariant.GLA:
            if v_f is None or v_f.shape != (n, self.face_dim):
                raise ShapeError(f"face vector must be ({n}, {self.face_dim})")
            joint = np.concatenate([np.broadcast_to(v_f[:, None, :], (n, hw, self.face_dim)), cells],
                                   axis=2)
        else:
            joint = cells
        h = self.relu.forward(self.hidden.forward(joint))
        return self.out.forward(h)[..., 0]

    def forward(self, v_f, context_map, train=False):
        """Returns (context vector (N, D), attention map (N, H, W))."""
        n, d, h, w = context_map.shape
        cells = unfold_context(context_map)
        s = self.scores(v_f, cells)
        v_c, a = attend(s, cells)
        self._cells, self._a, self._hw = cells, a, (h, w)
        return v_c, a.reshape(n, h, w)

    def backward(self, grad_vc, grad_map=None):
        """Returns (grad wrt face vector or None, grad wrt context map)."""
        if self._cells is None:
            raise StateError("attention backward called before forward")
        cells, a = self._cells, self._a
        n, hw, d = cells.shape
        d_cells = a[:, :, None] * grad_vc[:, None, :]
        da = np.einsum("nkd,nd->nk", cells, grad_vc)
        if grad_map is not None:
            da = da + grad_map.reshape(n, hw)
        ds = a * (da - (a * da).sum(axis=1, keepdims=True))
        d_vf = None
        if self.variant is not AttentionVariant.NONE:
            d_joint = self.hidden.backward(self.relu.backward(self.out.backward(ds[..., None])))
            if self.variant is AttentionVariant.GLA:
                d_vf = d_joint[:, :, :self.face_dim].sum(axis=1)
                d_cells = d_cells + d_joint[:, :, self.face_dim:]
            else:
                d_cells = d_cells + d_joint
        return d_vf, fold_context(d_cells, *self._hw)

    def _children(self):
        if self.hidden is None:
            return []
        return [("hidden.", self.hidden), ("out.", self.out)]

    def named_parameters(self, prefix=""):
        for name, layer in self._children():
            yield from layer.named_parameters(prefix + name)

    def zero_grads(self):
        for _, layer in self._children():
            layer.zero_grads()

    def astype(self, dtype):
        for _, layer in self._children():
            layer.astype(dtype)
        return self
