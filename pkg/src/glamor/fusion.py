"""Adaptive two-branch fusion and the classification head."""

from __future__ import annotations

import enum

import numpy as np

from .errors import ConfigError, StateError
from .layers import Dropout, Layer, Linear, ReLU, Sequential
from .tensor import Precision, Rng, softmax


class FusionVariant(enum.Enum):
    NET = "net"  # learned per-branch weights, concatenation
    ADD = "add"  # elementwise sum
    MAX = "max"  # elementwise maximum


def score_net(dim, hidden, rng, precision):
    return Sequential(Linear(dim, hidden, rng, precision), ReLU(), Linear(hidden, 1, rng, precision))


def classifier(in_dim, hidden, n_classes, rng, precision, dropout=0.5, dropout_rng=None):
    """Linear -> ReLU -> Dropout -> Linear. Dropout sits right before the final layer."""
    return Sequential(Linear(in_dim, hidden, rng, precision), ReLU(),
                      Dropout(dropout, dropout_rng), Linear(hidden, n_classes, rng, precision))


def fusion_weights(s_f, s_c):
    """Two-way softmax of branch scores. Returns (w_f, w_c), each shaped like the scores."""
    w = softmax(np.stack([s_f, s_c], axis=-1), axis=-1)
    return w[..., 0], w[..., 1]


class Fusion(Layer):
    def __init__(self, variant=FusionVariant.NET, dim=256, hidden=128, n_classes=7,
                 rng: Rng | None = None, precision=Precision.F32, dropout=0.5,
                 dropout_rng: Rng | None = None):
        super().__init__()
        try:
            self.variant = FusionVariant(variant)
        except ValueError:
            raise ConfigError(f"unknown fusion variant {variant!r}") from None
        self.dim = dim
        self.face_score = self.context_score = None
        if self.variant is FusionVariant.NET:
            self.face_score = score_net(dim, hidden, rng, precision)
            self.context_score = score_net(dim, hidden, rng, precision)
            in_dim = 2 * dim
        else:
            in_dim = dim
        self.classifier = classifier(in_dim, hidden, n_classes, rng, precision, dropout, dropout_rng)
        self._cache = None
        self.last_weights = None

    def forward(self, v_f, v_c, train=False):
        if self.variant is FusionVariant.NET:
            s_f = self.face_score.forward(v_f, train)[:, 0]
            s_c = self.context_score.forward(v_c, train)[:, 0]
            w_f, w_c = fusion_weights(s_f, s_c)
            v = np.concatenate([w_f[:, None] * v_f, w_c[:, None] * v_c], axis=1)
            self._cache = (v_f, v_c, w_f, w_c)
            self.last_weights = np.stack([w_f, w_c], axis=1)
        elif self.variant is FusionVariant.ADD:
            v = v_f + v_c
            self._cache = ()
            self.last_weights = None
        else:
            # ties route to the face branch
            self._cache = (v_f >= v_c,)
            v = np.maximum(v_f, v_c)
            self.last_weights = None
        return self.classifier.forward(v, train)

    def backward(self, grad_logits):
        """Returns (grad wrt v_f, grad wrt v_c)."""
        if self._cache is None:
            raise StateError("fusion backward called before forward")
        g = self.classifier.backward(grad_logits)
        if self.variant is FusionVariant.ADD:
            return g, g.copy()
        if self.variant is FusionVariant.MAX:
            (face_wins,) = self._cache
            return np.where(face_wins, g, 0), np.where(face_wins, 0, g)
        v_f, v_c, w_f, w_c = self._cache
        g_f, g_c = g[:, :self.dim], g[:, self.dim:]
        dw_f = (g_f * v_f).sum(axis=1)
        dw_c = (g_c * v_c).sum(axis=1)
        # softmax Jacobian for two entries
        mean = w_f * dw_f + w_c * dw_c
        ds_f = w_f * (dw_f - mean)
        ds_c = w_c * (dw_c - mean)
        d_vf = w_f[:, None] * g_f + self.face_score.backward(ds_f[:, None])
        d_vc = w_c[:, None] * g_c + self.context_score.backward(ds_c[:, None])
        return d_vf, d_vc

    def _children(self):
        kids = []
        if self.face_score is not None:
            kids += [("face_score.", self.face_score), ("context_score.", self.context_score)]
        return kids + [("classifier.", self.classifier)]

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
