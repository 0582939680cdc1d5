"""Full network: encode face and context, attend over context, fuse, classify."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionVariant, GlobalLocalAttention
from .encoder import DEFAULT_CHANNELS, Encoder
from .errors import ConfigError, ShapeError
from .fusion import Fusion, FusionVariant, classifier
from .layers import GlobalAvgPool
from .tensor import Precision, Rng


class Ablation(enum.Enum):
    """Which branches feed the classifier.

    FULL uses face plus face-masked context; FACE uses the face branch only;
    MASKED_CONTEXT / VISIBLE_CONTEXT use only the context branch, with the face
    region zeroed or left visible in the context image.
    """

    FULL = "full"
    FACE = "wF"
    MASKED_CONTEXT = "wmC"
    VISIBLE_CONTEXT = "wfC"

    @property
    def uses_face(self):
        return self in (Ablation.FULL, Ablation.FACE)

    @property
    def uses_context(self):
        return self is not Ablation.FACE

    @property
    def masks_context(self):
        return self is not Ablation.VISIBLE_CONTEXT


def _enum(cls, value, what):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"unknown {what} {value!r} (choose from {choices})") from None


@dataclass
class ModelConfig:
    channels: tuple = DEFAULT_CHANNELS
    hidden: int = 128
    n_classes: int = 7
    attention: AttentionVariant = AttentionVariant.GLA
    fusion: FusionVariant = FusionVariant.NET
    ablation: Ablation = Ablation.FULL
    dropout: float = 0.5
    face_size: tuple = (96, 96)
    context_size: tuple = (112, 112)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.face_size = tuple(self.face_size)
        self.context_size = tuple(self.context_size)
        self.attention = _enum(AttentionVariant, self.attention, "attention variant")
        self.fusion = _enum(FusionVariant, self.fusion, "fusion variant")
        self.ablation = _enum(Ablation, self.ablation, "ablation setting")
        if self.n_classes < 2 or self.hidden < 1 or not self.channels:
            raise ConfigError("n_classes >= 2, hidden >= 1 and at least one stage are required")

    @property
    def feature_dim(self):
        return self.channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["face_size"] = list(self.face_size)
        d["context_size"] = list(self.context_size)
        for k in ("attention", "fusion", "ablation"):
            d[k] = getattr(self, k).value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Forward:
    logits: np.ndarray
    attention: np.ndarray | None = None       # (N, H_c, W_c)
    fusion_weights: np.ndarray | None = None  # (N, 2) columns (w_f, w_c)
    extras: dict = field(default_factory=dict)


class GlamorNet:
    """Two-branch emotion classifier with global-local context attention.

    Components that a configuration does not use are not built, so they own no
    parameters (e.g. ``fusion="add"`` has no fusion score networks).
    """

    def __init__(self, config: ModelConfig | None = None, seed=0, precision=Precision.F32):
        self.config = config = config or ModelConfig()
        self.precision = Precision.of(precision)
        root = Rng(seed)
        dim = config.feature_dim
        needs_face_encoder = config.ablation.uses_face or (
            config.ablation.uses_context and config.attention is AttentionVariant.GLA)

        self.face_encoder = Encoder(config.channels, rng=root.spawn(1), precision=self.precision) \
            if needs_face_encoder else None
        self.context_encoder = Encoder(config.channels, rng=root.spawn(2), precision=self.precision) \
            if config.ablation.uses_context else None
        self.face_pool = GlobalAvgPool()
        self.attention = GlobalLocalAttention(config.attention, dim, dim, config.hidden,
                                              rng=root.spawn(3), precision=self.precision) \
            if config.ablation.uses_context else None
        dropout_rng = root.spawn(5)
        if config.ablation is Ablation.FULL:
            self.fusion = Fusion(config.fusion, dim, config.hidden, config.n_classes, rng=root.spawn(4),
                                 precision=self.precision, dropout=config.dropout,
                                 dropout_rng=dropout_rng)
            self.head = None
        else:
            self.fusion = None
            self.head = classifier(dim, config.hidden, config.n_classes, root.spawn(4), self.precision,
                                   config.dropout, dropout_rng)

    # -- structure -------------------------------------------------------

    def components(self):
        parts = [("face_encoder.", self.face_encoder), ("context_encoder.", self.context_encoder),
                 ("attention.", self.attention), ("fusion.", self.fusion), ("head.", self.head)]
        return [(name, part) for name, part in parts if part is not None]

    def named_parameters(self):
        for prefix, part in self.components():
            yield from part.named_parameters(prefix)

    def named_buffers(self):
        for prefix, part in self.components():
            if hasattr(part, "named_buffers"):
                yield from part.named_buffers(prefix)

    def state_dict(self):
        """Parameters and buffers by name. Values are the live arrays."""
        state = {name: p for name, p, _ in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in expected.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def zero_grads(self):
        for _, part in self.components():
            part.zero_grads()

    def astype(self, precision):
        self.precision = Precision.of(precision)
        for _, part in self.components():
            part.astype(self.precision.dtype)
        return self

    # -- passes ----------------------------------------------------------

    def _check_inputs(self, face, context):
        cfg = self.config
        if face is not None and face.shape[1:] != (3, *cfg.face_size):
            raise ShapeError(f"face batch must be (N, 3, {cfg.face_size[0]}, {cfg.face_size[1]}), "
                             f"got {face.shape}")
        if context is not None and context.shape[1:] != (3, *cfg.context_size):
            raise ShapeError(f"context batch must be (N, 3, {cfg.context_size[0]}, "
                             f"{cfg.context_size[1]}), got {context.shape}")

    def forward(self, face, context, train=False) -> Forward:
        """Logits plus the attention map and fusion weights when those stages exist.

        Context images must already be face-masked when the ablation calls for it.
        """
        cfg = self.config
        dtype = self.precision.dtype
        face = None if face is None else np.asarray(face, dtype=dtype)
        context = None if context is None else np.asarray(context, dtype=dtype)
        self._check_inputs(face, context if cfg.ablation.uses_context else None)

        v_f = attn = None
        if self.face_encoder is not None:
            v_f = self.face_pool.forward(self.face_encoder.forward(face, train))
        if cfg.ablation is Ablation.FACE:
            return Forward(self.head.forward(v_f, train))

        context_map = self.context_encoder.forward(context, train)
        v_c, attn = self.attention.forward(v_f, context_map, train)
        if cfg.ablation is Ablation.FULL:
            logits = self.fusion.forward(v_f, v_c, train)
            return Forward(logits, attn, self.fusion.last_weights)
        return Forward(self.head.forward(v_c, train), attn)

    def backward(self, grad_logits):
        """Backpropagate d loss / d logits; fills every parameter gradient.

        Returns (grad wrt face input or None, grad wrt context input or None).
        """
        cfg = self.config
        d_vf = d_vc = None
        if cfg.ablation is Ablation.FULL:
            d_vf, d_vc = self.fusion.backward(grad_logits)
        elif cfg.ablation is Ablation.FACE:
            d_vf = self.head.backward(grad_logits)
        else:
            d_vc = self.head.backward(grad_logits)

        d_context = None
        if d_vc is not None:
            d_vf_attn, d_map = self.attention.backward(d_vc)
            if d_vf_attn is not None:
                d_vf = d_vf_attn if d_vf is None else d_vf + d_vf_attn
            d_context = self.context_encoder.backward(d_map)

        d_face = None
        if self.face_encoder is not None:
            if d_vf is None:
                d_vf = np.zeros((grad_logits.shape[0], cfg.feature_dim), dtype=grad_logits.dtype)
            d_face = self.face_encoder.backward(self.face_pool.backward(d_vf))
        return d_face, d_context

    def predict(self, face, context):
        return self.forward(face, context, train=False).logits.argmax(axis=1)
