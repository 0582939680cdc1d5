"""Staged training: per-branch pretraining with throwaway heads, then end-to-end SGD."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.preprocess import (CONTEXT_CROP, CONTEXT_RESIZE, FACE_SIZE, context_view, crop_offset,
                              face_view, load_image)
from .errors import ConfigError, InputError
from .layers import GlobalAvgPool, Linear, Sgd, cross_entropy
from .metrics import accuracy
from .model import GlamorNet
from .tensor import Precision, Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 16
    epochs_branch_pretrain: int = 2
    epochs_joint: int = 10
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        # lr == 0 is a frozen run: the optimizer is never stepped
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.epochs_branch_pretrain < 0 or self.epochs_joint < 0:
            raise ConfigError("epoch counts must be >= 0")
        try:
            Precision.of(self.precision)
        except ValueError:
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}") from None

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class PreparedSet:
    """In-memory network inputs for a list of records.

    Faces are stored final-size; contexts are stored at the pre-crop resize so
    each epoch can draw fresh train-mode crops.
    """

    def __init__(self, faces, contexts, labels, crop=CONTEXT_CROP):
        self.faces = faces
        self.contexts = contexts
        self.labels = np.asarray(labels, dtype=np.int64)
        self.crop = crop
        if not len(self.labels):
            raise InputError("dataset is empty")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_records(cls, records, mask=True, face_size=FACE_SIZE, context_resize=CONTEXT_RESIZE,
                     crop=CONTEXT_CROP, dtype=np.float32, threads=1):
        """Load and preprocess every record. ``threads`` > 1 reads files concurrently;
        the result does not depend on it since each record is prepared independently."""
        if not records:
            raise InputError("dataset is empty")

        def prep(r):
            img = load_image(r.image_path)
            return (face_view(img, r.face_bbox, face_size).astype(dtype),
                    context_view(img, r.face_bbox, mask, context_resize).astype(dtype))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                views = list(pool.map(prep, records))
        else:
            views = [prep(r) for r in records]
        faces, contexts = zip(*views)
        return cls(np.stack(faces), np.stack(contexts), [int(r.label) for r in records], crop)

    def batch_indices(self, batch_size, order):
        # never leave a single-sample batch behind (batch norm needs two)
        bounds = list(range(0, len(order), batch_size)) + [len(order)]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            del bounds[-2]
        return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def _contexts(self, idx, train, rng):
        full_hw = self.contexts.shape[-2:]
        out = np.empty((len(idx), 3, *self.crop), dtype=self.contexts.dtype)
        for j, i in enumerate(idx):
            top, left = crop_offset(full_hw, self.crop, train, rng.spawn(int(i)) if train else None)
            out[j] = self.contexts[i, :, top:top + self.crop[0], left:left + self.crop[1]]
        return out

    def batches(self, batch_size, train=False, rng: Rng | None = None):
        """Yield (face, context, labels, indices). Train mode shuffles and random-crops from ``rng``."""
        order = rng.permutation(len(self)) if train else np.arange(len(self))
        for idx in self.batch_indices(batch_size, order):
            yield self.faces[idx], self._contexts(idx, train, rng), self.labels[idx], idx


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def evaluate(net: GlamorNet, data: PreparedSet, batch_size=32):
    """Eval-mode loss, accuracy and predictions with center crops."""
    total, preds, fusion = 0.0, [], []
    for face, ctx, y, _ in data.batches(batch_size, train=False):
        out = net.forward(face, ctx, train=False)
        loss, _ = cross_entropy(out.logits.astype(np.float64), y)
        total += loss * len(y)
        preds.append(out.logits.argmax(axis=1))
        if out.fusion_weights is not None:
            fusion.append(out.fusion_weights)
    preds = np.concatenate(preds)
    result = {"loss": total / len(data), "accuracy": accuracy(preds, data.labels), "preds": preds}
    if fusion:
        w = np.concatenate(fusion)
        result["fusion_w_min"] = float(w.min())
        result["fusion_w_max"] = float(w.max())
    return result


def _emit(history, sink, record):
    history.append(record)
    log.info(json.dumps(record))
    if sink is not None:
        sink(record)


class _Branch:
    """Encoder + global average pool + disposable linear head."""

    def __init__(self, encoder, n_classes, rng, precision):
        self.encoder = encoder
        self.pool = GlobalAvgPool()
        self.head = Linear(encoder.out_channels, n_classes, rng, precision)

    def forward(self, x, train):
        return self.head.forward(self.pool.forward(self.encoder.forward(x, train)))

    def backward(self, g):
        self.encoder.backward(self.pool.backward(self.head.backward(g)))

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.head.named_parameters("head.")


def pretrain_branch(net: GlamorNet, branch, data: PreparedSet, config: TrainConfig, sink=None,
                    history=None):
    """Train one encoder alone through a temporary (features -> classes) linear head.

    The head is discarded afterwards; only the encoder's parameters change.
    """
    encoder = {"face": net.face_encoder, "context": net.context_encoder}.get(branch)
    if branch not in ("face", "context"):
        raise ConfigError(f"branch must be 'face' or 'context', got {branch!r}")
    if encoder is None:
        raise ConfigError(f"this model has no {branch} encoder")
    if len(data) == 0:
        raise InputError("dataset is empty")
    root = Rng(config.seed).spawn(100 if branch == "face" else 200)
    model = _Branch(encoder, net.config.n_classes, root.spawn(0), net.precision)
    opt = Sgd(config.learning_rate, config.momentum) if config.learning_rate > 0 else None
    history = [] if history is None else history
    for epoch in range(config.epochs_branch_pretrain):
        losses, correct = [], 0
        for face, ctx, y, _ in data.batches(config.batch_size, True, root.spawn(1, epoch)):
            x = face if branch == "face" else ctx
            logits = model.forward(x.astype(net.precision.dtype), True)
            loss, g = cross_entropy(logits, y)
            model.backward(g.astype(net.precision.dtype))
            if opt is not None:
                opt.step(model.named_parameters())
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == y).sum())
        _emit(history, sink, {"stage": f"pretrain_{branch}", "epoch": epoch + 1, "split": "train",
                              "loss": float(np.mean(losses)), "accuracy": correct / len(data)})
    return encoder


def train_joint(net: GlamorNet, data: PreparedSet, config: TrainConfig, sink=None, history=None,
                max_steps=None, step_sink=None):
    """End-to-end minibatch SGD on cross-entropy over every parameter.

    After each epoch the model is evaluated (eval mode, center crops) on the
    training set; that loss and accuracy are what the epoch record reports.
    """
    if len(data) == 0:
        raise InputError("dataset is empty")
    root = Rng(config.seed).spawn(300)
    opt = Sgd(config.learning_rate, config.momentum) if config.learning_rate > 0 else None
    result = TrainResult(history=[] if history is None else history)
    dtype = net.precision.dtype
    for epoch in range(config.epochs_joint):
        running = []
        for face, ctx, y, _ in data.batches(config.batch_size, True, root.spawn(epoch)):
            out = net.forward(face.astype(dtype), ctx.astype(dtype), train=True)
            loss, g = cross_entropy(out.logits, y)
            net.backward(g.astype(dtype))
            if opt is not None:
                opt.step(net.named_parameters())
            running.append(loss)
            result.step_losses.append(loss)
            if step_sink is not None:
                step_sink(loss)
            if max_steps is not None and len(result.step_losses) >= max_steps:
                return result
        ev = evaluate(net, data, config.batch_size)
        rec = {"stage": "joint", "epoch": epoch + 1, "split": "train", "loss": ev["loss"],
               "accuracy": ev["accuracy"], "train_loss": float(np.mean(running))}
        for k in ("fusion_w_min", "fusion_w_max"):
            if k in ev:
                rec[k] = ev[k]
        _emit(result.history, sink, rec)
    return result


def fit(net: GlamorNet, data: PreparedSet, config: TrainConfig, sink=None):
    """Pretrain each encoder the model owns, then train jointly."""
    history = []
    if config.epochs_branch_pretrain:
        if net.face_encoder is not None:
            pretrain_branch(net, "face", data, config, sink, history)
        if net.context_encoder is not None:
            pretrain_branch(net, "context", data, config, sink, history)
    return train_joint(net, data, config, sink, history)
