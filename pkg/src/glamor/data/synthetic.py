"""Desk-scale synthetic corpus in which both the face patch and the scene carry the label.

Each class owns a face texture (stripe orientation and frequency, tint) and a
scene signature (colored blobs on a shaded background). Positions, sizes and
pixel noise are drawn per image, so the classes are learnable but not
pixel-identical.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import InputError
from ..tensor import Rng
from .manifest import EmotionLabel, SampleRecord, write_manifest
from .ppm import write_ppm

# (stripe angle in degrees, stripe period in px); index = class
_FACE_TEXTURE = [(0, 6), (90, 6), (45, 8), (135, 8), (0, 14), (90, 14), (None, 10)]
_FACE_TINT = np.array([
    [0.95, 0.35, 0.30], [0.45, 0.75, 0.30], [0.60, 0.40, 0.85], [0.98, 0.85, 0.30],
    [0.70, 0.70, 0.70], [0.30, 0.45, 0.90], [0.95, 0.55, 0.85],
])
_SCENE_COLOR = np.array([
    [0.85, 0.10, 0.10], [0.20, 0.65, 0.15], [0.35, 0.10, 0.55], [0.95, 0.80, 0.10],
    [0.50, 0.50, 0.50], [0.10, 0.25, 0.75], [0.90, 0.40, 0.70],
])


def _face_patch(k, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle, period = _FACE_TEXTURE[k]
    phase = rng.uniform(0, 2 * np.pi)
    if angle is None:
        r = np.hypot(yy - h / 2, xx - w / 2)
        wave = np.cos(2 * np.pi * r / period + phase)
    else:
        t = np.deg2rad(angle)
        wave = np.cos(2 * np.pi * (xx * np.cos(t) + yy * np.sin(t)) / period + phase)
    base = 0.5 + 0.4 * wave
    return _FACE_TINT[k][:, None, None] * base[None]


def _scene(k, height, width, rng):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    shade = 0.35 + 0.25 * (yy / height) * rng.uniform(0.5, 1.0)
    img = np.repeat(shade[None], 3, axis=0)
    for _ in range(4):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        rad = rng.uniform(0.12, 0.22) * min(height, width)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
        img = img * (1 - blob) + _SCENE_COLOR[k][:, None, None] * blob
    return img


def render_sample(k, height, width, rng: Rng):
    """One synthetic frame of class ``k``. Returns (image (3, H, W) in [0, 1], bbox)."""
    img = _scene(k, height, width, rng)
    side = int(min(height, width) * rng.uniform(0.28, 0.38))
    x = rng.integers(width - side + 1)
    y = rng.integers(height - side + 1)
    img[:, y:y + side, x:x + side] = _face_patch(k, side, side, rng)
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1), (x, y, side, side)


def generate_synthetic_dataset(n_per_class, out_dir, seed=0, image_dims=(144, 192), n_classes=7,
                               manifest_name="manifest.jsonl"):
    """Write ``n_per_class`` PPM frames per class plus a JSON-lines manifest.

    Returns (manifest path, list of records). Every frame is its own video with
    timestamp 0. Output is byte-identical for a given seed.
    """
    if n_per_class < 1:
        raise InputError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 2 <= n_classes <= len(EmotionLabel):
        raise InputError(f"n_classes must be in [2, {len(EmotionLabel)}]")
    height, width = image_dims
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    root = Rng(seed)
    records = []
    for k in range(n_classes):
        name = EmotionLabel(k).name.lower()
        for i in range(n_per_class):
            img, bbox = render_sample(k, height, width, root.spawn(k, i))
            rel = os.path.join("images", f"{name}_{i:04d}.ppm")
            write_ppm(os.path.join(out_dir, rel), img)
            records.append(SampleRecord(os.path.abspath(os.path.join(out_dir, rel)), bbox, k,
                                        f"synth-{name}-{i:04d}", 0.0, None))
    path = os.path.join(out_dir, manifest_name)
    write_manifest(path, records, relative_to=out_dir)
    return path, records
