"""Image preprocessing: face masking, bilinear resizing, face and context crops.

Face: crop the bounding box from the original frame and resize to 96x96.
Context: zero the face box in the original frame, resize to 128 (height) x 171
(width), then crop 112x112 (random offset when training, centered otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..tensor import Rng
from .ppm import read_pnm

FACE_SIZE = (96, 96)
CONTEXT_RESIZE = (128, 171)
CONTEXT_CROP = (112, 112)


def load_image(path) -> np.ndarray:
    """Read a P6 file as float64 (3, H, W) in [0, 1]."""
    img = read_pnm(path)
    if img.shape[0] != 3:
        raise InputError(f"{path}: expected an RGB (P6) image")
    return img.astype(np.float64) / 255.0


def check_bbox(bbox, height, width):
    x, y, w, h = bbox
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise InputError(f"bbox {tuple(bbox)} outside image of size {height}x{width}")


def mask_face(image, bbox):
    """Copy of ``image`` (C, H, W) with the (x, y, w, h) rectangle set to zero."""
    x, y, w, h = bbox
    check_bbox(bbox, *image.shape[-2:])
    out = image.copy()
    out[..., y:y + h, x:x + w] = 0
    return out


def _axis_weights(n_in, n_out):
    """Source indices and weights for half-pixel-center linear interpolation on one axis."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of a (..., H, W) array.

    Pixel centers sit at half-integer positions (the source coordinate of
    output pixel ``d`` is ``(d + 0.5) * in / out - 0.5``); samples beyond the
    border clamp to the edge pixel.
    """
    image = np.asarray(image)
    in_h, in_w = image.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise InputError(f"output size must be positive, got {out_h}x{out_w}")
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    r0, r1, fr = _axis_weights(in_h, out_h)
    c0, c1, fc = _axis_weights(in_w, out_w)
    rows = image[..., r0, :] * (1 - fr)[:, None] + image[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def zero_support(box_lo, box_len, n_in, n_out):
    """Output indices whose interpolation support lies inside ``[box_lo, box_lo + box_len)``.

    After masking then resizing, exactly these rows (or columns) are guaranteed
    to be zero; neighbours partly outside the box blend in unmasked values.
    """
    lo, hi, frac = _axis_weights(n_in, n_out)
    inside_lo = (lo >= box_lo) & (lo < box_lo + box_len)
    inside_hi = (hi >= box_lo) & (hi < box_lo + box_len)
    # frac < 1 always, so the low neighbour always carries weight
    return np.flatnonzero(inside_lo & (inside_hi | (frac == 0)))


@dataclass
class PreparedSample:
    face: np.ndarray           # (3, 96, 96)
    context: np.ndarray        # (3, 112, 112)
    label: int
    crop_offset: tuple         # (top, left) of the crop inside the resized context
    masked_rows: np.ndarray    # crop-window rows guaranteed zero (empty when unmasked)
    masked_cols: np.ndarray


def face_view(image, bbox, size=FACE_SIZE):
    x, y, w, h = bbox
    check_bbox(bbox, *image.shape[-2:])
    return resize_bilinear(image[:, y:y + h, x:x + w], *size)


def context_view(image, bbox, mask=True, size=CONTEXT_RESIZE):
    """Masked (optionally) and resized context, before cropping."""
    check_bbox(bbox, *image.shape[-2:])
    src = mask_face(image, bbox) if mask else image
    return resize_bilinear(src, *size)


def crop_offset(full_hw, crop_hw, train, rng: Rng | None):
    dh, dw = full_hw[0] - crop_hw[0], full_hw[1] - crop_hw[1]
    if dh < 0 or dw < 0:
        raise InputError(f"crop {crop_hw} larger than image {full_hw}")
    if train:
        if rng is None:
            raise InputError("random crops need an rng")
        return rng.integers(dh + 1), rng.integers(dw + 1)
    return dh // 2, dw // 2


def prepare_sample(record, mode="eval", rng: Rng | None = None, mask=True,
                   face_size=FACE_SIZE, context_resize=CONTEXT_RESIZE,
                   context_crop=CONTEXT_CROP, image=None) -> PreparedSample:
    """Build the face and context network inputs for one record.

    ``mode="train"`` draws the context crop offset from ``rng``; ``"eval"`` crops
    the center. ``image`` may be passed to skip reading ``record.image_path``.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if image is None:
        image = load_image(record.image_path)
    bbox = record.face_bbox
    face = face_view(image, bbox, face_size)
    full = context_view(image, bbox, mask, context_resize)
    top, left = crop_offset(context_resize, context_crop, mode == "train", rng)
    context = full[:, top:top + context_crop[0], left:left + context_crop[1]]

    rows = cols = np.empty(0, dtype=np.int64)
    if mask:
        h_in, w_in = image.shape[-2:]
        x, y, w, h = bbox
        rows = zero_support(y, h, h_in, context_resize[0]) - top
        cols = zero_support(x, w, w_in, context_resize[1]) - left
        rows = rows[(rows >= 0) & (rows < context_crop[0])]
        cols = cols[(cols >= 0) & (cols < context_crop[1])]
    return PreparedSample(face, np.ascontiguousarray(context), int(record.label), (top, left),
                          rows, cols)
