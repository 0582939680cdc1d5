"""Leak-free frame sampling from video-derived records.

Each video is cut into fixed-length segments by timestamp and one frame is
drawn uniformly from every non-empty segment. Every video lands in exactly one
split: a video that contributes any training frame is never used for
validation or testing. Classes are then downsampled per split toward equal
counts.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import replace

import numpy as np

from ..errors import InputError
from ..tensor import Rng
from .manifest import SPLITS

DEFAULT_RATIOS = (0.7, 0.1, 0.2)


def segment_index(timestamp, segment_seconds):
    return int(math.floor(timestamp / segment_seconds))


def _video_split(records, video_ids, rng, ratios):
    """Split per video. Original splits are kept, with train > val > test precedence."""
    assigned = {}
    unassigned = []
    for vid in video_ids:
        given = {r.split for r in records[vid] if r.split is not None}
        if given:
            assigned[vid] = min(given, key=SPLITS.index)
        else:
            unassigned.append(vid)
    if unassigned:
        order = [unassigned[i] for i in rng.permutation(len(unassigned))]
        total = sum(ratios)
        n_train = int(round(len(order) * ratios[0] / total))
        n_val = int(round(len(order) * ratios[1] / total))
        for i, vid in enumerate(order):
            assigned[vid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return assigned


def balance_classes(records, rng, tolerance=0.1):
    """Downsample so every class count is at most ``floor(min_count * (1 + tolerance))``.

    Classes absent from ``records`` are ignored.
    """
    by_class = defaultdict(list)
    for r in records:
        by_class[int(r.label)].append(r)
    if not by_class:
        return []
    cap = int(math.floor(min(len(v) for v in by_class.values()) * (1 + tolerance)))
    keep = []
    for label in sorted(by_class):
        items = by_class[label]
        if len(items) > cap:
            idx = np.sort(rng.permutation(len(items))[:cap])
            items = [items[i] for i in idx]
        keep.extend(items)
    return keep


def ncaer_split(records, rng: Rng, segment_seconds=2.0, balance_tol=0.1, ratios=DEFAULT_RATIOS,
                balance=True):
    """Sample one frame per segment per video and assign leak-free splits.

    Records that already carry a split keep it (a video seen in training is
    moved out of val/test); videos without one are assigned at random by
    ``ratios`` (train, val, test). Returns new records with ``split`` set,
    ordered by split then video then timestamp.
    """
    if segment_seconds <= 0:
        raise InputError("segment length must be positive")
    if not records:
        raise InputError("no records to split")
    videos = defaultdict(list)
    for r in records:
        if r.timestamp_s is None or not math.isfinite(r.timestamp_s) or r.timestamp_s < 0:
            raise InputError(f"record {r.image_path} has a missing or invalid timestamp")
        videos[r.video_id].append(r)
    video_ids = sorted(videos)
    splits = _video_split(videos, video_ids, rng, ratios)

    chosen = {s: [] for s in SPLITS}
    for vid in video_ids:
        frames = sorted(videos[vid], key=lambda r: (r.timestamp_s, r.image_path))
        segments = defaultdict(list)
        for r in frames:
            segments[segment_index(r.timestamp_s, segment_seconds)].append(r)
        for seg in sorted(segments):
            pick = rng.choice(segments[seg])
            chosen[splits[vid]].append(replace(pick, split=splits[vid]))

    out = []
    for s in SPLITS:
        items = balance_classes(chosen[s], rng, balance_tol) if balance else chosen[s]
        out.extend(sorted(items, key=lambda r: (r.video_id, r.timestamp_s)))
    return out


def split_table(records, n_classes=7):
    """Per-class counts for each split: {split: [count per class]}."""
    table = {s: [0] * n_classes for s in SPLITS}
    for r in records:
        table[r.split or "train"][int(r.label)] += 1
    return table
