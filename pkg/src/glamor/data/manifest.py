"""Sample records and the JSON-lines manifest format.

One JSON object per line::

    {"image_path": "img/angry_000.ppm", "face_bbox": [x, y, w, h], "label": "angry",
     "video_id": "v0001", "timestamp_s": 3.2, "split": "train"}

``image_path`` is resolved relative to the manifest's directory when not
absolute. ``split`` may be null for unsplit corpora.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

from ..errors import FormatError, InputError


class EmotionLabel(enum.IntEnum):
    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    NEUTRAL = 4
    SAD = 5
    SURPRISE = 6

    @classmethod
    def parse(cls, value) -> "EmotionLabel":
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InputError(f"unknown emotion label {value!r}") from None


EMOTIONS = tuple(e.name.lower() for e in EmotionLabel)
SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    image_path: str
    face_bbox: tuple  # (x, y, w, h) in original pixel coordinates
    label: EmotionLabel
    video_id: str
    timestamp_s: float | None = 0.0
    split: str | None = None

    def __post_init__(self):
        self.face_bbox = tuple(int(v) for v in self.face_bbox)
        if len(self.face_bbox) != 4 or self.face_bbox[2] < 1 or self.face_bbox[3] < 1:
            raise InputError(f"face_bbox must be (x, y, w, h) with w, h >= 1, got {self.face_bbox}")
        self.label = EmotionLabel.parse(self.label)
        if self.split is not None and self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self):
        return {
            "image_path": self.image_path,
            "face_bbox": list(self.face_bbox),
            "label": self.label.name.lower(),
            "video_id": self.video_id,
            "timestamp_s": self.timestamp_s,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            image_path=obj["image_path"],
            face_bbox=obj["face_bbox"],
            label=obj["label"],
            video_id=str(obj["video_id"]),
            timestamp_s=obj.get("timestamp_s"),
            split=obj.get("split"),
        )


def read_manifest(path):
    """Load records; relative image paths are made absolute against the manifest directory."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = SampleRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from None
            if not os.path.isabs(rec.image_path):
                rec.image_path = os.path.join(root, rec.image_path)
            records.append(rec)
    return records


def write_manifest(path, records, relative_to=None):
    """Write records, storing image paths relative to ``relative_to`` (default: manifest dir)."""
    root = relative_to or os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = rec.to_json()
            if os.path.isabs(obj["image_path"]):
                obj["image_path"] = os.path.relpath(obj["image_path"], root)
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
