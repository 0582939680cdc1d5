"""Manifest-driven image data: codecs, preprocessing, synthetic corpora, splitting."""

from .manifest import EMOTIONS, EmotionLabel, SampleRecord, read_manifest, write_manifest
from .ppm import read_pnm, write_pgm, write_ppm
from .preprocess import (CONTEXT_CROP, CONTEXT_RESIZE, FACE_SIZE, PreparedSample, load_image,
                         mask_face, prepare_sample, resize_bilinear)
from .split import ncaer_split
from .synthetic import generate_synthetic_dataset

__all__ = [
    "EMOTIONS", "EmotionLabel", "SampleRecord", "read_manifest", "write_manifest",
    "read_pnm", "write_pgm", "write_ppm",
    "CONTEXT_CROP", "CONTEXT_RESIZE", "FACE_SIZE", "PreparedSample", "load_image", "mask_face",
    "prepare_sample", "resize_bilinear",
    "ncaer_split", "generate_synthetic_dataset",
]
