"""Neural means and neural-mean discrepancy (NMD) vectors.

The neural mean of an image is the spatial average of every post-ReLU conv
channel, concatenated in layer order (8 + 16 = 24 values for the default
encoder). An expert's reference mean is the average of that vector over its
un-augmented training images.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .experts import Classifier, Expert


def channel_means(taps: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([t.mean(axis=(2, 3)) for t in taps], axis=1)


def neural_mean(expert: Classifier, images: np.ndarray, batch: int = 512) -> np.ndarray:
    """(N, p) neural means; accepts a single (H, W) image too."""
    single = images.ndim == 2
    if single:
        images = images[None]
    parts = [channel_means(expert.features_and_taps(images[i:i + batch])[1])
             for i in range(0, len(images), batch)]
    out = np.concatenate(parts)
    return out[0] if single else out


def reference_mean(expert: Expert, images: np.ndarray) -> np.ndarray:
    if len(images) == 0:
        raise DataError("reference mean needs a non-empty training set")
    expert.ref_mean = neural_mean(expert, images).mean(axis=0)
    return expert.ref_mean


def nmd_from_means(expert: Expert, means: np.ndarray) -> np.ndarray:
    if expert.ref_mean is None:
        raise DataError(f"expert {expert.expert_id} has no reference neural mean")
    return means - expert.ref_mean


def nmd_vector(expert: Expert, images: np.ndarray) -> np.ndarray:
    return nmd_from_means(expert, neural_mean(expert, images))
