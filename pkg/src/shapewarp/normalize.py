"""Colour normalization of garments.

Each channel's in-mask mean is subtracted inside the garment, the mask is
added back and the result is clamped to [0, 1]. Raw colour is discarded while
intensity differences between garment pixels (stripes, logos, shading) survive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NormalizedClothing:
    values: np.ndarray  # (H, W, 3), zero outside the mask
    source_means: np.ndarray  # (3,)


def _binary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    return (m > 0.5).astype(np.float64)


def channel_mean(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel mean of ``image`` over the pixels where ``mask`` is set."""
    img = np.asarray(image, dtype=np.float64)
    m = _binary(mask)
    area = m.sum()
    if area == 0:
        raise ValueError("mask is empty; channel mean is undefined")
    if img.ndim == 2:
        return np.array([(img * m).sum() / area])
    return (img * m[..., None]).sum(axis=(0, 1)) / area


def color_normalize(image: np.ndarray, mask: np.ndarray) -> NormalizedClothing:
    img = np.asarray(image, dtype=np.float64)
    m = _binary(mask)
    xi = channel_mean(img, m)
    mb = m if img.ndim == 2 else m[..., None]
    centred = (img - xi) * mb
    values = np.clip(centred + mb, 0.0, 1.0)
    out_dtype = np.float32 if np.asarray(image).dtype == np.float32 else np.float64
    return NormalizedClothing(values.astype(out_dtype), xi)


def normalize_gt(c_gt: np.ndarray, m_gt: np.ndarray) -> NormalizedClothing:
    """Normalization target for the shape decoder; same rule applied to warped ground truth."""
    return color_normalize(c_gt, m_gt)
