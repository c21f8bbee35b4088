"""Image-quality metrics: SSIM, PSNR and a Fréchet distance over toy features."""
from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .losses import FeatureExtractor, default_extractor

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
MIN_FID_SET = 16


def _ssim_channel(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = uniform_filter(a, SSIM_WINDOW)
    mu_b = uniform_filter(b, SSIM_WINDOW)
    var_a = uniform_filter(a * a, SSIM_WINDOW) - mu_a * mu_a
    var_b = uniform_filter(b * b, SSIM_WINDOW) - mu_b * mu_b
    cov = uniform_filter(a * b, SSIM_WINDOW) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    pad = (SSIM_WINDOW - 1) // 2
    return float((num / den)[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over 7x7 uniform windows, averaged across channels.

    Border pixels whose window would leave the image are excluded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_channel(a, b, data_range)
    return float(np.mean([_ssim_channel(a[..., k], b[..., k], data_range) for k in range(a.shape[-1])]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two (N, D) feature sets."""
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def toy_features(images: np.ndarray, phi: FeatureExtractor | None = None, batch: int = 64) -> np.ndarray:
    phi = phi or default_extractor()
    imgs = np.asarray(images, dtype=np.float32)
    out = []
    with torch.no_grad():
        for k in range(0, len(imgs), batch):
            x = torch.from_numpy(np.ascontiguousarray(imgs[k:k + batch].transpose(0, 3, 1, 2)))
            out.append(phi.pooled(x).double().numpy())
    return np.concatenate(out)


def toy_fid(set_a: np.ndarray, set_b: np.ndarray, phi: FeatureExtractor | None = None) -> float:
    """Fréchet distance between pooled last-stage toy features of two image sets (N, H, W, 3)."""
    if len(set_a) < MIN_FID_SET or len(set_b) < MIN_FID_SET:
        raise ValueError(f"toy FID needs at least {MIN_FID_SET} images per set")
    return frechet_distance(toy_features(set_a, phi), toy_features(set_b, phi))
