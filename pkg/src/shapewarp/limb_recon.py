"""Limb reconstruction by masked-image modeling, and composition of I_com.

A small autoencoder sees a patch-masked source limb map together with a
layout and predicts a limb texture L_r plus a per-pixel gain L_w. The
composite keeps the warped garment first, reconstructed limbs second and the
occluded person everywhere else.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_synth import N_LAYOUT
from .warp_net import conv_act, with_coords

PATCH = 4
MASK_RATIO_RANGE = (0.20, 0.75)
HIST_BINS = 32
LUMA = np.array([0.299, 0.587, 0.114])


def limb_region(layout: np.ndarray) -> np.ndarray:
    """Binary (H, W) union of the two arm channels of a hard layout."""
    layout = np.asarray(layout)
    return ((layout[..., 4] + layout[..., 5]) > 0.5).astype(np.float32)


def target_limb_region(s_t: np.ndarray) -> np.ndarray:
    """Pixels whose argmax class in a (soft) layout is an arm."""
    lab = np.asarray(s_t).argmax(-1)
    return ((lab == 4) | (lab == 5)).astype(np.float32)


def extract_limb_map(person: np.ndarray, s_s: np.ndarray) -> np.ndarray:
    return (np.asarray(person) * limb_region(s_s)[..., None]).astype(np.float32)


def random_patch_mask(region: np.ndarray, seed: int, patch: int = PATCH,
                      ratio_range: tuple[float, float] = MASK_RATIO_RANGE) -> tuple[np.ndarray, float]:
    """Keep-mask (1 = kept) zeroing a uniformly drawn fraction of patches that touch ``region``."""
    rng = np.random.default_rng(seed)
    ratio = float(rng.uniform(*ratio_range))
    h, w = region.shape
    ph, pw = -(-h // patch), -(-w // patch)
    padded = np.zeros((ph * patch, pw * patch), dtype=bool)
    padded[:h, :w] = region > 0.5
    touched = np.flatnonzero(padded.reshape(ph, patch, pw, patch).any(axis=(1, 3)))
    n_drop = int(round(ratio * touched.size))
    drop = np.zeros(ph * pw, dtype=bool)
    drop[rng.permutation(touched)[:n_drop]] = True
    keep = np.repeat(np.repeat(~drop.reshape(ph, pw), patch, 0), patch, 1)[:h, :w]
    return keep.astype(np.float32), ratio


def random_mask(l_s: np.ndarray, seed: int, region: np.ndarray | None = None,
                patch: int = PATCH) -> tuple[np.ndarray, float]:
    """Zero a random 20-75% of the 4x4 patches intersecting the limb region (training only)."""
    l_s = np.asarray(l_s, dtype=np.float32)
    if region is None:
        region = (np.abs(l_s).sum(-1) > 0).astype(np.float32)
    keep, ratio = random_patch_mask(region, seed, patch)
    return l_s * keep[..., None], ratio


class LimbAutoencoder(nn.Module):
    """UNet-style autoencoder over (limb map, layout); heads for L_r (3 ch) and L_w (1 ch)."""

    def __init__(self, width: int = 32, seed: int = 0):
        super().__init__()
        self.config = {"width": width, "seed": seed}
        torch.manual_seed(seed)
        c1, c2, c3 = width // 2, width, 2 * width
        cin = 3 + N_LAYOUT + 2
        self.enc1 = nn.Sequential(conv_act(cin, c1), conv_act(c1, c1))
        self.enc2 = nn.Sequential(conv_act(c1, c2, stride=2), conv_act(c2, c2))
        self.enc3 = nn.Sequential(conv_act(c2, c3, stride=2), conv_act(c3, c3), conv_act(c3, c3))
        self.dec2 = nn.Sequential(conv_act(c3 + c2, c2), conv_act(c2, c2))
        self.dec1 = nn.Sequential(conv_act(c2 + c1, c1), conv_act(c1, c1))
        self.head_r = nn.Conv2d(c1, 3, 1)
        self.head_w = nn.Conv2d(c1, 1, 1)

    def forward(self, limb_in: torch.Tensor, layout: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e1 = self.enc1(with_coords(torch.cat([limb_in, layout], 1)))
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        return torch.sigmoid(self.head_r(d1)), torch.sigmoid(self.head_w(d1))


def limb_loss(l_r: torch.Tensor, l_w: torch.Tensor, l_s: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """L1 of both L_r and the gained L_w*L_r against L_s, averaged over limb pixels."""
    denom = region.sum().clamp_min(1.0) * 3
    err = (l_r - l_s).abs() + (l_w * l_r - l_s).abs()
    return (err * region).sum() / denom


def reconstruct(model: LimbAutoencoder, limb_in: np.ndarray, s_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(L_r (H, W, 3), L_w (H, W))`` for one limb map and layout."""
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(limb_in, dtype=np.float32).transpose(2, 0, 1)))[None]
    s = torch.from_numpy(np.ascontiguousarray(np.asarray(s_t, dtype=np.float32).transpose(2, 0, 1)))[None]
    with torch.no_grad():
        l_r, l_w = model(x, s)
    return l_r[0].permute(1, 2, 0).numpy(), l_w[0, 0].numpy()


def occlusion_mask(s_s: np.ndarray, m_w: np.ndarray) -> np.ndarray:
    """Union of source clothing, source limbs and the warped garment mask (the mask m)."""
    s_s = np.asarray(s_s)
    m_w = np.asarray(m_w)
    union = (s_s[..., 3] > 0.5) | (limb_region(s_s) > 0.5) | (m_w > 0.5)
    return union.astype(np.float32)


def occlude_person(person: np.ndarray, s_s: np.ndarray, m_w: np.ndarray) -> np.ndarray:
    return (np.asarray(person) * (1.0 - occlusion_mask(s_s, m_w))[..., None]).astype(np.float32)


def compose(i_occ, c_w, m_w, l_r, l_w, s_t) -> np.ndarray:
    """I_com with precedence garment > reconstructed limbs > occluded person."""
    m = np.asarray(m_w, dtype=np.float32)[..., None]
    lw = np.asarray(l_w, dtype=np.float32)
    if lw.ndim == 2:
        lw = lw[..., None]
    limb = target_limb_region(s_t)[..., None]
    rest = limb * (lw * np.asarray(l_r)) + (1.0 - limb) * np.asarray(i_occ)
    return (np.asarray(c_w) * m + (1.0 - m) * rest).astype(np.float32)


def luminance_histogram(image: np.ndarray, region: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Normalized luminance histogram of ``image`` inside ``region`` (zeros if the region is empty)."""
    lum = np.asarray(image, dtype=np.float64) @ LUMA
    vals = lum[np.asarray(region) > 0.5]
    hist, _ = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    return hist / total if total else hist.astype(np.float64)


def histogram_distance(a: np.ndarray, b: np.ndarray, region: np.ndarray, bins: int = HIST_BINS) -> float:
    return float(np.abs(luminance_histogram(a, region, bins) - luminance_histogram(b, region, bins)).sum())
