"""Target-layout estimation.

The source layout has its clothing and limb channels replaced by the warped
garment mask and a limb-skeleton raster (clothing wins where they overlap),
and a small UNet turns the result into a soft 7-channel target layout.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_synth import LIMB_KEYPOINTS, N_LAYOUT, disc, thick_segment
from .warp_net import conv_act, with_coords

LIMB_STROKE_RADIUS = 2.0
HAND_RADIUS = 3.5
LAYOUT_WEIGHTS = (1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 1.0)
CE_CLAMP = 1e-12
CLOTHING, LEFT_ARM, RIGHT_ARM, BACKGROUND = 3, 4, 5, 6


def extract_limb_skeleton(shape: tuple[int, int], keypoints: dict, radius: float = LIMB_STROKE_RADIUS) -> np.ndarray:
    """Rasterize shoulder-elbow and elbow-wrist strokes per side.

    Returns a binary (H, W, 2) float32 array: channel 0 for the person's left
    arm, channel 1 for the right, following the keypoint side labels.
    """
    missing = [k for k in LIMB_KEYPOINTS if k not in keypoints]
    if missing:
        raise ValueError(f"missing limb keypoints: {missing}")
    h, w = shape[:2]
    out = np.zeros((h, w, 2), dtype=np.float32)
    for ch, side in enumerate(("left", "right")):
        sh, el, wr = (keypoints[f"{side}_{j}"] for j in ("shoulder", "elbow", "wrist"))
        stroke = thick_segment(h, w, sh, el, radius) | thick_segment(h, w, el, wr, radius)
        out[..., ch] = stroke
    return out


def _require_binary(name: str, arr: np.ndarray) -> None:
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")


def hand_regions(s_s: np.ndarray, keypoints: dict | None, radius: float = HAND_RADIUS) -> np.ndarray:
    """Source limb pixels within a disc around each wrist, shape (H, W, 2)."""
    h, w = s_s.shape[:2]
    out = np.zeros((h, w, 2), dtype=np.float32)
    if not keypoints:
        return out
    for ch, side in enumerate(("left", "right")):
        wrist = keypoints.get(f"{side}_wrist")
        if wrist is not None:
            out[..., ch] = disc(h, w, wrist, radius) * s_s[..., LEFT_ARM + ch]
    return out


def semantic_replace(s_s: np.ndarray, m_w: np.ndarray, p_l: np.ndarray, keypoints: dict | None = None,
                     hand_radius: float = HAND_RADIUS) -> np.ndarray:
    """Build S_rep from the source layout, warped mask and side-split limb skeleton.

    When ``keypoints`` are given, source limb pixels near each wrist are kept
    so hands survive the replacement.
    """
    s_s = np.asarray(s_s, dtype=np.float32)
    m_w = np.asarray(m_w, dtype=np.float32)
    p_l = np.asarray(p_l, dtype=np.float32)
    if m_w.ndim == 3:
        m_w = m_w[..., 0]
    for name, arr in (("S_s", s_s), ("M_w", m_w), ("P_l", p_l)):
        _require_binary(name, arr)
    if not np.all(s_s.sum(-1) == 1):
        raise ValueError("S_s must be one-hot per pixel")
    if p_l.ndim == 2:
        raise ValueError("P_l must be side-split with shape (H, W, 2)")

    limbs = np.maximum(p_l, hand_regions(s_s, keypoints, hand_radius))
    out = np.zeros_like(s_s)
    out[..., :3] = s_s[..., :3]
    out[..., CLOTHING] = m_w
    out[..., LEFT_ARM:RIGHT_ARM + 1] = limbs * (1.0 - m_w)[..., None]
    out[..., BACKGROUND] = 1.0 - (out[..., :BACKGROUND].sum(-1) > 0)
    return out


def to_hard(layout: np.ndarray) -> np.ndarray:
    """One-hot layout from a soft one (argmax per pixel)."""
    layout = np.asarray(layout)
    return np.eye(layout.shape[-1], dtype=np.float32)[layout.argmax(-1)]


# --- estimator ---------------------------------------------------------------

class LayoutUNet(nn.Module):
    """Three-level UNet with coordinate channels; outputs per-pixel logits over 7 classes."""

    def __init__(self, in_channels: int = N_LAYOUT, out_channels: int = N_LAYOUT, width: int = 32, seed: int = 0):
        super().__init__()
        self.config = {"in_channels": in_channels, "out_channels": out_channels, "width": width, "seed": seed}
        torch.manual_seed(seed)
        c1, c2, c3 = width // 2, width, 2 * width
        self.enc1 = nn.Sequential(conv_act(in_channels + 2, c1), conv_act(c1, c1))
        self.enc2 = nn.Sequential(conv_act(c1, c2, stride=2), conv_act(c2, c2))
        self.enc3 = nn.Sequential(conv_act(c2, c3, stride=2), conv_act(c3, c3))
        self.dec2 = nn.Sequential(conv_act(c3 + c2, c2), conv_act(c2, c2))
        self.dec1 = nn.Sequential(conv_act(c2 + c1, c1), conv_act(c1, c1))
        self.head = nn.Conv2d(c1, out_channels, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(with_coords(x))
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        return self.head(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def estimate_layout(model: LayoutUNet, s_rep: np.ndarray) -> np.ndarray:
    """Soft target layout (H, W, 7) for one S_rep, or (N, H, W, 7) for a stack."""
    arr = np.asarray(s_rep, dtype=np.float32)
    single = arr.ndim == 3
    x = torch.from_numpy(np.ascontiguousarray((arr[None] if single else arr).transpose(0, 3, 1, 2)))
    with torch.no_grad():
        out = model(x).permute(0, 2, 3, 1).numpy()
    return out[0] if single else out


def _weights(weights, like: torch.Tensor, dim: int) -> torch.Tensor:
    w = torch.as_tensor(weights, dtype=like.dtype)
    shape = [1] * like.dim()
    shape[dim] = -1
    return w.reshape(shape)


def weighted_ce(s_t, s_target, weights=LAYOUT_WEIGHTS, dim: int = -1) -> torch.Tensor:
    """Class-weighted cross-entropy averaged over pixels; ``dim`` is the channel axis."""
    s_t = torch.as_tensor(s_t, dtype=torch.float64) if isinstance(s_t, np.ndarray) else s_t
    s_target = torch.as_tensor(s_target, dtype=s_t.dtype) if isinstance(s_target, np.ndarray) else s_target
    dim = dim % s_t.dim()
    n_pixels = s_t.numel() // s_t.shape[dim]
    terms = _weights(weights, s_t, dim) * s_target * torch.log(s_t.clamp_min(CE_CLAMP))
    return -terms.sum() / n_pixels


def weighted_ce_logits(logits: torch.Tensor, s_target: torch.Tensor, weights=LAYOUT_WEIGHTS) -> torch.Tensor:
    """Same loss as :func:`weighted_ce` on softmax(logits) over dim 1, computed stably."""
    n_pixels = logits.numel() // logits.shape[1]
    terms = _weights(weights, logits, 1) * s_target * F.log_softmax(logits, dim=1)
    return -terms.sum() / n_pixels


def layout_inputs(sample, m_w: np.ndarray | None = None, hand_radius: float = HAND_RADIUS) -> np.ndarray:
    """S_rep for a training sample; the ground-truth warped mask stands in for M_w unless given."""
    mask = sample.warped_mask_gt if m_w is None else m_w
    p_l = extract_limb_skeleton(sample.shape, sample.keypoints)
    return semantic_replace(sample.layout, mask, p_l, sample.keypoints, hand_radius)
