"""Warp-stage training objectives and the toy perceptual feature pyramid.

All L1 terms are per-element means so magnitudes do not depend on resolution.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LAMBDA_PER = 5.0
STAGE_CHANNELS = (8, 16, 32, 32, 64)


class FeatureExtractor(nn.Module):
    """Five strided conv stages with fixed seeded random weights, a frozen stand-in for VGG-19.

    ``forward`` returns the list of stage outputs ``[phi_1, ..., phi_5]``.
    """

    def __init__(self, seed: int = 1234, in_channels: int = 3, channels=STAGE_CHANNELS):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = in_channels
        for ch in channels:
            conv = nn.Conv2d(prev, ch, 3, stride=2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.stages.append(conv)
            prev = ch
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.stages:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially averaged last-stage features, shape (N, C5)."""
        return self(x)[-1].mean(dim=(2, 3))


_DEFAULT_PHI: FeatureExtractor | None = None


def default_extractor() -> FeatureExtractor:
    global _DEFAULT_PHI
    if _DEFAULT_PHI is None:
        _DEFAULT_PHI = FeatureExtractor()
    return _DEFAULT_PHI


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def l_rec(c_s, c_s_target, c_w, c_gt) -> torch.Tensor:
    return l1(c_s, c_s_target) + l1(c_w, c_gt)


def feature_distance(a: torch.Tensor, b: torch.Tensor, phi: FeatureExtractor | None = None) -> torch.Tensor:
    """Sum over the five stages of the mean-L1 feature difference."""
    phi = phi or default_extractor()
    total = a.new_zeros(())
    for fa, fb in zip(phi(a), phi(b)):
        total = total + l1(fa, fb)
    return total


def l_per(c_s, c_s_target, c_w, c_gt, phi: FeatureExtractor | None = None) -> torch.Tensor:
    return feature_distance(c_s, c_s_target, phi) + feature_distance(c_w, c_gt, phi)


def l_mask(m_w_soft, m_gt) -> torch.Tensor:
    return l1(m_w_soft, m_gt)


def l_warp(rec, per, mask, lambda_per: float = LAMBDA_PER):
    return rec + lambda_per * per + mask


def l_vgg(i_try, person, phi: FeatureExtractor | None = None) -> torch.Tensor:
    return feature_distance(i_try, person, phi)
