"""Dual-path clothing warping network.

Shape path: pose encoder -> style blocks (modulated by a garment style code)
-> shape decoder producing the shape-guided clothing map ``C_s``.

Shape-guided cross-attention: queries from ``C_s``, keys/values from the
normalized garment, several attention blocks concatenated into ``F_att``.

Flow path: ``[F_style, F_att]`` -> flow decoder -> dense appearance flow that
warps the in-shop garment and its mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_synth import N_PARTS, TrainingSample
from .normalize import color_normalize
from .warp_core import warp

STD_EPS = 1e-5


@dataclass
class WarpNetConfig:
    height: int = 64
    width: int = 48
    feature_channels: int = 64
    attention_blocks: int = 2
    attention_dim: int = 32
    token_channels: int = 32
    style_dim: int = 128
    style_blocks: int = 2
    stride: int = 8
    attention_stride: int = 4
    shape_attention: bool = True
    cotrain: bool = True
    flow_refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.attention_dim <= 0:
            raise ValueError("attention_dim must be positive")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError(f"canvas {self.height}x{self.width} must divide by the encoder stride {self.stride}")
        if self.attention_stride not in (2, 4, 8) or self.height % self.attention_stride or self.width % self.attention_stride:
            raise ValueError(f"attention stride {self.attention_stride} must be 2, 4 or 8 and divide the canvas")

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def attention_grid(self) -> tuple[int, int]:
        return self.height // self.attention_stride, self.width // self.attention_stride

    def to_dict(self) -> dict:
        return asdict(self)


def coord_channels(n: int, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    ys = torch.linspace(-1.0, 1.0, h, dtype=like.dtype, device=like.device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy]).unsqueeze(0).expand(n, 2, h, w)


def with_coords(x: torch.Tensor) -> torch.Tensor:
    n, _, h, w = x.shape
    return torch.cat([x, coord_channels(n, h, w, x)], dim=1)


def conv_act(cin: int, cout: int, stride: int = 1, padding_mode: str = "zeros") -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=padding_mode), nn.LeakyReLU(0.2))


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = conv_act(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


def strided_encoder(cin: int, widths: tuple[int, ...]) -> nn.Sequential:
    layers = [conv_act(cin, widths[0])]
    prev = widths[0]
    for wd in widths[1:]:
        layers.append(conv_act(prev, wd, stride=2))
        prev = wd
    return nn.Sequential(*layers)


class PoseEncoder(nn.Module):
    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        self.net = strided_encoder(1 + N_PARTS + 2, (16, 32, 64, cfg.feature_channels))

    def forward(self, skeleton: torch.Tensor, parts_onehot: torch.Tensor) -> torch.Tensor:
        if skeleton.shape[2:] != parts_onehot.shape[2:]:
            raise ValueError("skeleton and part map must share H x W")
        return self.net(with_coords(torch.cat([skeleton, parts_onehot], dim=1)))


class StyleEncoder(nn.Module):
    """Garment -> global style code: conv features, spatial average, MLP.

    Stride-1 convolutions with replicate padding keep the pooled code
    independent of where the garment sits on its white canvas, so garment
    placement reaches the flow path only through cross-attention.
    """

    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        rep = "replicate"
        self.features = nn.Sequential(conv_act(3, 16, 1, rep), conv_act(16, 32, 1, rep), conv_act(32, 64, 1, rep))
        self.mlp = nn.Sequential(nn.Linear(64, cfg.style_dim), nn.LeakyReLU(0.2), nn.Linear(cfg.style_dim, cfg.style_dim))

    def forward(self, cloth: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.features(cloth).mean(dim=(2, 3)))


def channel_stats(f: torch.Tensor, eps: float = STD_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel spatial mean and (population) standard deviation plus ``eps``."""
    mu = f.mean(dim=(2, 3), keepdim=True)
    sigma = ((f - mu) ** 2).mean(dim=(2, 3), keepdim=True).sqrt() + eps
    return mu, sigma


def style_modulate(f_pose: torch.Tensor, gamma: torch.Tensor, delta: torch.Tensor, eps: float = STD_EPS) -> torch.Tensor:
    mu, sigma = channel_stats(f_pose, eps)
    return gamma * (f_pose - mu) / sigma + delta


class StyleBlock(nn.Module):
    """Style modulation with position-dependent affine maps from the style code, then a conv."""

    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        ht, wt = cfg.token_grid
        self.shape = (cfg.feature_channels, ht, wt)
        size = cfg.feature_channels * ht * wt
        self.gamma = nn.Linear(cfg.style_dim, size)
        self.delta = nn.Linear(cfg.style_dim, size)
        nn.init.normal_(self.gamma.weight, std=0.01)
        nn.init.ones_(self.gamma.bias)
        nn.init.normal_(self.delta.weight, std=0.01)
        nn.init.zeros_(self.delta.bias)
        self.conv = conv_act(cfg.feature_channels, cfg.feature_channels)

    def affine(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n = s.shape[0]
        return self.gamma(s).view(n, *self.shape), self.delta(s).view(n, *self.shape)

    def forward(self, f: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        gamma, delta = self.affine(s)
        return self.conv(style_modulate(f, gamma, delta))


class ShapeDecoder(nn.Module):
    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        self.net = nn.Sequential(Up(cfg.feature_channels, 32), Up(32, 16), Up(16, 16), nn.Conv2d(16, 3, 3, padding=1))

    def forward(self, f_style: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(f_style))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention on (N, T, d) token matrices; returns (output, weights)."""
    logits = q @ k.transpose(1, 2) / math.sqrt(k.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class CrossAttentionBlock(nn.Module):
    def __init__(self, token_channels: int, dim: int):
        super().__init__()
        self.a_q = nn.Linear(token_channels, dim)
        self.a_k = nn.Linear(token_channels, dim)
        self.a_v = nn.Linear(token_channels, dim)

    def forward(self, q, k, v):
        return attention(self.a_q(q), self.a_k(k), self.a_v(v))


@dataclass
class AttentionArtifacts:
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    block_outputs: list
    weights: list
    f_att: torch.Tensor


class ShapeGuidedAttention(nn.Module):
    """Queries from the shape-guided map, keys and values from the normalized garment."""

    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        n_down = int(math.log2(cfg.attention_stride))
        widths = (16,) + (32,) * (n_down - 1) + (cfg.token_channels,)
        self.e_q = strided_encoder(3 + 2, widths)
        self.e_k = strided_encoder(3 + 2, widths)
        self.e_v = strided_encoder(3 + 2, widths)
        self.blocks = nn.ModuleList(CrossAttentionBlock(cfg.token_channels, cfg.attention_dim) for _ in range(cfg.attention_blocks))

    @staticmethod
    def flatten(x: torch.Tensor) -> torch.Tensor:
        return x.flatten(2).transpose(1, 2)

    def forward(self, c_s: torch.Tensor, c_hat: torch.Tensor) -> AttentionArtifacts:
        if c_s.shape != c_hat.shape:
            raise ValueError(f"shape map {tuple(c_s.shape)} and normalized garment {tuple(c_hat.shape)} differ")
        fq = self.e_q(with_coords(c_s))
        n, _, ht, wt = fq.shape
        q = self.flatten(fq)
        k = self.flatten(self.e_k(with_coords(c_hat)))
        v = self.flatten(self.e_v(with_coords(c_hat)))
        outs, weights = [], []
        for block in self.blocks:
            o, wgt = block(q, k, v)
            outs.append(o)
            weights.append(wgt)
        fused = torch.cat(outs, dim=-1).transpose(1, 2).reshape(n, -1, ht, wt)
        return AttentionArtifacts(q, k, v, outs, weights, fused)


class FlowDecoder(nn.Module):
    """Coarse flow at stride 4 (fusing F_att there), then an optional full-resolution residual.

    The residual branch only sees target-frame inputs: the skeleton and part
    map and, with shape attention, the shape-guided map. Garment placement
    therefore reaches the flow through attention alone.
    """

    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        self.use_attention = cfg.shape_attention
        self.net = nn.Sequential(conv_act(cfg.feature_channels, 64), conv_act(64, 64), Up(64, 32))
        self.mid_size = (cfg.height // 4, cfg.width // 4)
        if self.use_attention:
            self.fuse = nn.Sequential(conv_act(32 + cfg.attention_blocks * cfg.attention_dim, 64), conv_act(64, 32))
        self.head = nn.Conv2d(32, 2, 3, padding=1)
        self.out_size = (cfg.height, cfg.width)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)
        self.refine = None
        if cfg.flow_refine:
            self.guide = nn.Sequential(conv_act(1 + N_PARTS + 2, 16), conv_act(16, 16))
            self.up = nn.Sequential(Up(32, 32), Up(32, 16))
            rin = 16 + 16 + 2 + (3 if self.use_attention else 0)
            self.refine = nn.Sequential(conv_act(rin, 32), conv_act(32, 32), nn.Conv2d(32, 2, 3, padding=1))
            nn.init.zeros_(self.refine[-1].weight)
            nn.init.zeros_(self.refine[-1].bias)

    def forward(self, f_style: torch.Tensor, f_att: torch.Tensor | None = None, guide: torch.Tensor | None = None,
                c_s: torch.Tensor | None = None) -> torch.Tensor:
        feats = F.interpolate(self.net(f_style), size=self.mid_size, mode="bilinear", align_corners=False)
        if self.use_attention:
            if f_att is None:
                raise ValueError("this decoder was built with shape attention and needs F_att")
            f_att = F.interpolate(f_att, size=self.mid_size, mode="bilinear", align_corners=False)
            feats = self.fuse(torch.cat([feats, f_att], dim=1))
        flow = F.interpolate(self.head(feats), size=self.out_size, mode="bilinear", align_corners=False)
        if self.refine is None:
            return flow
        if guide is None or (self.use_attention and c_s is None):
            raise ValueError("flow refinement needs the target-frame guide (and the shape map with attention)")
        fine = F.interpolate(self.up(feats), size=self.out_size, mode="bilinear", align_corners=False)
        parts = [fine, self.guide(with_coords(guide)), flow]
        if self.use_attention:
            parts.append(c_s)
        return flow + self.refine(torch.cat(parts, dim=1))


class WarpNet(nn.Module):
    def __init__(self, cfg: WarpNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or WarpNetConfig()
        torch.manual_seed(self.cfg.seed)
        self.pose_encoder = PoseEncoder(self.cfg)
        self.style_encoder = StyleEncoder(self.cfg)
        self.style_blocks = nn.ModuleList(StyleBlock(self.cfg) for _ in range(self.cfg.style_blocks))
        self.shape_decoder = ShapeDecoder(self.cfg)
        self.attention = ShapeGuidedAttention(self.cfg) if self.cfg.shape_attention else None
        self.flow_decoder = FlowDecoder(self.cfg)

    def shared_features(self, cloth, skeleton, parts_onehot):
        f_pose = self.pose_encoder(skeleton, parts_onehot)
        s = self.style_encoder(cloth)
        f = f_pose
        for block in self.style_blocks:
            f = block(f, s)
        return f_pose, s, f

    def forward(self, batch: dict) -> dict:
        cloth, mask = batch["cloth"], batch["cloth_mask"]
        f_pose, s, f_style = self.shared_features(cloth, batch["skeleton"], batch["parts"])
        shape_in = f_style if self.cfg.cotrain else f_style.detach()
        c_s = self.shape_decoder(shape_in)
        art = query_map = None
        if self.attention is not None:
            query_map = c_s if self.cfg.cotrain else c_s.detach()
            art = self.attention(query_map, batch["cloth_norm"])
        guide = torch.cat([batch["skeleton"], batch["parts"]], dim=1)
        flow = self.flow_decoder(f_style, art.f_att if art is not None else None, guide, query_map)
        m_w_soft = warp(mask, flow)
        c_w_soft = warp(cloth * mask, flow)
        return {
            "f_pose": f_pose,
            "style": s,
            "f_style": f_style,
            "c_s": c_s,
            "attention": art,
            "flow": flow,
            "m_w_soft": m_w_soft,
            "c_w_soft": c_w_soft,
        }


# --- numpy <-> tensor plumbing ---------------------------------------------

def _chw(a: np.ndarray) -> torch.Tensor:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))


def parts_onehot(partmap: np.ndarray) -> np.ndarray:
    return np.eye(N_PARTS, dtype=np.float32)[np.asarray(partmap, dtype=np.int64)]


def warp_batch(samples: list[TrainingSample]) -> dict[str, torch.Tensor]:
    """Stack samples into the tensor dict consumed by :class:`WarpNet` and the warp losses."""
    keys: dict[str, list] = {k: [] for k in (
        "cloth", "cloth_mask", "cloth_norm", "skeleton", "parts",
        "warped_cloth_gt", "warped_mask_gt", "cloth_norm_gt", "flow_gt",
    )}
    for s in samples:
        keys["cloth"].append(_chw(s.cloth))
        keys["cloth_mask"].append(_chw(s.cloth_mask))
        keys["cloth_norm"].append(_chw(color_normalize(s.cloth, s.cloth_mask).values))
        keys["skeleton"].append(_chw(s.skeleton))
        keys["parts"].append(_chw(parts_onehot(s.partmap)))
        keys["warped_cloth_gt"].append(_chw(s.warped_cloth_gt))
        keys["warped_mask_gt"].append(_chw(s.warped_mask_gt))
        keys["cloth_norm_gt"].append(_chw(color_normalize(s.warped_cloth_gt, s.warped_mask_gt).values))
        keys["flow_gt"].append(_chw(s.flow_gt))
    return {k: torch.stack(v) for k, v in keys.items()}


def index_batch(batch: dict[str, torch.Tensor], idx) -> dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in batch.items()}


@dataclass
class WarpOutputs:
    c_s: np.ndarray  # (H, W, 3)
    flow: np.ndarray  # (H, W, 2)
    c_w: np.ndarray  # (H, W, 3)
    m_w: np.ndarray  # (H, W)


def finalize_outputs(out: dict, batch: dict, threshold: float = 0.5) -> list[WarpOutputs]:
    """Binarize the warped mask and mask the warped garment with it."""
    with torch.no_grad():
        m_w = (out["m_w_soft"] >= threshold).float()
        # double precision keeps C_w within 1e-6 of an exact float64 warp
        c_w = (warp(batch["cloth"].double(), out["flow"].double()) * m_w.double()).float()
    results = []
    for k in range(m_w.shape[0]):
        results.append(WarpOutputs(
            c_s=out["c_s"][k].detach().permute(1, 2, 0).numpy(),
            flow=out["flow"][k].detach().permute(1, 2, 0).numpy(),
            c_w=c_w[k].permute(1, 2, 0).numpy(),
            m_w=m_w[k, 0].numpy(),
        ))
    return results


def warp_forward(model: WarpNet, cloth, cloth_mask, skeleton, partmap, flow_override=None) -> WarpOutputs:
    """Run the full warping pipeline on one garment/person pair given as numpy arrays.

    ``flow_override`` replaces the decoded flow (used to check the pipeline against ground truth).
    """
    norm = color_normalize(cloth, cloth_mask).values
    batch = {
        "cloth": _chw(cloth)[None],
        "cloth_mask": _chw(cloth_mask)[None],
        "cloth_norm": _chw(norm)[None],
        "skeleton": _chw(skeleton)[None],
        "parts": _chw(parts_onehot(partmap))[None],
    }
    model.eval()
    with torch.no_grad():
        out = model(batch)
        if flow_override is not None:
            flow = _chw(flow_override)[None].to(out["flow"].dtype)
            out["flow"] = flow
            out["m_w_soft"] = warp(batch["cloth_mask"], flow)
    return finalize_outputs(out, batch)[0]
