"""Toy pixel-space denoising diffusion for the final try-on image.

The denoiser sees the noisy image, the composite I_com and the occlusion mask
m stacked along channels. A garment embedding enters through cross-attention
on the bottleneck tokens. Images live in [0, 1]; the diffusion runs on the
rescaled range [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import FeatureExtractor, feature_distance
from .warp_net import attention, conv_act, with_coords

LAMBDA_VGG = 1e-4


@dataclass
class SynthConfig:
    cond_dim: int = 64
    lambda_vgg: float = LAMBDA_VGG
    steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 4e-2
    width: int = 32
    time_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lambda_vgg < 0:
            raise ValueError("lambda_vgg must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class NoiseSchedule:
    """Linear beta schedule with cumulative signal fractions ``alpha_bar``."""

    def __init__(self, steps: int = 200, beta_start: float = 1e-4, beta_end: float = 4e-2):
        if steps < 2 or not 0 < beta_start < beta_end < 1:
            raise ValueError("need steps >= 2 and 0 < beta_start < beta_end < 1")
        self.T = steps
        self.betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = torch.cumprod(self.alphas, 0)

    @classmethod
    def from_config(cls, cfg: SynthConfig) -> "NoiseSchedule":
        return cls(cfg.steps, cfg.beta_start, cfg.beta_end)

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T})")
        return t

    def coefficients(self, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ab = self.alpha_bar[self.check_t(t)].to(like.dtype)
        shape = (-1,) + (1,) * (like.dim() - 1) if ab.dim() else ()
        ab = ab.reshape(shape) if ab.dim() else ab
        return ab.sqrt(), (1.0 - ab).sqrt()


def add_noise(x0, t, eps, schedule: NoiseSchedule):
    """Forward process sample ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; accepts numpy or torch."""
    as_numpy = isinstance(x0, np.ndarray)
    x0_t = torch.as_tensor(x0)
    eps_t = torch.as_tensor(eps, dtype=x0_t.dtype)
    a, s = schedule.coefficients(t, x0_t)
    out = a * x0_t + s * eps_t
    return out.numpy() if as_numpy else out


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None]
    return torch.cat([ang.sin(), ang.cos()], 1)


class ClothingEmbedder(nn.Module):
    def __init__(self, cond_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(conv_act(3, 16, 2), conv_act(16, 32, 2), conv_act(32, 64, 2))
        self.fc = nn.Linear(64, cond_dim)

    def forward(self, cloth: torch.Tensor) -> torch.Tensor:
        return self.fc(self.net(cloth).mean(dim=(2, 3)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.conv1(x)) + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CondCrossAttention(nn.Module):
    """Bottleneck tokens attend over [learned null token, projected garment embedding]."""

    def __init__(self, channels: int, cond_dim: int, dim: int = 32):
        super().__init__()
        self.q = nn.Linear(channels, dim)
        self.k = nn.Linear(cond_dim, dim)
        self.v = nn.Linear(cond_dim, channels)
        self.null = nn.Parameter(torch.zeros(1, 1, cond_dim))
        self.norm = nn.GroupNorm(8, channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        ctx = torch.cat([self.null.expand(n, 1, -1), cond[:, None]], 1)
        out, _ = attention(self.q(tokens), self.k(ctx), self.v(ctx))
        return x + out.transpose(1, 2).reshape(n, c, h, w)


class Denoiser(nn.Module):
    """Noise predictor over channel-concatenated (x_t, I_com, m)."""

    def __init__(self, cfg: SynthConfig):
        super().__init__()
        c1, c2 = cfg.width, 2 * cfg.width
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.time_dim = td
        self.inp = nn.Conv2d(3 + 3 + 1 + 2, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, td)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, td)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c2, td)
        self.attn = CondCrossAttention(c2, cfg.cond_dim)
        self.mid2 = ResBlock(c2, c2, td)
        self.up2 = ResBlock(2 * c2, c2, td)
        self.up1 = ResBlock(c2 + c1, c1, td)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_t, i_com, m, cond, t) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.time_dim))
        h0 = self.inp(with_coords(torch.cat([x_t, i_com, m], 1)))
        h1 = self.down1(h0, temb)
        h2 = self.down2(self.pool1(h1), temb)
        mid = self.mid1(self.pool2(h2), temb)
        mid = self.mid2(self.attn(mid, cond), temb)
        u2 = self.up2(torch.cat([F.interpolate(mid, size=h2.shape[-2:], mode="nearest"), h2], 1), temb)
        u1 = self.up1(torch.cat([F.interpolate(u2, size=h1.shape[-2:], mode="nearest"), h1], 1), temb)
        return self.out(F.silu(u1))


class TryOnSynthesizer(nn.Module):
    """Denoiser plus garment embedder sharing one parameter container."""

    def __init__(self, cfg: SynthConfig | None = None):
        super().__init__()
        self.cfg = cfg or SynthConfig()
        torch.manual_seed(self.cfg.seed)
        self.embed = ClothingEmbedder(self.cfg.cond_dim)
        self.denoiser = Denoiser(self.cfg)
        self.schedule = NoiseSchedule.from_config(self.cfg)

    def forward(self, x_t, i_com, m, cloth, t):
        return self.denoiser(x_t, i_com, m, self.embed(cloth), t)


def to_signal(img: torch.Tensor) -> torch.Tensor:
    return img * 2.0 - 1.0


def from_signal(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def clothing_embed(model: TryOnSynthesizer, cloth: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(cloth, dtype=np.float32).transpose(2, 0, 1)))[None]
    with torch.no_grad():
        return model.embed(x)[0].numpy()


def l_ldm(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    return ((eps - eps_hat) ** 2).mean()


def l_vgg(i_try: torch.Tensor, person: torch.Tensor, phi: FeatureExtractor | None = None) -> torch.Tensor:
    return feature_distance(i_try, person, phi)


def l_syn(ldm, vgg, lambda_vgg: float = LAMBDA_VGG):
    return lambda_vgg * vgg + ldm


def training_losses(model: TryOnSynthesizer, person, i_com, m, cloth, generator: torch.Generator | None = None) -> dict:
    """One stochastic evaluation of the synthesis objective on a batch (NCHW tensors in [0, 1]).

    The perceptual term compares the one-step estimate of the clean image with the target.
    """
    sched = model.schedule
    n = person.shape[0]
    t = torch.randint(0, sched.T, (n,), generator=generator)
    eps = torch.randn(person.shape, generator=generator)
    x0 = to_signal(person)
    x_t = add_noise(x0, t, eps, sched)
    eps_hat = model(x_t, to_signal(i_com), m, cloth, t)
    a, s = sched.coefficients(t, x0)
    x0_hat = (x_t - s * eps_hat) / a
    ldm = l_ldm(eps, eps_hat)
    vgg = l_vgg(from_signal(x0_hat), person)
    return {"ldm": ldm, "vgg": vgg, "syn": l_syn(ldm, vgg, model.cfg.lambda_vgg)}


@torch.no_grad()
def sample(model: TryOnSynthesizer, i_com: torch.Tensor, m: torch.Tensor, cloth: torch.Tensor, seed: int) -> torch.Tensor:
    """Ancestral sampling from pure noise over all steps; returns NCHW images in [0, 1]."""
    sched = model.schedule
    gen = torch.Generator().manual_seed(seed)
    cond = model.embed(cloth)
    ic = to_signal(i_com)
    x = torch.randn(i_com.shape, generator=gen)
    n = x.shape[0]
    for step in range(sched.T - 1, -1, -1):
        t = torch.full((n,), step, dtype=torch.long)
        eps_hat = model.denoiser(x, ic, m, cond, t)
        beta = float(sched.betas[step])
        ab = float(sched.alpha_bar[step])
        mean = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
        if step > 0:
            ab_prev = float(sched.alpha_bar[step - 1])
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen)
        else:
            x = mean
        x = x.clamp(-3.0, 3.0)
    return from_signal(x)
