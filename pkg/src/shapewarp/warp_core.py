"""Dense-flow warping primitives, ``.flo`` I/O and mask alignment counts.

A flow field is an ``(H, W, 2)`` array of pixel displacements ``(dx, dy)``.
The output pixel ``(i, j)`` samples the source at ``(i + dy, j + dx)`` with
bilinear interpolation and zero padding outside the canvas.

Two entry points share one sampler:

* :func:`warp` works on batched torch tensors ``(N, C, H, W)`` / ``(N, 2, H, W)``
  and is differentiable in both the source values and the flow.
* :func:`apply_flow` / :func:`apply_flow_mask` wrap it for single numpy images.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FLO_MAGIC = b"PIEH"


class FlowFormatError(ValueError):
    """Raised for malformed ``.flo`` files."""


def warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``src`` at coordinates displaced by ``flow``.

    Parameters
    ----------
    src : Tensor, shape (N, C, H, W)
    flow : Tensor, shape (N, 2, H, W)
        Channel 0 is ``dx`` (columns), channel 1 is ``dy`` (rows), in pixels.
    """
    if src.dim() != 4 or flow.dim() != 4:
        raise ValueError("warp expects 4-d tensors (N, C, H, W) and (N, 2, H, W)")
    n, c, h, w = src.shape
    if flow.shape[0] != n or flow.shape[1] != 2 or flow.shape[2:] != src.shape[2:]:
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match source {tuple(src.shape)}")

    rows = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    cols = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = cols + flow[:, 0]
    y = rows + flow[:, 1]

    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    flat = src.reshape(n, c, h * w)
    out = None
    for dy_, wy in ((0, wy0), (1, wy1)):
        for dx_, wx in ((0, wx0), (1, wx1)):
            yi = y0 + dy_
            xi = x0 + dx_
            valid = (yi >= 0) & (yi <= h - 1) & (xi >= 0) & (xi <= w - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
            vals = torch.gather(flat, 2, idx.view(n, 1, h * w).expand(n, c, h * w)).view(n, c, h, w)
            weight = (wy * wx * valid.to(src.dtype)).unsqueeze(1)
            term = vals * weight
            out = term if out is None else out + term
    return out


def _check_pair(src: np.ndarray, flow: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if src.shape[:2] != flow.shape[:2]:
        raise ValueError(f"source {src.shape[:2]} and flow {flow.shape[:2]} differ in H x W")


def apply_flow(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp an ``(H, W)`` or ``(H, W, C)`` image by an ``(H, W, 2)`` flow.

    Computation runs in float64; float32 inputs come back as float32.
    """
    src = np.asarray(src)
    flow = np.asarray(flow)
    _check_pair(src, flow)
    squeeze = src.ndim == 2
    img = src[..., None] if squeeze else src
    t_src = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    t_flow = torch.from_numpy(np.ascontiguousarray(flow, dtype=np.float64)).permute(2, 0, 1)[None]
    with torch.no_grad():
        out = warp(t_src, t_flow)[0].permute(1, 2, 0).numpy()
    if squeeze:
        out = out[..., 0]
    out_dtype = np.float32 if src.dtype == np.float32 else np.float64
    return out.astype(out_dtype)


def apply_flow_mask(mask: np.ndarray, flow: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Warp a binary mask as a real image, then binarize at ``threshold``."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {mask.shape}")
    soft = apply_flow(mask.astype(np.float64), flow)
    return (soft >= threshold).astype(np.float32)


@dataclass
class GradcheckReport:
    probes: np.ndarray  # (P, 3) rows of (i, j, component)
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float


def _off_lattice(flow: np.ndarray, i: int, j: int, margin: float) -> bool:
    fx = (j + flow[i, j, 0]) % 1.0
    fy = (i + flow[i, j, 1]) % 1.0
    return min(fx, 1 - fx) > margin and min(fy, 1 - fy) > margin


def flow_gradcheck(
    src: np.ndarray,
    flow: np.ndarray,
    epsilon: float = 1e-4,
    n_probes: int = 20,
    seed: int = 0,
    probes: list[tuple[int, int]] | None = None,
) -> GradcheckReport:
    """Compare autograd flow gradients of ``sum(apply_flow(src, flow))`` to central differences.

    Probe pixels sit at least 2 px from the border and their sampling positions
    stay clear of the integer lattice by more than ``2 * epsilon`` so the
    finite difference never straddles a bilinear kink.
    """
    src = np.asarray(src, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_pair(src, flow)
    img = src[..., None] if src.ndim == 2 else src
    h, w = flow.shape[:2]

    if probes is None:
        rng = np.random.default_rng(seed)
        probes = []
        attempts = 0
        while len(probes) < n_probes:
            attempts += 1
            if attempts > 100 * n_probes:
                raise RuntimeError("could not find enough off-lattice probe points")
            i = int(rng.integers(2, h - 2))
            j = int(rng.integers(2, w - 2))
            if _off_lattice(flow, i, j, 2 * epsilon):
                probes.append((i, j))

    t_src = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]

    def total(f: np.ndarray) -> float:
        t_f = torch.from_numpy(np.ascontiguousarray(f)).permute(2, 0, 1)[None]
        with torch.no_grad():
            return float(warp(t_src, t_f).sum())

    t_flow = torch.from_numpy(flow.copy()).permute(2, 0, 1)[None].requires_grad_(True)
    warp(t_src, t_flow).sum().backward()
    grad = t_flow.grad[0].permute(1, 2, 0).numpy()

    rows, analytic, numeric = [], [], []
    for i, j in probes:
        for comp in (0, 1):
            plus = flow.copy()
            minus = flow.copy()
            plus[i, j, comp] += epsilon
            minus[i, j, comp] -= epsilon
            fd = (total(plus) - total(minus)) / (2 * epsilon)
            rows.append((i, j, comp))
            analytic.append(grad[i, j, comp])
            numeric.append(fd)
    analytic_a = np.array(analytic)
    numeric_a = np.array(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic_a), np.abs(numeric_a)), 1e-8)
    rel = np.abs(analytic_a - numeric_a) / scale
    return GradcheckReport(np.array(rows), analytic_a, numeric_a, float(rel.max(initial=0.0)))


def misalignment_count(m_pred: np.ndarray, m_gt: np.ndarray) -> int:
    """Number of pixels in the symmetric difference of two binary masks."""
    a = np.asarray(m_pred)
    b = np.asarray(m_gt)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero((a > 0.5) != (b > 0.5)))


def mask_iou(m_pred: np.ndarray, m_gt: np.ndarray) -> float:
    a = np.asarray(m_pred) > 0.5
    b = np.asarray(m_gt) > 0.5
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def write_flo(flow: np.ndarray, path: str | Path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic, not a .flo file")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = w * h * 2 * 4
    payload = data[12:]
    if len(payload) != expected:
        raise FlowFormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float32)
