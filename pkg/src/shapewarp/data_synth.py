"""Seeded synthetic try-on pairs with exact ground-truth deformation.

A canonical body is laid out in the frame of the in-shop garment image, so
the garment fits it by construction. A smooth random flow then deforms the
whole canonical scene into the person frame; the person image is composited
from the deformed body parts and the garment warped by that same flow.
Every sample therefore carries its exact warping oracle.

Semantic layout channels: 0 hair, 1 face, 2 lower body, 3 upper clothing,
4 left arm, 5 right arm, 6 background. Part-map labels: 0 none, 1 head,
2 torso, 3 left arm, 4 right arm, 5 lower body. "Left" is the person's left,
which appears on the right of the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .warp_core import apply_flow, apply_flow_mask, mask_iou

MIN_SIZE = 32
N_LAYOUT = 7
N_PARTS = 6
LAYOUT_NAMES = ("hair", "face", "lower_body", "upper_clothes", "left_arm", "right_arm", "background")
PART_NAMES = ("none", "head", "torso", "left_arm", "right_arm", "lower_body")
KEYPOINT_NAMES = (
    "head",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "pelvis",
)
LIMB_KEYPOINTS = ("left_shoulder", "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist")
SKELETON_EDGES = (
    ("head", "neck"),
    ("neck", "left_shoulder"),
    ("neck", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("neck", "pelvis"),
)
STYLES = ("uniform", "striped", "logo", "checker")
SLEEVES = ("short", "long")

MAX_FLOW_FRACTION = 0.15
MIN_TORSO_IOU = 0.3
MAX_RETRIES = 10


class SizingError(ValueError):
    pass


class SampleGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GarmentSpec:
    style: str = "uniform"
    base_color: tuple[float, float, float] = (0.8, 0.1, 0.1)
    logo_color: tuple[float, float, float] = (0.1, 0.1, 0.8)
    sleeve: str = "short"

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown garment style {self.style!r}")
        if self.sleeve not in SLEEVES:
            raise ValueError(f"unknown sleeve type {self.sleeve!r}")
        for name in ("base_color", "logo_color"):
            c = getattr(self, name)
            if len(c) != 3 or not all(0.0 <= v <= 1.0 for v in c):
                raise ValueError(f"{name} must be three values in [0, 1]")
        if self.style == "logo":
            diff = max(abs(a - b) for a, b in zip(self.base_color, self.logo_color))
            if diff < 0.2:
                raise ValueError("logo colour must differ from the base colour by at least 0.2 in some channel")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "GarmentSpec":
        style = STYLES[int(rng.integers(len(STYLES)))]
        sleeve = SLEEVES[int(rng.integers(len(SLEEVES)))]
        base = rng.uniform(0.05, 0.95, size=3)
        logo = rng.uniform(0.05, 0.95, size=3)
        while np.abs(base - logo).max() < 0.35:
            logo = rng.uniform(0.05, 0.95, size=3)
        return cls(style, tuple(float(v) for v in base), tuple(float(v) for v in logo), sleeve)


@dataclass
class TrainingSample:
    """One paired example. Arrays are float32 unless noted.

    cloth (H, W, 3) in-shop garment on white; cloth_mask (H, W);
    person (H, W, 3); layout (H, W, 7) one-hot; skeleton (H, W) raster of the
    9-keypoint skeleton; partmap (H, W) int labels; limb (H, W, 3) limb
    texture; flow_gt (H, W, 2); warped_cloth_gt (H, W, 3); warped_mask_gt (H, W).
    """

    cloth: np.ndarray
    cloth_mask: np.ndarray
    person: np.ndarray
    layout: np.ndarray
    skeleton: np.ndarray
    partmap: np.ndarray
    limb: np.ndarray
    flow_gt: np.ndarray
    warped_cloth_gt: np.ndarray
    warped_mask_gt: np.ndarray
    keypoints: dict[str, tuple[float, float]] = field(default_factory=dict)
    spec: GarmentSpec | None = None
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.cloth_mask.shape


# --- rasterization helpers -------------------------------------------------

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def convex_polygon_mask(h: int, w: int, vertices) -> np.ndarray:
    """Pixel centres inside a convex polygon given as (x, y) vertices in any winding."""
    xs, ys = _grid(h, w)
    v = np.asarray(vertices, dtype=np.float64)
    area2 = sum(v[k, 0] * v[(k + 1) % len(v), 1] - v[(k + 1) % len(v), 0] * v[k, 1] for k in range(len(v)))
    sign = 1.0 if area2 > 0 else -1.0
    inside = np.ones((h, w), dtype=bool)
    for k in range(len(v)):
        x0, y0 = v[k]
        x1, y1 = v[(k + 1) % len(v)]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= sign * cross >= 0
    return inside


def segment_distance(h: int, w: int, p0, p1) -> np.ndarray:
    """Euclidean distance from every pixel centre to the segment p0-p1 ((x, y) points)."""
    xs, ys = _grid(h, w)
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    if length2 == 0:
        return np.hypot(xs - x0, ys - y0)
    t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0)
    return np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))


def thick_segment(h: int, w: int, p0, p1, radius: float) -> np.ndarray:
    return segment_distance(h, w, p0, p1) <= radius


def disc(h: int, w: int, center, radius: float) -> np.ndarray:
    xs, ys = _grid(h, w)
    return np.hypot(xs - center[0], ys - center[1]) <= radius


def draw_skeleton(h: int, w: int, keypoints: dict, edges=SKELETON_EDGES, half_width: float = 1.0) -> np.ndarray:
    """Anti-aliased line raster: intensity falls off linearly over one pixel past ``half_width``."""
    out = np.zeros((h, w), dtype=np.float64)
    for a, b in edges:
        d = segment_distance(h, w, keypoints[a], keypoints[b])
        out = np.maximum(out, np.clip(half_width + 0.5 - d, 0.0, 1.0))
    return out.astype(np.float32)


# --- canonical scene -----------------------------------------------------

@dataclass
class _Canonical:
    keypoints: dict
    torso: list
    sleeves: list
    logo_center: tuple
    logo_radius: float
    head_radius: float
    arm_radius: float
    hand_radius: float
    hem_half: float


def _canonical_scene(spec: GarmentSpec, h: int, w: int, rng: np.random.Generator, offset=(0.0, 0.0)) -> _Canonical:
    sx, sy = w / 48.0, h / 64.0
    scale = rng.uniform(0.92, 1.08)
    cx = w / 2 + offset[0] + rng.uniform(-1.0, 1.0) * sx
    neck_y = 0.25 * h + offset[1] + rng.uniform(-1.0, 1.0) * sy
    shoulder_half = 0.22 * w * scale
    hem_half = 0.20 * w * scale
    torso_len = 0.42 * h * scale
    pelvis_y = neck_y + torso_len
    angle = math.radians(rng.uniform(10.0, 20.0))
    upper = 0.19 * h * scale
    fore = 0.17 * h * scale
    shoulder_y = neck_y + 0.03 * h

    kp = {"neck": (cx, neck_y), "pelvis": (cx, pelvis_y), "head": (cx, neck_y - 0.09 * h)}
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        sh = (cx + sgn * shoulder_half, shoulder_y)
        el = (sh[0] + sgn * upper * math.sin(angle), sh[1] + upper * math.cos(angle))
        wr = (el[0] + sgn * fore * math.sin(angle), el[1] + fore * math.cos(angle))
        kp[f"{side}_shoulder"], kp[f"{side}_elbow"], kp[f"{side}_wrist"] = sh, el, wr

    torso = [
        (cx - shoulder_half, neck_y),
        (cx + shoulder_half, neck_y),
        (cx + hem_half, pelvis_y),
        (cx - hem_half, pelvis_y),
    ]
    sleeve_half = 0.075 * w * scale
    sleeve_len = 0.13 * h * scale if spec.sleeve == "short" else upper + fore
    sleeves = []
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        sh = np.array(kp[f"{side}_shoulder"])
        direction = np.array([sgn * math.sin(angle), math.cos(angle)])
        normal = np.array([direction[1], -direction[0]])
        start = sh - 0.6 * sleeve_half * direction
        end = sh + sleeve_len * direction
        sleeves.append([
            tuple(start + sleeve_half * normal),
            tuple(end + sleeve_half * normal),
            tuple(end - sleeve_half * normal),
            tuple(start - sleeve_half * normal),
        ])
    logo_center = (cx, neck_y + 0.3 * torso_len)
    return _Canonical(
        keypoints=kp,
        torso=torso,
        sleeves=sleeves,
        logo_center=logo_center,
        logo_radius=0.1 * w * scale,
        head_radius=0.075 * h,
        arm_radius=0.06 * w * scale,
        hand_radius=0.055 * w * scale,
        hem_half=hem_half,
    )


def _garment_image(spec: GarmentSpec, canon: _Canonical, h: int, w: int, rng: np.random.Generator):
    mask = convex_polygon_mask(h, w, canon.torso)
    for quad in canon.sleeves:
        mask |= convex_polygon_mask(h, w, quad)
    base = np.asarray(spec.base_color, dtype=np.float64)
    logo = np.asarray(spec.logo_color, dtype=np.float64)
    colour = np.broadcast_to(base, (h, w, 3)).copy()
    xs, ys = _grid(h, w)
    if spec.style == "striped":
        period = max(4, int(round(h / 10)))
        phase = int(rng.integers(period))
        stripes = ((ys.astype(int) + phase) // (period // 2)) % 2 == 1
        colour[stripes] = logo
    elif spec.style == "checker":
        cell = max(2, int(round(w / 12)))
        px, py = rng.integers(cell, size=2)
        checks = (((xs.astype(int) + px) // cell) + ((ys.astype(int) + py) // cell)) % 2 == 1
        colour[checks] = logo
    elif spec.style == "logo":
        colour[disc(h, w, canon.logo_center, canon.logo_radius)] = logo
    image = np.where(mask[..., None], colour, 1.0)
    return image.astype(np.float32), mask.astype(np.float32)


def _canonical_parts(canon: _Canonical, h: int, w: int) -> dict[str, np.ndarray]:
    kp = canon.keypoints
    parts = {}
    cx, pelvis_y = kp["pelvis"]
    hb = canon.hem_half
    parts["lower_body"] = convex_polygon_mask(
        h, w, [(cx - hb, pelvis_y - 1.0), (cx + hb, pelvis_y - 1.0), (cx + 1.1 * hb, h + 2.0), (cx - 1.1 * hb, h + 2.0)]
    )
    parts["torso"] = convex_polygon_mask(h, w, canon.torso)
    head = disc(h, w, kp["head"], canon.head_radius)
    neck = thick_segment(h, w, kp["head"], kp["neck"], 0.4 * canon.head_radius)
    parts["head"] = head | neck
    _, ys = _grid(h, w)
    parts["hair"] = head & (ys < kp["head"][1] - 0.25 * canon.head_radius)
    for side in ("left", "right"):
        arm = thick_segment(h, w, kp[f"{side}_shoulder"], kp[f"{side}_elbow"], canon.arm_radius)
        arm |= thick_segment(h, w, kp[f"{side}_elbow"], kp[f"{side}_wrist"], canon.arm_radius)
        arm |= disc(h, w, _hand_center(kp, side, canon.hand_radius), canon.hand_radius)
        parts[f"{side}_arm"] = arm
    return parts


def _hand_center(kp: dict, side: str, radius: float) -> tuple[float, float]:
    el = np.array(kp[f"{side}_elbow"])
    wr = np.array(kp[f"{side}_wrist"])
    d = wr - el
    n = np.linalg.norm(d)
    d = d / n if n > 0 else np.array([0.0, 1.0])
    c = wr + 0.6 * radius * d
    return float(c[0]), float(c[1])


# --- flow ------------------------------------------------------------------

class SmoothFlow:
    """Affine plus low-frequency sinusoid displacement, evaluable at any point."""

    def __init__(self, h: int, w: int, seed: int, amplitude: float = 1.0):
        rng = np.random.default_rng(seed)
        s = min(h, w) / 48.0
        self.h, self.w = h, w
        self.center = np.array([w / 2.0, h / 2.0])
        theta = math.radians(rng.uniform(-4.0, 4.0))
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        stretch = np.diag(rng.uniform(0.93, 1.07, size=2))
        shear = np.array([[1.0, rng.uniform(-0.04, 0.04)], [rng.uniform(-0.04, 0.04), 1.0]])
        self.linear = rot @ stretch @ shear - np.eye(2)
        self.translation = rng.uniform(-4.0, 4.0, size=2) * s
        self.sin_amp = rng.uniform(0.0, 1.2, size=2) * s
        self.sin_phase = rng.uniform(0.0, 2 * math.pi, size=2)
        self.amplitude = float(amplitude)
        self.scale = 1.0
        limit = MAX_FLOW_FRACTION * min(h, w)
        peak = np.hypot(*self.grid_components()).max()
        if peak > limit:
            self.scale = limit / peak * (1.0 - 1e-6)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rx, ry = x - self.center[0], y - self.center[1]
        dx = self.linear[0, 0] * rx + self.linear[0, 1] * ry + self.translation[0]
        dy = self.linear[1, 0] * rx + self.linear[1, 1] * ry + self.translation[1]
        dx = dx + self.sin_amp[0] * np.sin(2 * math.pi * y / self.h + self.sin_phase[0])
        dy = dy + self.sin_amp[1] * np.sin(2 * math.pi * x / self.w + self.sin_phase[1])
        k = self.amplitude * self.scale
        return k * dx, k * dy

    def grid_components(self):
        xs, ys = _grid(self.h, self.w)
        return self(xs, ys)

    def field(self) -> np.ndarray:
        dx, dy = self.grid_components()
        return np.stack([dx, dy], axis=-1).astype(np.float32)

    def inverse_point(self, point, iterations: int = 50) -> tuple[float, float]:
        """Person-frame point q with q + f(q) = point (fixed-point iteration)."""
        px, py = point
        qx, qy = px, py
        for _ in range(iterations):
            dx, dy = self(qx, qy)
            qx, qy = px - float(dx), py - float(dy)
        return qx, qy


def _check_size(h: int, w: int) -> None:
    if h < MIN_SIZE or w < MIN_SIZE:
        raise SizingError(f"canvas {h}x{w} is below the {MIN_SIZE}px minimum")


def gen_flow_gt(height: int, width: int, seed: int, amplitude: float = 1.0) -> np.ndarray:
    """Smooth random displacement field, magnitude capped at 15% of the shorter side."""
    _check_size(height, width)
    return SmoothFlow(height, width, seed, amplitude).field()


def flow_jacobian_det(flow: np.ndarray) -> np.ndarray:
    """Finite-difference Jacobian determinant of p -> p + flow(p) on the pixel grid."""
    f = np.asarray(flow, dtype=np.float64)
    ddx_dy, ddx_dx = np.gradient(f[..., 0])
    ddy_dy, ddy_dx = np.gradient(f[..., 1])
    return (1.0 + ddx_dx) * (1.0 + ddy_dy) - ddx_dy * ddy_dx


# --- public generators ---------------------------------------------------

def _sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def _scene(spec: GarmentSpec, h: int, w: int, seed: int) -> tuple[_Canonical, SmoothFlow]:
    # The person stays near the canvas centre; the garment's placement on its
    # own canvas absorbs the translation part of the flow.
    flow_model = SmoothFlow(h, w, _sub_seed(seed, 2))
    offset = tuple(flow_model.scale * flow_model.amplitude * flow_model.translation)
    canon = _canonical_scene(spec, h, w, np.random.default_rng(_sub_seed(seed, 0)), offset)
    return canon, flow_model


def gen_garment(spec: GarmentSpec, height: int, width: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """In-shop garment image on white and its exact silhouette mask."""
    _check_size(height, width)
    canon, _ = _scene(spec, height, width, seed)
    return _garment_image(spec, canon, height, width, np.random.default_rng(_sub_seed(seed, 1)))


def _person_colours(rng: np.random.Generator) -> dict[str, np.ndarray]:
    skin = np.clip(np.array([0.85, 0.66, 0.55]) + rng.uniform(-0.12, 0.12) + rng.uniform(-0.04, 0.04, 3), 0, 1)
    return {
        "background": np.clip(rng.uniform(0.78, 0.95) + rng.uniform(-0.03, 0.03, 3), 0, 1),
        "skin": skin,
        "hair": rng.uniform(0.05, 0.35, 3),
        "lower_body": rng.uniform(0.1, 0.5, 3),
    }


def _build_pair(spec: GarmentSpec, h: int, w: int, seed: int) -> TrainingSample:
    canon, flow_model = _scene(spec, h, w, seed)
    cloth, cloth_mask = _garment_image(spec, canon, h, w, np.random.default_rng(_sub_seed(seed, 1)))
    flow = flow_model.field()
    colours = _person_colours(np.random.default_rng(_sub_seed(seed, 3)))

    warped_mask = apply_flow_mask(cloth_mask, flow)
    warped_cloth = apply_flow(cloth, flow) * warped_mask[..., None]

    parts = {k: apply_flow_mask(v.astype(np.float32), flow) > 0.5 for k, v in _canonical_parts(canon, h, w).items()}
    partmap = np.zeros((h, w), dtype=np.int64)
    for label, name in ((5, "lower_body"), (2, "torso"), (1, "head"), (3, "left_arm"), (4, "right_arm")):
        partmap[parts[name]] = label

    kp = {name: flow_model.inverse_point(canon.keypoints[name]) for name in KEYPOINT_NAMES}

    clothing = warped_mask > 0.5
    labels = np.full((h, w), 6, dtype=np.int64)
    labels[parts["lower_body"]] = 2
    labels[parts["head"]] = 1
    labels[parts["hair"]] = 0
    labels[parts["left_arm"]] = 4
    labels[parts["right_arm"]] = 5
    labels[clothing] = 3
    layout = np.eye(N_LAYOUT, dtype=np.float32)[labels]

    person = np.empty((h, w, 3), dtype=np.float64)
    person[:] = colours["background"]
    person[labels == 2] = colours["lower_body"]
    person[labels == 1] = colours["skin"]
    person[labels == 0] = colours["hair"]
    for side, ch in (("left", 4), ("right", 5)):
        region = labels == ch
        if not region.any():
            continue
        d = np.minimum(
            segment_distance(h, w, kp[f"{side}_shoulder"], kp[f"{side}_elbow"]),
            segment_distance(h, w, kp[f"{side}_elbow"], kp[f"{side}_wrist"]),
        )
        shade = 1.0 - 0.25 * np.clip(d / max(canon.arm_radius, 1e-6), 0.0, 1.5) ** 2
        person[region] = colours["skin"] * shade[region, None]
    person = person.astype(np.float32)
    person[clothing] = warped_cloth[clothing]

    limb_region = (labels == 4) | (labels == 5)
    limb = np.where(limb_region[..., None], person, 0.0).astype(np.float32)

    torso_iou = mask_iou(warped_mask, partmap == 2)
    if torso_iou < MIN_TORSO_IOU:
        raise SampleGenerationError(f"garment/torso IoU {torso_iou:.3f} below {MIN_TORSO_IOU}")

    return TrainingSample(
        cloth=cloth,
        cloth_mask=cloth_mask,
        person=person,
        layout=layout,
        skeleton=draw_skeleton(h, w, kp),
        partmap=partmap,
        limb=limb,
        flow_gt=flow,
        warped_cloth_gt=warped_cloth.astype(np.float32),
        warped_mask_gt=warped_mask,
        keypoints=kp,
        spec=spec,
        seed=seed,
    )


def gen_pair(spec: GarmentSpec, height: int, width: int, seed: int) -> TrainingSample:
    """Render a paired training sample; retries with derived sub-seeds on a poor garment/torso overlap."""
    _check_size(height, width)
    last = None
    for attempt in range(MAX_RETRIES + 1):
        sub = seed if attempt == 0 else _sub_seed(seed, 100 + attempt)
        try:
            return _build_pair(spec, height, width, sub)
        except SampleGenerationError as exc:
            last = exc
    raise SampleGenerationError(f"seed {seed}: no valid sample after {MAX_RETRIES} retries ({last})")


def sample_seed(dataset_seed: int, index: int) -> int:
    return _sub_seed(dataset_seed, 7, index)


def generate_dataset(n: int, seed: int, height: int = 64, width: int = 48) -> list[TrainingSample]:
    samples = []
    for idx in range(n):
        s = sample_seed(seed, idx)
        spec = GarmentSpec.random(np.random.default_rng(_sub_seed(s, 9)))
        samples.append(gen_pair(spec, height, width, s))
    return samples


def split_dataset(samples: list, holdout_fraction: float = 0.125) -> tuple[list, list]:
    """Deterministic train / held-out split: the last ``holdout_fraction`` of samples are held out."""
    n_hold = max(1, int(round(len(samples) * holdout_fraction)))
    return samples[:-n_hold], samples[-n_hold:]


def validate_sample(sample: TrainingSample, atol: float = 1e-6) -> list[str]:
    """Check the by-construction invariants; returns a list of violations (empty when valid)."""
    problems = []
    mgt = apply_flow_mask(sample.cloth_mask, sample.flow_gt)
    if not np.array_equal(mgt, sample.warped_mask_gt):
        problems.append("warped_mask_gt != apply_flow_mask(cloth_mask, flow_gt)")
    cgt = apply_flow(sample.cloth, sample.flow_gt) * sample.warped_mask_gt[..., None]
    if np.abs(cgt - sample.warped_cloth_gt).max() > atol:
        problems.append("warped_cloth_gt != apply_flow(cloth, flow_gt) * warped_mask_gt")
    region = sample.warped_mask_gt > 0.5
    if np.abs(sample.person[region] - cgt[region]).max(initial=0.0) > atol:
        problems.append("garment region of person differs from the warped garment")
    layout = sample.layout
    if not np.all((layout == 0) | (layout == 1)) or not np.all(layout.sum(-1) == 1):
        problems.append("layout is not one-hot")
    if not np.array_equal(layout[..., 3] > 0.5, region):
        problems.append("clothing channel does not match warped_mask_gt")
    limb_region = (layout[..., 4] + layout[..., 5]) > 0.5
    if np.any(sample.limb[~limb_region] != 0):
        problems.append("limb map nonzero outside limb channels")
    if np.any(sample.limb[limb_region] != sample.person[limb_region]):
        problems.append("limb map differs from person inside limb channels")
    if sample.partmap.min() < 0 or sample.partmap.max() >= N_PARTS:
        problems.append("part map label out of range")
    return problems
