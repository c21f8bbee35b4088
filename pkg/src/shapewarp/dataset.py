"""Reading and writing synthetic datasets on disk.

Layout: ``<root>/<split>/<id>/`` with PNG images, palette-indexed layout and
part maps, ``skeleton.json`` and ``flow_gt.flo``. Colour images are stored at
8 bits, so arrays read back differ from the generated ones by at most half a
grey level.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data_synth import (
    KEYPOINT_NAMES,
    LAYOUT_NAMES,
    LIMB_KEYPOINTS,
    N_LAYOUT,
    PART_NAMES,
    GarmentSpec,
    TrainingSample,
    draw_skeleton,
    generate_dataset,
    split_dataset,
    validate_sample,
)
from .warp_core import read_flo, write_flo

LAYOUT_PALETTE = (
    (40, 20, 10),     # hair
    (250, 200, 160),  # face
    (40, 60, 140),    # lower body
    (220, 40, 40),    # upper clothes
    (60, 200, 60),    # left arm
    (60, 200, 200),   # right arm
    (0, 0, 0),        # background
)
PART_PALETTE = ((0, 0, 0), (255, 220, 0), (200, 0, 200), (0, 160, 0), (0, 120, 255), (120, 60, 0))
DISK_ATOL = 1.01 / 255.0
SPLITS = ("train", "test")


class DatasetError(FileNotFoundError):
    pass


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(_to_u8(img), mode="RGB").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(_to_u8(mask), mode="L").save(path)


def _save_indexed(path: Path, labels: np.ndarray, palette) -> None:
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = [c for rgb in palette for c in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def load_rgb(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _load_mask(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float32)


def _load_indexed(path: Path) -> np.ndarray:
    im = Image.open(path)
    if im.mode != "P":
        raise DatasetError(f"{path} is not palette-indexed")
    return np.asarray(im, dtype=np.int64)


def write_sample(sample: TrainingSample, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rgb(d / "cloth.png", sample.cloth)
    _save_mask(d / "cloth_mask.png", sample.cloth_mask)
    save_rgb(d / "person.png", sample.person)
    _save_indexed(d / "layout.png", sample.layout.argmax(-1), LAYOUT_PALETTE)
    _save_indexed(d / "partmap.png", sample.partmap, PART_PALETTE)
    save_rgb(d / "limb.png", sample.limb)
    write_flo(sample.flow_gt, d / "flow_gt.flo")
    save_rgb(d / "warped_cloth_gt.png", sample.warped_cloth_gt)
    _save_mask(d / "warped_mask_gt.png", sample.warped_mask_gt)
    meta = {
        "keypoints": {k: [float(v[0]), float(v[1])] for k, v in sample.keypoints.items()},
        "limb_keypoints": list(LIMB_KEYPOINTS),
        "layout_channels": list(LAYOUT_NAMES),
        "part_labels": list(PART_NAMES),
        "seed": sample.seed,
        "garment": None if sample.spec is None else {
            "style": sample.spec.style,
            "base_color": list(map(float, sample.spec.base_color)),
            "logo_color": list(map(float, sample.spec.logo_color)),
            "sleeve": sample.spec.sleeve,
        },
    }
    (d / "skeleton.json").write_text(json.dumps(meta, indent=1))


def read_sample(directory: str | Path) -> TrainingSample:
    d = Path(directory)
    if not (d / "skeleton.json").exists():
        raise DatasetError(f"no sample at {d}")
    meta = json.loads((d / "skeleton.json").read_text())
    kp = {k: (float(v[0]), float(v[1])) for k, v in meta["keypoints"].items()}
    missing = [k for k in KEYPOINT_NAMES if k not in kp]
    if missing:
        raise DatasetError(f"{d / 'skeleton.json'} lacks keypoints {missing}")
    labels = _load_indexed(d / "layout.png")
    mask = _load_mask(d / "warped_mask_gt.png")
    g = meta.get("garment")
    spec = None if g is None else GarmentSpec(g["style"], tuple(g["base_color"]), tuple(g["logo_color"]), g["sleeve"])
    h, w = labels.shape
    return TrainingSample(
        cloth=load_rgb(d / "cloth.png"),
        cloth_mask=_load_mask(d / "cloth_mask.png"),
        person=load_rgb(d / "person.png"),
        layout=np.eye(N_LAYOUT, dtype=np.float32)[labels],
        skeleton=draw_skeleton(h, w, kp),
        partmap=_load_indexed(d / "partmap.png"),
        limb=load_rgb(d / "limb.png"),
        flow_gt=read_flo(d / "flow_gt.flo"),
        warped_cloth_gt=load_rgb(d / "warped_cloth_gt.png") * mask[..., None],
        warped_mask_gt=mask,
        keypoints=kp,
        spec=spec,
        seed=meta.get("seed"),
    )


def write_dataset(root: str | Path, n: int, seed: int, height: int = 64, width: int = 48,
                  holdout_fraction: float = 0.125) -> dict[str, int]:
    """Generate, validate and write a dataset; returns the number of samples per split."""
    samples = generate_dataset(n, seed, height, width)
    for k, s in enumerate(samples):
        problems = validate_sample(s)
        if problems:
            raise ValueError(f"sample {k} failed validation: {problems}")
    train, test = split_dataset(samples, holdout_fraction)
    root = Path(root)
    counts = {}
    for split, items in zip(SPLITS, (train, test)):
        for idx, s in enumerate(items):
            write_sample(s, root / split / f"{idx:05d}")
        counts[split] = len(items)
    (root / "dataset.json").write_text(json.dumps({"n": n, "seed": seed, "height": height, "width": width, **counts}))
    return counts


def read_split(root: str | Path, split: str, limit: int | None = None) -> list[TrainingSample]:
    d = Path(root) / split
    if not d.is_dir():
        raise DatasetError(f"missing dataset split directory {d}")
    dirs = sorted(p for p in d.iterdir() if p.is_dir())
    if limit is not None:
        dirs = dirs[:limit]
    return [read_sample(p) for p in dirs]


def validate_dir(root: str | Path, atol: float = DISK_ATOL) -> dict[str, list[str]]:
    """Run the sample validator over every stored sample at 8-bit tolerance; maps id to problems."""
    report = {}
    for split in SPLITS:
        for s_dir in sorted((Path(root) / split).glob("*")):
            if s_dir.is_dir():
                report[f"{split}/{s_dir.name}"] = validate_sample(read_sample(s_dir), atol=atol)
    return report
