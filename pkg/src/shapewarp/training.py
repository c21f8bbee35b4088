"""Training loops, checkpoints and the end-to-end inference pipeline.

Each stage trains only its own parameters. Stages that depend on earlier
ones (synthesis) receive frozen models and verify, by parameter hash, that
they were left untouched.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .data_synth import TrainingSample
from .layout import LayoutUNet, extract_limb_skeleton, layout_inputs, semantic_replace, weighted_ce_logits
from .limb_recon import (
    LimbAutoencoder,
    compose,
    extract_limb_map,
    limb_loss,
    limb_region,
    occlusion_mask,
    occlude_person,
    random_patch_mask,
)
from .synthesis import SynthConfig, TryOnSynthesizer, sample as diffusion_sample, training_losses
from .warp_core import mask_iou, misalignment_count, warp
from .warp_net import WarpNet, WarpNetConfig, index_batch, warp_batch

STAGES = ("warp", "layout", "limb", "synth")

STAGE_DEFAULTS = {
    "warp": dict(epochs=30, lr=1e-3, betas=(0.5, 0.999), optimizer="adam", flow_weight=1.0),
    "layout": dict(epochs=30, lr=1e-3, betas=(0.5, 0.999), optimizer="adam"),
    "limb": dict(epochs=30, lr=1e-3, betas=(0.9, 0.999), optimizer="adam"),
    "synth": dict(epochs=50, lr=1e-3, betas=(0.9, 0.999), optimizer="adamw", weight_decay=0.01),
}


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class TrainConfig:
    stage: str = "warp"
    epochs: int = 30
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    batch_size: int = 8
    data_root: str | None = None
    no_shape_attention: bool = False
    no_cotrain: bool = False
    no_limb_network: bool = False
    # weight of the auxiliary flow-regression term (0 gives the plain warp objective)
    flow_weight: float = 0.0
    eval_every: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.betas = tuple(float(b) for b in self.betas)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})

    @property
    def variant(self) -> str:
        tags = [name for flag, name in (
            (self.no_shape_attention, "noatt"),
            (self.no_cotrain, "nocotrain"),
            (self.no_limb_network, "nolimb"),
        ) if flag]
        return "-".join(tags) or "full"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def load_config(path: str | Path | None, stage: str, **overrides) -> TrainConfig:
    """Stage config from an INI file (section named after the stage) plus explicit overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        if parser.has_section(stage):
            types = {f.name: f.type for f in fields(TrainConfig)}
            for key, raw in parser.items(stage):
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in section [{stage}]")
                values[key] = _parse_value(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.for_stage(stage, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "betas":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if raw.lower() in ("true", "yes", "on", "false", "no", "off"):
        return raw.lower() in ("true", "yes", "on")
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def schedule_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Constant for the first half, then a linear decay reaching zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2
    if step <= half:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - half)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list[dict] = field(default_factory=list)
    trend: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    final_loss: float = float("nan")


def _epoch_batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for b in range(n // batch_size):
        yield perm[b * batch_size:(b + 1) * batch_size]


def _run(model, params, cfg: TrainConfig, n: int, step_fn, eval_fn=None, trend_fn=None) -> TrainResult:
    """Shared loop: shuffled batches, scheduled lr, per-epoch log and optional periodic trend probes."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(params, cfg)
    steps_per = max(1, n // cfg.batch_size)
    total = steps_per * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    result = TrainResult(model)
    step = 0
    t0 = time.perf_counter()
    if trend_fn is not None and cfg.eval_every:
        result.trend.append({"step": 0, **trend_fn()})
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for idx in _epoch_batches(n, cfg.batch_size, gen):
            if step >= total:
                break
            for group in opt.param_groups:
                group["lr"] = schedule_lr(step, total, cfg.lr)
            loss = step_fn(idx, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
            if trend_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
                model.eval()
                result.trend.append({"step": step, **trend_fn()})
                model.train()
        model.eval()
        entry = {"epoch": epoch + 1, "step": step, "loss": float(np.mean(losses)) if losses else float("nan")}
        if eval_fn is not None:
            entry.update(eval_fn())
        result.log.append(entry)
        if step >= total:
            break
    model.eval()
    result.seconds = time.perf_counter() - t0
    result.final_loss = result.log[-1]["loss"] if result.log else float("nan")
    return result


# --- warp ---------------------------------------------------------------------

def warp_model_config(cfg: TrainConfig, **kw) -> WarpNetConfig:
    return WarpNetConfig(shape_attention=not cfg.no_shape_attention, cotrain=not cfg.no_cotrain, seed=cfg.seed, **kw)


def warp_loss_terms(out: dict, batch: dict) -> dict:
    rec = L.l_rec(out["c_s"], batch["cloth_norm_gt"], out["c_w_soft"], batch["warped_cloth_gt"])
    per = L.l_per(out["c_s"], batch["cloth_norm_gt"], out["c_w_soft"], batch["warped_cloth_gt"])
    msk = L.l_mask(out["m_w_soft"], batch["warped_mask_gt"])
    flow_err = (out["flow"] - batch["flow_gt"]).norm(dim=1).mean()
    return {"rec": rec, "per": per, "mask": msk, "warp": L.l_warp(rec, per, msk), "flow": flow_err}


@torch.no_grad()
def evaluate_warp(model: WarpNet, batch: dict) -> dict:
    """Held-out IoU, garment L1 inside M_gt, misalignment and in-mask flow error."""
    model.eval()
    out = model(batch)
    m_w = (out["m_w_soft"] >= 0.5).float()
    c_w = warp(batch["cloth"], out["flow"]) * m_w
    m_gt = batch["warped_mask_gt"]
    mw_np, mgt_np = m_w[:, 0].numpy(), m_gt[:, 0].numpy()
    ious = [mask_iou(a, b) for a, b in zip(mw_np, mgt_np)]
    mis = [misalignment_count(a, b) for a, b in zip(mw_np, mgt_np)]
    diff = (c_w - batch["warped_cloth_gt"]).abs().mean(1, keepdim=True) * m_gt
    l1 = (diff.flatten(1).sum(1) / m_gt.flatten(1).sum(1).clamp_min(1.0)).mean()
    epe = ((out["flow"] - batch["flow_gt"]).norm(dim=1, keepdim=True) * m_gt).sum() / m_gt.sum().clamp_min(1.0)
    return {"iou": float(np.mean(ious)), "l1": float(l1), "misalignment_mean": float(np.mean(mis)),
            "flow_epe": float(epe)}


def train_warp(train: list[TrainingSample], held: list[TrainingSample] | None, cfg: TrainConfig,
               net_cfg: WarpNetConfig | None = None) -> TrainResult:
    model = WarpNet(net_cfg or warp_model_config(cfg))
    data = warp_batch(train)
    held_batch = warp_batch(held) if held else None

    def step_fn(idx, _step):
        batch = index_batch(data, idx)
        terms = warp_loss_terms(model(batch), batch)
        return terms["warp"] + cfg.flow_weight * terms["flow"]

    eval_fn = (lambda: evaluate_warp(model, held_batch)) if held_batch is not None else None
    trend_fn = (lambda: {"misalignment_mean": evaluate_warp(model, held_batch)["misalignment_mean"]}) if held_batch is not None else None
    return _run(model, model.parameters(), cfg, len(train), step_fn, eval_fn, trend_fn)


# --- layout -------------------------------------------------------------------

def _nchw(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays).astype(np.float32).transpose(0, 3, 1, 2)))


def layout_tensors(samples: list[TrainingSample], masks=None) -> tuple[torch.Tensor, torch.Tensor]:
    reps = [layout_inputs(s, None if masks is None else masks[k]) for k, s in enumerate(samples)]
    return _nchw(reps), _nchw([s.layout for s in samples])


@torch.no_grad()
def evaluate_layout(model: LayoutUNet, x: torch.Tensor, target: torch.Tensor) -> dict:
    model.eval()
    pred = model.logits(x).argmax(1)
    return {"accuracy": float((pred == target.argmax(1)).float().mean())}


def train_layout(train: list[TrainingSample], held: list[TrainingSample] | None, cfg: TrainConfig) -> TrainResult:
    model = LayoutUNet(seed=cfg.seed)
    x, y = layout_tensors(train)
    held_xy = layout_tensors(held) if held else None

    def step_fn(idx, _step):
        return weighted_ce_logits(model.logits(x[idx]), y[idx])

    eval_fn = (lambda: evaluate_layout(model, *held_xy)) if held_xy is not None else None
    return _run(model, model.parameters(), cfg, len(train), step_fn, eval_fn)


# --- limb ---------------------------------------------------------------------

def limb_tensors(samples: list[TrainingSample]) -> dict[str, torch.Tensor]:
    return {
        "limb": _nchw([extract_limb_map(s.person, s.layout) for s in samples]),
        "layout": _nchw([s.layout for s in samples]),
        "region": _nchw([limb_region(s.layout)[..., None] for s in samples]),
    }


def masked_limb_batch(data: dict, idx, seeds) -> torch.Tensor:
    keeps = [random_patch_mask(data["region"][k, 0].numpy(), int(seed))[0] for k, seed in zip(idx, seeds)]
    return data["limb"][idx] * torch.from_numpy(np.stack(keeps))[:, None]


@torch.no_grad()
def evaluate_limb(model: LimbAutoencoder, data: dict, mask_seed: int | None = None, ratio: float | None = None) -> float:
    """Mean held-out L1 of L_r against L_s inside the limb region.

    ``mask_seed`` masks the input as in training; ``ratio`` forces a fixed masking ratio.
    """
    model.eval()
    limb = data["limb"]
    if ratio is not None or mask_seed is not None:
        keeps = []
        for k in range(limb.shape[0]):
            seed = (mask_seed or 0) * 100003 + k
            rr = None if ratio is None else (ratio, ratio)
            keeps.append(random_patch_mask(data["region"][k, 0].numpy(), seed,
                                           ratio_range=rr or (0.2, 0.75))[0])
        limb = limb * torch.from_numpy(np.stack(keeps))[:, None]
    l_r, _ = model(limb, data["layout"])
    region = data["region"]
    err = ((l_r - data["limb"]).abs() * region).flatten(1).sum(1) / (3 * region.flatten(1).sum(1).clamp_min(1.0))
    return float(err.mean())


def train_limb(train: list[TrainingSample], held: list[TrainingSample] | None, cfg: TrainConfig) -> TrainResult:
    model = LimbAutoencoder(seed=cfg.seed)
    data = limb_tensors(train)
    held_data = limb_tensors(held) if held else None
    rng = np.random.default_rng(cfg.seed)

    def step_fn(idx, _step):
        seeds = rng.integers(0, 2**31 - 1, size=len(idx))
        masked = masked_limb_batch(data, idx, seeds)
        l_r, l_w = model(masked, data["layout"][idx])
        return limb_loss(l_r, l_w, data["limb"][idx], data["region"][idx])

    eval_fn = (lambda: {"l1": evaluate_limb(model, held_data)}) if held_data is not None else None
    return _run(model, model.parameters(), cfg, len(train), step_fn, eval_fn)


# --- pipeline -----------------------------------------------------------------

@dataclass
class Models:
    warp: WarpNet
    layout: LayoutUNet
    limb: LimbAutoencoder
    synth: TryOnSynthesizer | None = None


@torch.no_grad()
def build_composites(models: Models, samples: list[TrainingSample], use_limbs: bool = True,
                     batch_size: int = 64) -> dict[str, np.ndarray]:
    """Run warp, layout estimation and limb reconstruction; returns stacked NHWC arrays.

    Keys: c_w, m_w, s_t, l_r, l_w, i_occ, i_com, m.
    """
    for net in (models.warp, models.layout, models.limb):
        net.eval()
    keys = ("c_w", "m_w", "s_t", "l_r", "l_w", "i_occ", "i_com", "m")
    out: dict[str, list] = {k: [] for k in keys}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        wb = warp_batch(chunk)
        res = models.warp(wb)
        m_w = (res["m_w_soft"] >= 0.5).float()
        c_w = (warp(wb["cloth"], res["flow"]) * m_w).permute(0, 2, 3, 1).numpy()
        m_w = m_w[:, 0].numpy()
        reps = [semantic_replace(s.layout, m_w[k], extract_limb_skeleton(s.shape, s.keypoints), s.keypoints)
                for k, s in enumerate(chunk)]
        s_t = models.layout(_nchw(reps)).permute(0, 2, 3, 1).numpy()
        limbs = _nchw([extract_limb_map(s.person, s.layout) for s in chunk])
        l_r, l_w = models.limb(limbs, torch.from_numpy(np.ascontiguousarray(s_t.transpose(0, 3, 1, 2))))
        l_r = l_r.permute(0, 2, 3, 1).numpy()
        l_w = l_w[:, 0].numpy()
        for k, s in enumerate(chunk):
            i_occ = occlude_person(s.person, s.layout, m_w[k])
            lr_k = l_r[k] if use_limbs else np.zeros_like(l_r[k])
            lw_k = l_w[k] if use_limbs else np.zeros_like(l_w[k])
            out["c_w"].append(c_w[k])
            out["m_w"].append(m_w[k])
            out["s_t"].append(s_t[k])
            out["l_r"].append(lr_k)
            out["l_w"].append(lw_k)
            out["i_occ"].append(i_occ)
            out["i_com"].append(compose(i_occ, c_w[k], m_w[k], lr_k, lw_k, s_t[k]))
            out["m"].append(occlusion_mask(s.layout, m_w[k]))
    return {k: np.stack(v).astype(np.float32) for k, v in out.items()}


def synth_tensors(samples: list[TrainingSample], composites: dict) -> dict[str, torch.Tensor]:
    return {
        "person": _nchw([s.person for s in samples]),
        "cloth": _nchw([s.cloth for s in samples]),
        "i_com": _nchw(list(composites["i_com"])),
        "m": _nchw([m[..., None] for m in composites["m"]]),
    }


@torch.no_grad()
def evaluate_ldm(model: TryOnSynthesizer, data: dict, seed: int = 0, repeats: int = 4) -> float:
    """Noise-prediction MSE averaged over a fixed set of (t, eps) draws."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    vals = [float(training_losses(model, data["person"], data["i_com"], data["m"], data["cloth"], gen)["ldm"])
            for _ in range(repeats)]
    return float(np.mean(vals))


def train_synth(train: list[TrainingSample], held: list[TrainingSample] | None, cfg: TrainConfig,
                models: Models, synth_cfg: SynthConfig | None = None) -> TrainResult:
    """Train the diffusion synthesizer on composites produced by the frozen earlier stages."""
    frozen = (models.warp, models.layout, models.limb)
    before = [param_hash(m) for m in frozen]
    for net in frozen:
        net.requires_grad_(False)
    use_limbs = not cfg.no_limb_network
    data = synth_tensors(train, build_composites(models, train, use_limbs))
    held_data = synth_tensors(held, build_composites(models, held, use_limbs)) if held else None
    model = TryOnSynthesizer(synth_cfg or SynthConfig(seed=cfg.seed))
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    def step_fn(idx, _step):
        return training_losses(model, data["person"][idx], data["i_com"][idx], data["m"][idx], data["cloth"][idx], gen)["syn"]

    eval_fn = (lambda: {"ldm": evaluate_ldm(model, held_data)}) if held_data is not None else None
    result = _run(model, model.parameters(), cfg, len(train), step_fn, eval_fn)
    if [param_hash(m) for m in frozen] != before:
        raise RuntimeError("a frozen prerequisite model changed during synthesis training")
    models.synth = model
    return result


@torch.no_grad()
def infer(models: Models, samples: list[TrainingSample], seed: int = 0, use_limbs: bool = True) -> np.ndarray:
    """Full try-on for paired samples; returns (N, H, W, 3) images in [0, 1]."""
    if models.synth is None:
        raise MissingArtifactError("synthesis model is required for inference")
    comp = build_composites(models, samples, use_limbs)
    data = synth_tensors(samples, comp)
    models.synth.eval()
    out = diffusion_sample(models.synth, data["i_com"], data["m"], data["cloth"], seed)
    return out.permute(0, 2, 3, 1).numpy()


# --- checkpoints --------------------------------------------------------------

def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".npz", ".json") else p
    return base.with_suffix(".npz"), base.with_suffix(".json")


def tagged_checkpoint(out_dir: str | Path, stage: str, variant: str) -> Path:
    return Path(out_dir) / f"{stage}_{variant}"


def save_checkpoint(model: torch.nn.Module, path: str | Path, stage: str, model_config: dict,
                    train_config: dict | None = None, extra: dict | None = None) -> Path:
    npz, sidecar = checkpoint_paths(path)
    npz.parent.mkdir(parents=True, exist_ok=True)
    np.savez(npz, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    meta = {"stage": stage, "model_config": model_config, "train_config": train_config or {},
            "param_hash": param_hash(model), **(extra or {})}
    sidecar.write_text(json.dumps(meta, indent=1))
    return npz


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, dict]:
    npz, sidecar = checkpoint_paths(path)
    if not npz.exists() or not sidecar.exists():
        raise MissingArtifactError(f"checkpoint {npz} or its sidecar {sidecar.name} is missing")
    meta = json.loads(sidecar.read_text())
    stage = meta["stage"]
    mc = meta["model_config"]
    if stage == "warp":
        model = WarpNet(WarpNetConfig(**mc))
    elif stage == "layout":
        model = LayoutUNet(**mc)
    elif stage == "limb":
        model = LimbAutoencoder(**mc)
    elif stage == "synth":
        model = TryOnSynthesizer(SynthConfig(**mc))
    else:
        raise ConfigError(f"unknown checkpoint stage {stage!r}")
    with np.load(npz) as arrays:
        state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    model.load_state_dict(state)
    model.eval()
    return model, meta


def model_config_of(model: torch.nn.Module) -> dict:
    if isinstance(model, WarpNet):
        return model.cfg.to_dict()
    if isinstance(model, TryOnSynthesizer):
        return model.cfg.to_dict()
    return dict(getattr(model, "config", {}))


def write_log(path: str | Path, entries: list[dict]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
