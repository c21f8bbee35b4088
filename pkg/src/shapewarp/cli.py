"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as D
from . import training as T
from .data_synth import SizingError
from .metrics import psnr, ssim, toy_fid
from .warp_core import apply_flow, read_flo, FlowFormatError
from .warp_net import warp_forward

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _save_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr if arr.ndim == 2 else arr, mode="L" if arr.ndim == 2 else "RGB").save(p)


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise T.MissingArtifactError(f"{what} not given")
    p = Path(path)
    if not p.exists() and not T.checkpoint_paths(p)[0].exists():
        raise T.MissingArtifactError(f"{what} not found: {p}")
    return p


def _load(path: str | None, what: str, stage: str):
    model, meta = T.load_checkpoint(_need(path, what))
    if meta["stage"] != stage:
        raise T.ConfigError(f"{what} {path} holds a {meta['stage']} checkpoint, expected {stage}")
    return model


# --- subcommands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    counts = D.write_dataset(args.out, args.n, args.seed, args.height, args.width)
    problems = {k: v for k, v in D.validate_dir(args.out).items() if v}
    print(json.dumps({"written": counts, "invalid": len(problems)}))
    return EXIT_OK if not problems else 1


def _train_config(args, stage: str) -> T.TrainConfig:
    return T.load_config(
        args.config, stage,
        seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        data_root=args.data, eval_every=getattr(args, "eval_every", None),
        no_shape_attention=True if getattr(args, "no_shape_attention", False) else None,
        no_cotrain=True if getattr(args, "no_cotrain", False) else None,
        no_limb_network=True if getattr(args, "no_limb_network", False) else None,
        flow_weight=getattr(args, "flow_weight", None),
    )


def _finish(result: T.TrainResult, cfg: T.TrainConfig, out: str, stage: str) -> int:
    base = T.tagged_checkpoint(out, stage, cfg.variant)
    T.save_checkpoint(result.model, base, stage, T.model_config_of(result.model), cfg.to_dict(),
                      {"variant": cfg.variant, "seconds": result.seconds})
    T.write_log(f"{base}_log.jsonl", result.log)
    if result.trend:
        T.write_log(f"{base}_trend.jsonl", result.trend)
    print(json.dumps({"checkpoint": str(base) + ".npz", "seconds": round(result.seconds, 1),
                      **(result.log[-1] if result.log else {})}))
    return EXIT_OK


def _splits(data: str):
    return D.read_split(data, "train"), D.read_split(data, "test")


def cmd_train(args) -> int:
    stage = args.stage
    cfg = _train_config(args, stage)
    if stage == "synth":
        models = T.Models(_load(args.warp, "warp checkpoint", "warp"),
                          _load(args.layout, "layout checkpoint", "layout"),
                          _load(args.limb, "limb checkpoint", "limb"))
    train, held = _splits(_need(args.data, "dataset"))
    if stage == "warp":
        result = T.train_warp(train, held, cfg)
    elif stage == "layout":
        result = T.train_layout(train, held, cfg)
    elif stage == "limb":
        result = T.train_limb(train, held, cfg)
    else:
        result = T.train_synth(train, held, cfg, models)
    return _finish(result, cfg, args.out, stage)


def cmd_eval(args) -> int:
    held = D.read_split(_need(args.data, "dataset"), args.split)
    warp_model = _load(args.checkpoint, "warp checkpoint", "warp")
    from .warp_net import warp_batch, finalize_outputs

    batch = warp_batch(held)
    with torch.no_grad():
        outs = finalize_outputs(warp_model(batch), batch)
    stats = T.evaluate_warp(warp_model, batch)
    c_w = np.stack([o.c_w for o in outs])
    c_gt = np.stack([s.warped_cloth_gt for s in held])
    report = {
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(c_w, c_gt)])),
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(c_w, c_gt)])),
        "toy_fid": toy_fid(c_w, c_gt) if len(held) >= 16 else None,
        "iou": stats["iou"],
        "misalignment_mean": stats["misalignment_mean"],
    }
    if args.synth:
        models = T.Models(warp_model, _load(args.layout, "layout checkpoint", "layout"),
                          _load(args.limb, "limb checkpoint", "limb"), _load(args.synth, "synth checkpoint", "synth"))
        tries = T.infer(models, held, seed=args.seed)
        people = np.stack([s.person for s in held])
        report["tryon"] = {
            "ssim": float(np.mean([ssim(a, b) for a, b in zip(tries, people)])),
            "psnr": float(np.mean([psnr(a, b) for a, b in zip(tries, people)])),
            "toy_fid": toy_fid(tries, people) if len(held) >= 16 else None,
        }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_eval_layout(args) -> int:
    held = D.read_split(_need(args.data, "dataset"), args.split)
    model = _load(args.checkpoint, "layout checkpoint", "layout")
    print(json.dumps(T.evaluate_layout(model, *T.layout_tensors(held))))
    return EXIT_OK


def _person_sample(person_dir: str):
    return D.read_sample(_need(person_dir, "person directory"))


def cmd_infer(args) -> int:
    warp_model = _load(args.warp, "warp checkpoint", "warp")
    if args.texture_map:
        target = _person_sample(args.person_dir)
        tex = D.load_rgb(_need(args.texture_map, "texture map"))
        if tex.shape[:2] != target.shape:
            raise T.ConfigError(f"texture map must be {target.shape[0]}x{target.shape[1]}")
        res = warp_forward(warp_model, tex, np.ones(target.shape, np.float32), target.skeleton, target.partmap)
        _save_png(args.out, res.c_w)
        print(json.dumps({"out": args.out, "mode": "texture-map"}))
        return EXIT_OK
    models = T.Models(warp_model, _load(args.layout, "layout checkpoint", "layout"),
                      _load(args.limb, "limb checkpoint", "limb"), _load(args.synth, "synth checkpoint", "synth"))
    if args.person_dir:
        sample = _person_sample(args.person_dir)
        if args.cloth:
            cloth = D.load_rgb(_need(args.cloth, "garment image"))
            mask = (cloth.min(-1) < 0.98).astype(np.float32)
            if args.cloth_mask:
                mask = (np.asarray(D.load_rgb(args.cloth_mask)).mean(-1) > 0.5).astype(np.float32)
            sample.cloth, sample.cloth_mask = cloth, mask
        img = T.infer(models, [sample], seed=args.seed)[0]
        _save_png(args.out, img)
        print(json.dumps({"out": args.out}))
        return EXIT_OK
    held = D.read_split(_need(args.data, "dataset"), args.split)
    imgs = T.infer(models, held, seed=args.seed)
    out = Path(args.out)
    for k, img in enumerate(imgs):
        _save_png(out / f"{k:05d}.png", img)
    print(json.dumps({"out": str(out), "count": len(imgs)}))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for log_path in args.log:
        entries = T.read_log(_need(log_path, "metric log"))
        xs = [e[args.x] for e in entries if args.key in e]
        ys = [e[args.key] for e in entries if args.key in e]
        if not ys:
            raise T.ConfigError(f"{log_path} has no {args.key!r} entries")
        ax.plot(xs, ys, label=Path(log_path).stem)
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.key)
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    print(json.dumps({"out": args.out}))
    return EXIT_OK


def cmd_warp_apply(args) -> int:
    src = D.load_rgb(_need(args.src, "source image"))
    flow = read_flo(_need(args.flow, "flow file"))
    if flow.shape[:2] != src.shape[:2]:
        raise T.ConfigError(f"flow {flow.shape[:2]} and image {src.shape[:2]} sizes differ")
    _save_png(args.out, apply_flow(src, flow))
    print(json.dumps({"out": args.out}))
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _train_parser(sub, name: str, stage: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--data", required=True, help="dataset root written by generate-data")
    p.add_argument("--config", help="INI file with a [%s] section" % stage)
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train, stage=stage)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shapewarp", description="Shape-guided garment warping and try-on at toy scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic paired dataset")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=48)
    g.set_defaults(func=cmd_generate)

    w = _train_parser(sub, "train-warp", "warp", "train the warping network")
    w.add_argument("--no-shape-attention", action="store_true")
    w.add_argument("--no-cotrain", action="store_true")
    w.add_argument("--flow-weight", type=float, help="auxiliary flow-regression weight (0 disables)")
    w.add_argument("--eval-every", type=int, help="record held-out misalignment every N iterations")
    _train_parser(sub, "train-layout", "layout", "train the layout estimator")
    _train_parser(sub, "train-limb", "limb", "pre-train the limb autoencoder")
    s = _train_parser(sub, "train-synth", "synth", "train the diffusion synthesizer")
    for name in ("warp", "layout", "limb"):
        s.add_argument(f"--{name}", help=f"{name} checkpoint (prerequisite)")
    s.add_argument("--no-limb-network", action="store_true")

    e = sub.add_parser("eval", help="metric report for a warp checkpoint (and optionally the try-on stack)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--layout")
    e.add_argument("--limb")
    e.add_argument("--synth")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    el = sub.add_parser("eval-layout", help="held-out argmax accuracy of a layout checkpoint")
    el.add_argument("--checkpoint", required=True)
    el.add_argument("--data", required=True)
    el.add_argument("--split", default="test")
    el.set_defaults(func=cmd_eval_layout)

    i = sub.add_parser("infer", help="try-on inference")
    i.add_argument("--warp", required=True)
    i.add_argument("--layout")
    i.add_argument("--limb")
    i.add_argument("--synth")
    i.add_argument("--cloth", help="garment PNG on white; defaults to the person's paired garment")
    i.add_argument("--cloth-mask")
    i.add_argument("--person-dir", help="sample directory providing person, layout and keypoints")
    i.add_argument("--texture-map", help="warp a full-canvas texture instead of a garment (warp stage only)")
    i.add_argument("--data", help="dataset root; infers every sample of --split when --person-dir is absent")
    i.add_argument("--split", default="test")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="plot a metric from JSONL logs against iteration")
    p.add_argument("--log", nargs="+", required=True)
    p.add_argument("--key", default="misalignment_mean")
    p.add_argument("--x", default="step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    wp = sub.add_parser("warp", help="flow utilities")
    wsub = wp.add_subparsers(dest="warp_command", parser_class=_Parser)
    wa = wsub.add_parser("apply", help="warp an image with a .flo field")
    wa.add_argument("--src", required=True)
    wa.add_argument("--flow", required=True)
    wa.add_argument("--out", required=True)
    wa.set_defaults(func=cmd_warp_apply)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (T.MissingArtifactError, D.DatasetError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (T.ConfigError, SizingError, FlowFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
