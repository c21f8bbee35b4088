"""Train every stage briefly on a small synthetic set and run try-on inference.

This is a smoke-scale tour of the library API; the numbers it prints are far
from converged. For the full-scale runs use the CLI (see the README).

Run: python3 demos/tiny_pipeline.py --n 96 --epochs 2 --out demo_out
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
import torch

from shapewarp import training as T
from shapewarp.data_synth import generate_dataset, split_dataset
from shapewarp.dataset import save_rgb
from shapewarp.metrics import psnr, ssim
from shapewarp.synthesis import SynthConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=96)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    torch.set_num_threads(1)

    train, held = split_dataset(generate_dataset(args.n, args.seed))
    print(f"{len(train)} training pairs, {len(held)} held out")

    def cfg(stage):
        return T.TrainConfig.for_stage(stage, epochs=args.epochs, seed=args.seed)

    warp = T.train_warp(train, held, cfg("warp"))
    print("warp:", {k: round(v, 4) for k, v in warp.log[-1].items()})
    layout = T.train_layout(train, held, cfg("layout"))
    print("layout:", layout.log[-1])
    limb = T.train_limb(train, held, cfg("limb"))
    print("limb:", limb.log[-1])

    models = T.Models(warp.model, layout.model, limb.model)
    synth = T.train_synth(train, held, cfg("synth"), models, SynthConfig(seed=args.seed))
    print("synth:", synth.log[-1])

    tries = T.infer(models, held, seed=args.seed)
    people = np.stack([s.person for s in held])
    print("try-on SSIM %.4f  PSNR %.2f" % (np.mean([ssim(a, b) for a, b in zip(tries, people)]),
                                          np.mean([psnr(a, b) for a, b in zip(tries, people)])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(tries[:4]):
        save_rgb(out / f"tryon_{k}.png", np.concatenate([held[k].cloth, img, held[k].person], axis=1))
    print("wrote", out)


if __name__ == "__main__":
    main()
