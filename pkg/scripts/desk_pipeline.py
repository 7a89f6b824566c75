#!/usr/bin/env python3
"""Train and evaluate the desk models: base and backward-MLP variants, generator then encoder.

Checkpoints land in the run cache (``$COORDGAN_CACHE``, default ``.cache``), the same
entries the acceptance tests look up. Reports go to ``--out``.

    python scripts/desk_pipeline.py --out runs/desk
"""
import argparse
import json
import logging
from pathlib import Path

import torch

from coordgan import eval as ev
from coordgan import formats
from coordgan.config import load_config
from coordgan.data import CLASSES, cache_root, heldout_synth
from coordgan.train import cached_encoder, cached_generator, load_models

REPO = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(REPO / "configs" / "desk.toml"))
    p.add_argument("--out", default=str(REPO / "runs" / "desk"))
    p.add_argument("--variants", default="base,backward", help="comma list of base, backward")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)
    cache = cache_root() or REPO / ".cache"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {"base": [], "backward": ["model.backward_mlp=true"]}
    for name in args.variants.split(","):
        cfg = load_config(args.config, overrides[name])
        gen = cached_generator(cfg, cache)
        enc = cached_encoder(cfg, gen, cache)
        models, _, _ = load_models(enc)
        data = heldout_synth(cfg.eval, cfg.model.resolution, cache=cache)
        iou = ev.eval_label_propagation(ev.encoder_maps(models), data.images, data.masks, data.num_classes,
                                        cfg.eval, seed=cfg.seed, class_names=CLASSES)
        swap = ev.eval_swap_consistency(models.generator, cfg.eval.swap_pairs, seed=cfg.seed)
        ev.write_report(out / f"{name}_iou.json", iou)
        ev.write_report(out / f"{name}_swap.json", swap)
        ev.render_grid(models.generator, range(6), range(6), out / f"{name}_grid.png")
        summary = {"generator": str(gen), "encoder": str(enc),
                   "train_seconds": formats.read_manifest(gen)["elapsed_seconds"]}
        if cfg.model.backward_mlp:
            summary["round_trip_error"] = ev.round_trip_error(models.generator)
        (out / f"{name}_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"== {name}\n{iou.table()}\n{swap.table()}\n{json.dumps(summary, indent=2)}")


if __name__ == "__main__":
    main()
