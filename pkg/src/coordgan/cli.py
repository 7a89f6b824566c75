"""Command-line entry point. Every subcommand is a thin adapter over the library."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from . import eval as ev
from . import formats
from .coordspace import propagate_labels
from .config import ConfigError, TrainConfig, apply_overrides, from_dict, load_config
from .data import (CLASSES, SynthSpec, class_palette, cache_root, heldout_synth, load_image, load_mask,
                   load_manifest, synth_sample, write_manifest)
from .formats import FormatError, write_mask, write_palette
from .nets import FeatureDisabledError
from .train import EncoderTrainer, Trainer, TrainingDiverged, load_models

log = logging.getLogger("coordgan")

USAGE_ERROR, RUNTIME_ERROR = 1, 2
SCHEMA_HINT = ("config files are TOML with optional tables [model], [weights], [data], [eval] "
               "and top-level training keys; see docs/config.md")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_config_args(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, repeatable, last wins")
    p.add_argument("--seed", type=int, help="seed for all randomness of this command")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coordgan", description="Coordinate-frame GAN with dense correspondence.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-gan", help="train generator and critics")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("train-encoder", help="train the encoder against a frozen generator")
    _add_config_args(p)
    p.add_argument("--generator", required=True, help="generator checkpoint directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic image/mask set")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--structure-seed", type=int, default=0)
    p.add_argument("--texture-seed", type=int, default=0)

    p = sub.add_parser("propagate", help="transfer a reference mask onto query images")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True, help="encoder checkpoint directory")
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--query", required=True, action="append")
    p.add_argument("--out", required=True)

    p = sub.add_parser("swap-grid", help="render a structure x texture grid")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--structure-seeds", type=_seed_list, required=True)
    p.add_argument("--texture-seeds", type=_seed_list, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-iou", help="label-propagation IOU on held-out synthetic data")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True, help="encoder checkpoint directory")
    p.add_argument("--manifest", help="image/mask manifest JSON instead of synthetic data")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("eval-swap", help="texture/structure swap consistency with controls")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("export-corr", help="write correspondence maps as CGCM")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--structure-seeds", type=_seed_list)
    p.add_argument("--image", action="append", default=[], help="encode these images instead (needs encoder)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint summary")
    p.add_argument("--ckpt", required=True)
    return parser


# -- helpers ------------------------------------------------------------------------------

def _config(args, base: dict | None = None) -> TrainConfig:
    if args.config is not None and not Path(args.config).exists():
        raise UsageError(f"config file {args.config} not found ({SCHEMA_HINT})")
    try:
        if base is None:
            cfg = load_config(args.config, args.overrides)
        else:
            data = json.loads(json.dumps(base))
            if args.config is not None:
                file_cfg = load_config(args.config).to_dict()
                data.update({k: v for k, v in file_cfg.items() if k in ("eval",)})
            cfg = from_dict(apply_overrides(data, args.overrides))
    except ConfigError as exc:
        raise UsageError(f"{exc} ({SCHEMA_HINT})") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _echo(out, args, cfg: TrainConfig | None) -> Path:
    """Write the resolved config next to ``out``: inside it for directories, as ``<stem>.config.json`` for files."""
    out = Path(out)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        dst = out.with_name(out.stem + ".config.json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        dst = out / "config_echo.json"
    doc = {"command": args.command, "argv": sys.argv[1:], "overrides": getattr(args, "overrides", []),
           "seed": getattr(args, "seed", None), "config": cfg.to_dict() if cfg else None}
    dst.write_text(json.dumps(doc, indent=2))
    return dst


def _load(ckpt):
    return load_models(ckpt)


# -- commands -------------------------------------------------------------------------------

def cmd_train_gan(args):
    if args.resume:
        stored = formats.read_manifest(args.resume)["config"]
        cfg = _config(args, base=stored)
        tr = Trainer.resume(args.resume, args.out, cfg=cfg)
    else:
        cfg = _config(args)
        tr = Trainer(cfg, args.out)
    _echo(args.out, args, cfg)
    tr.run()
    final = tr.save(Path(args.out) / "final")
    print(json.dumps({"checkpoint": str(final), "generator_hash": formats.read_manifest(final)["generator_hash"]}))


def cmd_train_encoder(args):
    gen_cfg = formats.read_manifest(args.generator)["config"]
    cfg = _config(args, base=gen_cfg) if args.config is None else _config(args)
    _echo(args.out, args, cfg)
    tr = EncoderTrainer(cfg, args.generator, args.out)
    tr.run()
    final = tr.save(Path(args.out) / "final")
    print(json.dumps({"checkpoint": str(final)}))


def cmd_synth_data(args):
    cfg = _config(args)
    out = Path(args.out)
    _echo(out, args, cfg)
    palette = class_palette()
    entries = []
    for i in range(args.count):
        s = synth_sample(SynthSpec(cfg.model.resolution, args.structure_seed + i, args.texture_seed + i))
        img_path, mask_path = out / f"img_{i:05d}.png", out / f"img_{i:05d}_mask.png"
        Image.fromarray(ev.to_uint8(s.image)).save(img_path)
        write_mask(mask_path, s.mask.labels, palette)
        entries.append((img_path.name, mask_path.name))
    write_palette(out / "palette.json", palette)
    write_manifest(out / "manifest.json", entries)
    print(json.dumps({"images": args.count, "manifest": str(out / "manifest.json")}))


def cmd_propagate(args):
    models, ckpt_cfg, _ = _load(args.ckpt)
    cfg = _config(args, base=ckpt_cfg.to_dict())
    res = cfg.model.resolution
    out = Path(args.out)
    _echo(out, args, cfg)
    mask = load_mask(args.mask, resolution=res)
    palette = formats.read_palette(formats.palette_path_for(args.mask))
    ref = load_image(args.ref, res)[None]
    queries = torch.stack([load_image(q, res) for q in args.query])
    maps = ev.encoder_maps(models)(torch.cat([ref, queries]))
    written = []
    for q, c in zip(args.query, maps[1:]):
        labels = propagate_labels(mask.labels, maps[0], c, cfg.eval.tau, mask.num_classes)
        p = out / f"{Path(q).stem}_mask.png"
        write_mask(p, labels, palette)
        written.append(str(p))
    print(json.dumps({"masks": written}))


def cmd_swap_grid(args):
    models, ckpt_cfg, _ = _load(args.ckpt)
    cfg = _config(args, base=ckpt_cfg.to_dict())
    _echo(args.out, args, cfg)
    path = ev.render_grid(models.generator, args.structure_seeds, args.texture_seeds, args.out)
    print(json.dumps({"grid": str(path)}))


def cmd_eval_iou(args):
    models, ckpt_cfg, _ = _load(args.ckpt)
    cfg = _config(args, base=ckpt_cfg.to_dict())
    res = cfg.model.resolution
    if args.manifest:
        entries = load_manifest(args.manifest)
        if any(m is None for _, m in entries):
            raise UsageError("every manifest entry needs a mask for IOU evaluation")
        imgs = torch.stack([load_image(i, res) for i, _ in entries])
        masks = [load_mask(m, resolution=res) for _, m in entries]
        k = masks[0].num_classes
        labels = torch.stack([m.labels for m in masks])
        names = []
    else:
        ds = heldout_synth(cfg.eval, res, cache=cache_root())
        imgs, labels, k, names = ds.images, ds.masks, ds.num_classes, list(CLASSES)
    report = ev.eval_label_propagation(ev.encoder_maps(models), imgs, labels, k, cfg.eval,
                                       seed=cfg.seed, class_names=names)
    _echo(args.out, args, cfg)
    ev.write_report(args.out, report)
    print(report.table())


def cmd_eval_swap(args):
    models, ckpt_cfg, _ = _load(args.ckpt)
    cfg = _config(args, base=ckpt_cfg.to_dict())
    pairs = args.pairs if args.pairs is not None else cfg.eval.swap_pairs
    report = ev.eval_swap_consistency(models.generator, pairs, seed=cfg.seed)
    _echo(args.out, args, cfg)
    ev.write_report(args.out, report)
    print(report.table())


def cmd_export_corr(args):
    models, ckpt_cfg, _ = _load(args.ckpt)
    cfg = _config(args, base=ckpt_cfg.to_dict())
    out = Path(args.out)
    _echo(out, args, cfg)
    if not args.structure_seeds and not args.image:
        raise UsageError("export-corr needs --structure-seeds or --image")
    paths = []
    if args.structure_seeds:
        paths += ev.export_correspondence(models.generator, args.structure_seeds, out)
    if args.image:
        imgs = torch.stack([load_image(p, cfg.model.resolution) for p in args.image])
        for p, c in zip(args.image, ev.encoder_maps(models)(imgs)):
            dst = out / f"{Path(p).stem}.cgcm"
            formats.write_cgcm(dst, c)
            paths.append(dst)
    print(json.dumps({"maps": [str(p) for p in paths]}))


def cmd_inspect_ckpt(args):
    m = formats.read_manifest(args.ckpt)
    n_params = sum(int(torch.Size(v["shape"]).numel()) for k, v in m["parameters"].items()
                   if k.startswith("params."))
    summary = {k: m.get(k) for k in ("version", "stage", "iteration", "config_digest", "generator_hash",
                                     "elapsed_seconds", "generator_checkpoint")}
    summary["parameters"] = n_params
    summary["tensors"] = len(m["parameters"])
    print(json.dumps(summary, indent=2))


COMMANDS = {
    "train-gan": cmd_train_gan, "train-encoder": cmd_train_encoder, "synth-data": cmd_synth_data,
    "propagate": cmd_propagate, "swap-grid": cmd_swap_grid, "eval-iou": cmd_eval_iou,
    "eval-swap": cmd_eval_swap, "export-corr": cmd_export_corr, "inspect-ckpt": cmd_inspect_ckpt,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else USAGE_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingDiverged, FormatError, FeatureDisabledError, ConfigError, FileNotFoundError,
            ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
