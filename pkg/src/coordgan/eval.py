"""Measurement protocols: label-propagation IOU, swap consistency, grids and map export."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from . import formats
from .config import EvalConfig
from .coordspace import propagate_labels
from .losses import PerceptualExtractor, perceptual_distance

MapFn = Callable[[torch.Tensor], torch.Tensor]


# -- IOU ----------------------------------------------------------------------------

def iou_counts(pred: torch.Tensor, gt: torch.Tensor, num_classes: int):
    """Per-class (intersection, union) pixel counts as int64 arrays."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ in size")
    p = pred.reshape(-1).long().numpy()
    g = gt.reshape(-1).long().numpy()
    inter = np.bincount(p[p == g], minlength=num_classes)[:num_classes]
    area_p = np.bincount(p, minlength=num_classes)[:num_classes]
    area_g = np.bincount(g, minlength=num_classes)[:num_classes]
    return inter.astype(np.int64), (area_p + area_g - inter).astype(np.int64)


def iou_from_counts(inter, union) -> tuple[list[float | None], float]:
    """Per-class IOU (``None`` where the union is empty) and their mean over present classes."""
    per = [None if u == 0 else float(i) / float(u) for i, u in zip(inter, union)]
    present = [v for v in per if v is not None]
    return per, (sum(present) / len(present) if present else float("nan"))


def iou(pred: torch.Tensor, gt: torch.Tensor, num_classes: int) -> tuple[list[float | None], float]:
    return iou_from_counts(*iou_counts(pred, gt, num_classes))


@dataclass
class IouReport:
    per_class: list            # class -> IOU averaged over runs (None if never present)
    mean: float                # averaged over runs
    run_means: list[float]
    runs: int
    reference_ids: list[int]
    num_queries: int
    baseline_mean: float       # permutation baseline, averaged over runs
    baseline_interval: tuple[float, float]  # central 95% of the permutation means
    copy_mean: float           # reference mask pasted unchanged onto every query
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["baseline_interval"] = list(self.baseline_interval)
        return d

    def table(self) -> str:
        lines = [f"{'class':<14}{'IOU':>8}"]
        for i, v in enumerate(self.per_class):
            name = self.class_names[i] if i < len(self.class_names) else str(i)
            lines.append(f"{name:<14}{'-' if v is None else f'{v:.4f}':>8}")
        lines.append(f"{'mean':<14}{self.mean:>8.4f}")
        lines.append("runs: " + ", ".join(f"{m:.4f}" for m in self.run_means))
        lo, hi = self.baseline_interval
        lines.append(f"permutation baseline {self.baseline_mean:.4f} (95% {lo:.4f}..{hi:.4f}); "
                     f"copy-mask {self.copy_mean:.4f}")
        return "\n".join(lines)


IOU_REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class", "mean", "run_means", "runs", "reference_ids", "num_queries",
                 "baseline_mean", "baseline_interval", "copy_mean", "class_names"],
    "properties": {
        "per_class": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        "mean": {"type": "number"},
        "run_means": {"type": "array", "items": {"type": "number"}},
        "runs": {"type": "integer", "minimum": 1},
        "reference_ids": {"type": "array", "items": {"type": "integer"}},
        "num_queries": {"type": "integer", "minimum": 1},
        "baseline_mean": {"type": "number"},
        "baseline_interval": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "copy_mean": {"type": "number"},
        "class_names": {"type": "array", "items": {"type": "string"}},
    },
}


def encoder_maps(models, batch_size: int = 64) -> MapFn:
    """Image batch -> correspondence maps through the encoder's structure code."""
    enc, gen = models.encoder, models.generator

    @torch.no_grad()
    def fn(images):
        out = []
        for chunk in images.split(batch_size):
            w_s, _ = enc(chunk)
            out.append(gen.warp(w_s))
        return torch.cat(out)
    return fn


def split_references(n: int, eval_cfg: EvalConfig, seed: int):
    """Query indices are the first ``queries`` items; references are drawn from the rest."""
    if n <= eval_cfg.queries:
        raise ValueError(f"need more than {eval_cfg.queries} images to hold out references, got {n}")
    rng = np.random.default_rng([seed, 11])
    pool = np.arange(eval_cfg.queries, n)
    refs = rng.choice(pool, size=eval_cfg.runs, replace=len(pool) < eval_cfg.runs)
    return np.arange(eval_cfg.queries), [int(r) for r in refs]


def _run_iou(preds, gts, k):
    inter = np.zeros(k, np.int64)
    union = np.zeros(k, np.int64)
    for p, g in zip(preds, gts):
        i, u = iou_counts(p, g, k)
        inter += i
        union += u
    return inter, union


def eval_label_propagation(map_fn: MapFn, images: torch.Tensor, masks: torch.Tensor, num_classes: int,
                           eval_cfg: EvalConfig, seed: int = 0, class_names=()) -> IouReport:
    """Propagate one reference mask onto every query per run; IOU is accumulated over the query set.

    Alongside the model score the report carries a permutation baseline (the
    reference's pixels shuffled, so only label frequencies survive) and the
    copy-mask score (reference mask pasted unchanged).
    """
    q_idx, refs = split_references(images.shape[0], eval_cfg, seed)
    c_q = map_fn(images[torch.from_numpy(q_idx)])
    gts = masks[torch.from_numpy(q_idx)]
    k = num_classes
    run_means, run_per, base_means, copy_means = [], [], [], []
    rng = np.random.default_rng([seed, 12])
    for ref in refs:
        c_ref = map_fn(images[ref:ref + 1])[0]
        m_ref = masks[ref]
        preds = [propagate_labels(m_ref, c_ref, c_q[j], eval_cfg.tau, k) for j in range(len(q_idx))]
        per, mean = iou_from_counts(*_run_iou(preds, gts, k))
        run_means.append(mean)
        run_per.append(per)
        copy_means.append(iou_from_counts(*_run_iou([m_ref] * len(gts), gts, k))[1])
        flat = m_ref.reshape(-1).numpy()
        for _ in range(eval_cfg.baseline_permutations):
            perm_preds = [torch.from_numpy(rng.permutation(flat).reshape(m_ref.shape)) for _ in gts]
            base_means.append(iou_from_counts(*_run_iou(perm_preds, gts, k))[1])
    per_class = []
    for c in range(k):
        vals = [p[c] for p in run_per if p[c] is not None]
        per_class.append(sum(vals) / len(vals) if vals else None)
    base = np.asarray(base_means)
    return IouReport(
        per_class=per_class,
        mean=float(np.mean(run_means)),
        run_means=[float(m) for m in run_means],
        runs=len(refs),
        reference_ids=refs,
        num_queries=len(q_idx),
        baseline_mean=float(base.mean()),
        baseline_interval=(float(np.quantile(base, 0.025)), float(np.quantile(base, 0.975))),
        copy_mean=float(np.mean(copy_means)),
        class_names=list(class_names),
    )


def identity_propagation_iou(map_fn: MapFn, images, masks, num_classes, tau) -> float:
    """Mean IOU when every image is propagated onto itself through its own map."""
    maps = map_fn(images)
    preds = [propagate_labels(masks[i], maps[i], maps[i], tau, num_classes) for i in range(len(images))]
    return iou_from_counts(*_run_iou(preds, masks, num_classes))[1]


# -- latent codes -----------------------------------------------------------------------

STRUCTURE_STREAM, TEXTURE_STREAM = 21, 22


def code_from_seed(seed: int, dim: int, stream: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, stream]).generate_state(1)[0]))
    return torch.randn(1, dim, generator=g)


@torch.no_grad()
def generate(generator, structure_seed: int, texture_seed: int):
    """One image and its correspondence map from integer seeds -> ``(3,H,W)``, ``(H,W,2)``."""
    n = generator.cfg.latent_dim
    img, coords, _ = generator(code_from_seed(structure_seed, n, STRUCTURE_STREAM),
                               code_from_seed(texture_seed, n, TEXTURE_STREAM))
    return img[0], coords[0]


# -- swap consistency -----------------------------------------------------------------

def _part_colors(images, maps, cells: int):
    """Mean colour of pixels whose correspondence coordinate falls in each canonical cell.

    Returns ``(B, cells*cells, 3)`` means and a ``(B, cells*cells)`` occupancy mask.
    """
    b = images.shape[0]
    ij = ((maps.clamp(-1, 1) + 1) * 0.5 * cells).long().clamp(0, cells - 1)
    cell = (ij[..., 1] * cells + ij[..., 0]).reshape(b, -1)
    cols = images.flatten(2).transpose(1, 2)  # (B, HW, 3)
    n = cells * cells
    sums = torch.zeros(b, n, 3, dtype=images.dtype).scatter_add_(1, cell[..., None].expand(-1, -1, 3), cols)
    counts = torch.zeros(b, n, dtype=images.dtype).scatter_add_(1, cell, torch.ones_like(cell, dtype=images.dtype))
    return sums / counts.clamp_min(1)[..., None], counts > 0


def part_color_distance(x1, c1, x2, c2, cells: int = 4) -> torch.Tensor:
    """Per-pair mean Euclidean distance of part colours over parts present in both images."""
    m1, o1 = _part_colors(x1, c1, cells)
    m2, o2 = _part_colors(x2, c2, cells)
    both = (o1 & o2).to(x1.dtype)
    d = (m1 - m2).norm(dim=-1)
    return (d * both).sum(-1) / both.sum(-1).clamp_min(1)


@dataclass
class SwapReport:
    pairs: int
    texture_swap: float      # perceptual distance, shared structure code
    texture_control: float   # perceptual distance, independent pairs
    structure_swap: float    # part-colour distance, shared texture code
    structure_control: float # part-colour distance, independent pairs
    texture_ratio: float
    structure_ratio: float
    texture_pvalue: float    # one-sided permutation test, swap < control
    structure_pvalue: float

    def to_dict(self):
        return dataclasses.asdict(self)

    def table(self) -> str:
        return "\n".join([
            f"{'metric':<26}{'swap':>10}{'control':>10}{'ratio':>8}{'p':>8}",
            f"{'texture swap (percept.)':<26}{self.texture_swap:>10.4f}{self.texture_control:>10.4f}"
            f"{self.texture_ratio:>8.3f}{self.texture_pvalue:>8.3f}",
            f"{'structure swap (colour)':<26}{self.structure_swap:>10.4f}{self.structure_control:>10.4f}"
            f"{self.structure_ratio:>8.3f}{self.structure_pvalue:>8.3f}",
        ])


def permutation_pvalue(a, b, rounds: int = 2000, seed: int = 0) -> float:
    """One-sided p-value for mean(a) < mean(b) under label exchange."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    pooled = np.concatenate([a, b])
    obs = a.mean() - b.mean()
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(rounds):
        p = rng.permutation(pooled)
        hits += p[:len(a)].mean() - p[len(a):].mean() <= obs
    return (hits + 1) / (rounds + 1)


@torch.no_grad()
def eval_swap_consistency(generator, n_pairs: int, seed: int = 0, extractor=None,
                          cells: int = 4, batch_size: int = 50) -> SwapReport:
    """Texture swaps (shared z_s), structure swaps (shared z_t) and independent controls.

    Pair ``i`` of every family uses codes drawn from one seeded stream, so the
    controls and swaps are matched in count and sampling.
    """
    extractor = extractor or PerceptualExtractor()
    n = generator.cfg.latent_dim
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 31]).generate_state(1)[0]))
    z = torch.randn(4, n_pairs, n, generator=g)
    zs1, zs2, zt1, zt2 = z
    gen = generator

    def render(z_s, z_t):
        out = [gen(a, b)[:2] for a, b in zip(z_s.split(batch_size), z_t.split(batch_size))]
        return torch.cat([o[0] for o in out]), torch.cat([o[1] for o in out])

    def percept(x1, x2):
        return torch.cat([perceptual_distance(a, b, extractor, reduce=False)
                          for a, b in zip(x1.split(batch_size), x2.split(batch_size))])

    x_a, c_a = render(zs1, zt1)
    x_tex, _ = render(zs1, zt2)        # same structure, new texture
    x_str, c_str = render(zs2, zt1)    # same texture, new structure
    x_ind, c_ind = render(zs2, zt2)    # independent
    t_swap = percept(x_a, x_tex)
    t_ctrl = percept(x_a, x_ind)
    s_swap = part_color_distance(x_a, c_a, x_str, c_str, cells)
    s_ctrl = part_color_distance(x_a, c_a, x_ind, c_ind, cells)
    ts, tc, ss, sc = (float(v.mean()) for v in (t_swap, t_ctrl, s_swap, s_ctrl))
    return SwapReport(
        pairs=n_pairs, texture_swap=ts, texture_control=tc, structure_swap=ss, structure_control=sc,
        texture_ratio=ts / tc if tc > 0 else math.nan,
        structure_ratio=ss / sc if sc > 0 else math.nan,
        texture_pvalue=permutation_pvalue(t_swap.numpy(), t_ctrl.numpy(), seed=seed),
        structure_pvalue=permutation_pvalue(s_swap.numpy(), s_ctrl.numpy(), seed=seed),
    )


# -- B variant ----------------------------------------------------------------------------

@torch.no_grad()
def round_trip_error(generator, n: int = 64, seed: int = 0) -> float:
    """Mean Euclidean distance between canonical coordinates and unwarp(warp(canonical))."""
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 41]).generate_state(1)[0]))
    w_s = generator.structure_mapper(torch.randn(n, generator.cfg.latent_dim, generator=g))
    c = generator.warp(w_s)
    back = generator.unwarp(c, w_s)
    return float((back - generator.canonical_batch(n)).norm(dim=-1).mean())


# -- grids & maps -------------------------------------------------------------------------

def colorize_map(coords: torch.Tensor) -> np.ndarray:
    """Fixed coordinate -> colour mapping for display.

    Hue is the angle of ``(x, y)`` around the origin, saturation its radius over
    sqrt(2) and value 1, so every point of the square other than the origin gets
    a distinct colour. Returns ``(H, W, 3)`` uint8.
    """
    c = coords.detach().to(torch.float64).clamp(-1, 1).numpy()
    hue = (np.arctan2(c[..., 1], c[..., 0]) / (2 * np.pi)) % 1.0
    sat = np.hypot(c[..., 0], c[..., 1]) / np.sqrt(2)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    hsv8 = np.round(hsv * 255).clip(0, 255).astype(np.uint8)
    return np.asarray(Image.fromarray(hsv8, mode="HSV").convert("RGB"))


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(3,H,W)`` in [-1, 1] -> ``(H,W,3)`` uint8; out-of-range values are clipped here only."""
    x = ((img.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).numpy()


def grid_array(generator, structure_seeds, texture_seeds) -> np.ndarray:
    """Rows share structure, columns share texture; column 0 shows each row's map."""
    if not structure_seeds or not texture_seeds:
        raise ValueError("grid needs at least one structure seed and one texture seed")
    rows = []
    for s in structure_seeds:
        cells = []
        coords = None
        for t in texture_seeds:
            img, coords = generate(generator, s, t)
            cells.append(to_uint8(img))
        rows.append(np.concatenate([colorize_map(coords)] + cells, axis=1))
    return np.concatenate(rows, axis=0)


def render_grid(generator, structure_seeds, texture_seeds, out_path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid_array(generator, list(structure_seeds), list(texture_seeds))).save(out)
    return out


def export_correspondence(generator, structure_seeds, out_dir) -> list[Path]:
    """One CGCM file per structure seed, named ``s<seed>.cgcm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in structure_seeds:
        _, coords = generate(generator, s, 0)
        p = out / f"s{s}.cgcm"
        formats.write_cgcm(p, coords)
        paths.append(p)
    return paths


def write_report(path, report) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report.to_dict(), indent=2))
    return p
