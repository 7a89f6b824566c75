"""Datasets: a procedural face-like family with part masks, plus folder/mask ingestion."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import formats
from .formats import read_palette

log = logging.getLogger(__name__)

CLASSES = ("background", "face", "eye_left", "eye_right", "mouth")
PALETTE_RGB = ((0, 0, 0), (230, 180, 140), (40, 90, 200), (200, 60, 40), (220, 40, 120))
SUPERSAMPLE = 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def class_palette() -> dict[int, tuple[str, tuple[int, int, int]]]:
    return {i: (n, c) for i, (n, c) in enumerate(zip(CLASSES, PALETTE_RGB))}


@dataclass
class SegMask:
    labels: torch.Tensor  # (H, W) int64
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("a mask needs at least one class")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"mask labels outside [0, {self.num_classes})")


@dataclass
class SynthSpec:
    resolution: int = 32
    structure_seed: int = 0
    texture_seed: int = 0
    center_jitter: float = 0.15
    scale_range: tuple[float, float] = (0.7, 1.3)


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) in [-1, 1]
    mask: SegMask
    spec: SynthSpec
    colors: np.ndarray = field(repr=False, default=None)  # (5, 3) part palette in [-1, 1]


def _geometry(spec: SynthSpec) -> dict:
    rng = np.random.default_rng([spec.structure_seed, 1])
    j = spec.center_jitter
    lo, hi = spec.scale_range
    cx, cy = rng.uniform(-j, j, size=2)
    scale = rng.uniform(lo, hi)
    aspect = rng.uniform(0.85, 1.15)
    rx, ry = 0.42 * scale * aspect, 0.5 * scale / aspect
    tilt = rng.uniform(-0.3, 0.3)
    eye_sep = rng.uniform(0.3, 0.48)
    eye_h = rng.uniform(-0.35, -0.15)
    eye_r = rng.uniform(0.14, 0.22)
    mouth_y = rng.uniform(0.35, 0.55)
    mouth_w = rng.uniform(0.25, 0.5)
    mouth_h = rng.uniform(0.07, 0.14)
    return dict(cx=cx, cy=cy, rx=rx, ry=ry, tilt=tilt,
                parts=[  # (class, u, v, ru, rv) in face-local units of (rx, ry)
                    (2, -eye_sep, eye_h, eye_r, eye_r * 0.7),
                    (3, eye_sep, eye_h, eye_r, eye_r * 0.7),
                    (4, 0.0, mouth_y, mouth_w, mouth_h),
                ])


def _palette(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.texture_seed, 2])
    bg = rng.uniform(-1, 1, size=3)
    face = np.array([rng.uniform(0.0, 0.9), rng.uniform(-0.3, 0.6), rng.uniform(-0.6, 0.3)])
    eye = rng.uniform(-1, -0.2, size=3)
    mouth = np.array([rng.uniform(0.3, 1.0), rng.uniform(-1, -0.3), rng.uniform(-0.8, 0.2)])
    return np.stack([bg, face, eye, eye, mouth])


def _labels_at(x, y, geo) -> np.ndarray:
    """Painter's-order class label at normalized points."""
    c, s = np.cos(geo["tilt"]), np.sin(geo["tilt"])
    dx, dy = x - geo["cx"], y - geo["cy"]
    u = (c * dx + s * dy) / geo["rx"]
    v = (-s * dx + c * dy) / geo["ry"]
    lab = np.zeros(x.shape, dtype=np.int64)
    lab[u ** 2 + v ** 2 <= 1] = 1
    for cls, pu, pv, ru, rv in geo["parts"]:
        lab[((u - pu) / ru) ** 2 + ((v - pv) / rv) ** 2 <= 1] = cls
    return lab


def synth_sample(spec: SynthSpec) -> Sample:
    """Anti-aliased render of one face-like layout.

    Geometry depends only on ``structure_seed`` and colours only on
    ``texture_seed``. Each pixel averages a 4x4 grid of sub-samples; the mask
    takes the majority sub-sample class (ties to the smaller index).
    """
    r = spec.resolution
    if r < 16:
        raise ValueError(f"synthetic resolution must be >= 16, got {r}")
    geo, colors = _geometry(spec), _palette(spec)
    step = 2.0 / (r - 1)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    centers = np.linspace(-1, 1, r)
    xs = (centers[:, None] + offs[None] * step).reshape(-1)
    gy, gx = np.meshgrid(xs, xs, indexing="ij")
    lab = _labels_at(gx, gy, geo).reshape(r, SUPERSAMPLE, r, SUPERSAMPLE)
    sub = lab.transpose(0, 2, 1, 3).reshape(r, r, SUPERSAMPLE ** 2)
    img = colors[sub].mean(axis=2)
    counts = np.stack([(sub == k).sum(-1) for k in range(len(CLASSES))], axis=-1)
    mask = counts.argmax(-1)
    image = torch.from_numpy(np.clip(img, -1, 1).transpose(2, 0, 1).astype(np.float32))
    return Sample(image, SegMask(torch.from_numpy(mask), len(CLASSES)), spec, colors)


def pure_pixels(spec: SynthSpec) -> np.ndarray:
    """(H, W) boolean map of pixels whose sub-samples all share one class."""
    r = spec.resolution
    step = 2.0 / (r - 1)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    xs = (np.linspace(-1, 1, r)[:, None] + offs[None] * step).reshape(-1)
    gy, gx = np.meshgrid(xs, xs, indexing="ij")
    sub = _labels_at(gx, gy, _geometry(spec)).reshape(r, SUPERSAMPLE, r, SUPERSAMPLE)
    return (sub == sub[:, :1, :, :1]).all(axis=(1, 3))


class SynthDataset:
    """Fixed-size synthetic set; sample ``i`` uses seeds ``(structure_seed + i, texture_seed + i)``."""

    def __init__(self, size, resolution, structure_seed=0, texture_seed=0):
        self.specs = [SynthSpec(resolution, structure_seed + i, texture_seed + i) for i in range(size)]
        samples = [synth_sample(s) for s in self.specs]
        self.images = torch.stack([s.image for s in samples])
        self.masks = torch.stack([s.mask.labels for s in samples])
        self.num_classes = len(CLASSES)

    def __len__(self):
        return len(self.specs)


class ImageDataset:
    def __init__(self, images: torch.Tensor, masks: torch.Tensor | None = None, num_classes=None):
        self.images, self.masks, self.num_classes = images, masks, num_classes

    def __len__(self):
        return self.images.shape[0]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 3]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the batch consumed at ``step``; a pure function of (seed, epoch)."""
    per_epoch = max(n // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    return epoch_order(n, seed, epoch)[k * batch_size:(k + 1) * batch_size]


# -- folder ingestion --------------------------------------------------------------

def _to_tensor(img: Image.Image, resolution: int) -> torch.Tensor:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def load_image(path, resolution: int) -> torch.Tensor:
    with Image.open(path) as img:
        return _to_tensor(img, resolution)


def load_folder(path, resolution: int) -> Iterator[torch.Tensor]:
    """Yield ``(3, r, r)`` images in sorted filename order; unreadable files are skipped."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no PNG/JPEG images in {path}")
    for f in files:
        try:
            yield load_image(f, resolution)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", f, exc)


def load_mask(path, palette=None, resolution: int | None = None) -> SegMask:
    """Read an 8-bit single-channel mask PNG; the palette fixes the class count."""
    if palette is None:
        from .formats import palette_path_for
        palette = read_palette(palette_path_for(path))
    elif not isinstance(palette, dict):
        palette = read_palette(palette)
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise ValueError(f"{path}: mask must be single-channel, got mode {img.mode}")
        w, h = img.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
        if resolution is not None and side != resolution:
            img = img.resize((resolution, resolution), Image.NEAREST)
        arr = np.asarray(img, dtype=np.int64)
    return SegMask(torch.from_numpy(arr.copy()), len(palette))


def load_manifest(path) -> list[tuple[Path, Path | None]]:
    """Manifest JSON: ``[{"image": ..., "mask": ... or null}, ...]``, relative to the file."""
    root = Path(path).parent
    entries = json.loads(Path(path).read_text())
    out = []
    for e in entries:
        mask = e.get("mask")
        out.append((root / e["image"], root / mask if mask else None))
    return out


def write_manifest(path, entries) -> None:
    doc = [{"image": str(i), "mask": None if m is None else str(m)} for i, m in entries]
    Path(path).write_text(json.dumps(doc, indent=2))


def cache_root() -> Path | None:
    """Cache directory from ``COORDGAN_CACHE``; ``None`` when unset."""
    root = os.environ.get("COORDGAN_CACHE")
    return Path(root) if root else None


def cached_synth(size, resolution, structure_seed, texture_seed, cache: Path | None = None):
    """:class:`SynthDataset` tensors, memoised on disk under ``cache`` when given."""
    if cache is None:
        return SynthDataset(size, resolution, structure_seed, texture_seed)
    d = Path(cache) / "datasets" / f"synth-r{resolution}-n{size}-s{structure_seed}-t{texture_seed}"
    if (d / "manifest.json").exists():
        t, _ = formats.load_tensors(d)
        return ImageDataset(t["images"], t["masks"], len(CLASSES))
    ds = SynthDataset(size, resolution, structure_seed, texture_seed)
    formats.save_tensors(d, {"images": ds.images, "masks": ds.masks},
                         {"kind": "synthetic", "size": size, "resolution": resolution,
                          "structure_seed": structure_seed, "texture_seed": texture_seed})
    return ds


def heldout_synth(eval_cfg, resolution: int, extra_references: int = 32, cache=None):
    """Evaluation images from seeds disjoint from training: queries first, reference pool after."""
    return cached_synth(eval_cfg.queries + extra_references, resolution,
                        eval_cfg.heldout_structure_seed, eval_cfg.heldout_texture_seed, cache)


def build_dataset(data_cfg, resolution: int, cache: Path | None = None):
    cache = cache or cache_root()
    if data_cfg.kind == "synthetic":
        return cached_synth(data_cfg.train_size, resolution, data_cfg.structure_seed,
                            data_cfg.texture_seed, cache)
    if data_cfg.kind == "folder":
        if not data_cfg.path:
            raise ValueError("data.kind = 'folder' needs data.path")
        imgs = list(load_folder(data_cfg.path, resolution))
        return ImageDataset(torch.stack(imgs))
    raise ValueError(f"unknown data.kind {data_cfg.kind!r}")
