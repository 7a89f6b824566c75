"""On-disk formats: CGCM correspondence maps, indexed mask PNGs, checkpoint directories."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

CGCM_MAGIC = b"CGCM"
CGCM_VERSION = 1
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": ("<f4", torch.float32), "int64": ("<i8", torch.int64)}


class FormatError(ValueError):
    pass


# -- correspondence maps -----------------------------------------------------

def write_cgcm(path, coords) -> None:
    arr = np.asarray(coords.detach().cpu() if isinstance(coords, torch.Tensor) else coords)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise FormatError(f"CGCM stores a single (H, W, 2) map, got shape {arr.shape}")
    h, w, _ = arr.shape
    header = CGCM_MAGIC + struct.pack("<III", CGCM_VERSION, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_cgcm(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != CGCM_MAGIC:
        raise FormatError(f"{path}: not a CGCM file")
    version, h, w = struct.unpack_from("<III", raw, 4)
    if version != CGCM_VERSION:
        raise FormatError(f"{path}: unsupported CGCM version {version}")
    body = raw[16:]
    if len(body) != h * w * 2 * 4:
        raise FormatError(f"{path}: payload size {len(body)} does not match {h}x{w}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    return torch.from_numpy(arr.astype(np.float32))


# -- segmentation masks --------------------------------------------------------

def write_palette(path, palette: Mapping[int, tuple[str, tuple[int, int, int]]]) -> None:
    doc = {str(k): {"name": name, "rgb": list(rgb)} for k, (name, rgb) in sorted(palette.items())}
    Path(path).write_text(json.dumps(doc, indent=2))


def read_palette(path) -> dict[int, tuple[str, tuple[int, int, int]]]:
    doc = json.loads(Path(path).read_text())
    return {int(k): (v["name"], tuple(v["rgb"])) for k, v in doc.items()}


def write_mask(path, labels, palette=None) -> None:
    """Save labels as an 8-bit single-channel PNG, plus ``<stem>.palette.json`` if given."""
    arr = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    if arr.min() < 0 or arr.max() > 255:
        raise FormatError("mask labels must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    if palette is not None:
        write_palette(palette_path_for(path), palette)


def palette_path_for(mask_path) -> Path:
    p = Path(mask_path)
    return p.with_name(p.stem + ".palette.json")


# -- checkpoints ---------------------------------------------------------------

def save_tensors(directory, tensors: Mapping[str, torch.Tensor], meta: dict | None = None,
                 blob: str = "params.bin") -> None:
    """Write ``manifest.json`` plus one little-endian row-major blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(directory / blob, "wb") as fh:
        for name, t in tensors.items():
            t = t.detach().cpu()
            if t.is_floating_point():
                dtype_name = "float32"
            elif t.dtype in (torch.int64, torch.int32, torch.bool):
                dtype_name = "int64"
            else:
                raise FormatError(f"{name}: unsupported dtype {t.dtype}")
            np_dtype = _DTYPES[dtype_name][0]
            data = np.ascontiguousarray(t.numpy().astype(np_dtype)).tobytes()
            fh.write(data)
            index[name] = {"shape": list(t.shape), "dtype": dtype_name, "file": blob,
                           "offset": offset, "nbytes": len(data)}
            offset += len(data)
    manifest = {"version": CHECKPOINT_VERSION, "parameters": index}
    manifest.update(meta or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{directory}: unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_tensors(directory) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blobs: dict[str, bytes] = {}
    out = {}
    for name, entry in manifest["parameters"].items():
        if entry["file"] not in blobs:
            blobs[entry["file"]] = (directory / entry["file"]).read_bytes()
        np_dtype, _ = _DTYPES[entry["dtype"]]
        raw = blobs[entry["file"]][entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return out, manifest
