"""Coordinate-frame math: canonical maps, correspondence transfer, chamfer, warping.

Coordinate maps are tensors of shape ``(..., H, W, 2)`` whose last axis holds
``(x, y)`` with ``x`` horizontal. Pixel ``(i, j)`` of the canonical map holds
``x = 2j/(W-1) - 1`` and ``y = 2i/(H-1) - 1``. Everything here is a pure
function of its inputs and differentiable wherever that makes sense.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

# Above this many target pixels the affinity is evaluated in row blocks.
DENSE_AFFINITY_LIMIT = 64 * 64
ROW_BLOCK = 1024


class CoordinateRangeError(ValueError):
    pass


def make_canonical(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    if height < 2 or width < 2:
        raise ValueError(f"canonical map needs height, width >= 2, got {height}x{width}")
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    # linspace hits the endpoints exactly, so corners are exactly +-1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def check_range(coords: torch.Tensor, strict: bool = False) -> torch.Tensor:
    """Raise if any coordinate leaves [-1, 1] (or (-1, 1) when ``strict``)."""
    if coords.shape[-1] != 2:
        raise ValueError(f"coordinate maps end in a size-2 axis, got shape {tuple(coords.shape)}")
    c = coords.detach()
    if not torch.isfinite(c).all():
        raise CoordinateRangeError("coordinate map contains non-finite values")
    bad = (c.abs() >= 1).any() if strict else (c.abs() > 1).any()
    if bad:
        raise CoordinateRangeError(
            f"coordinate map leaves the valid range (max |c| = {c.abs().max().item():.6g})"
        )
    return coords


def _flat(coords: torch.Tensor) -> torch.Tensor:
    if coords.dim() < 3 or coords.shape[-1] != 2:
        raise ValueError(f"expected (..., H, W, 2) coordinates, got {tuple(coords.shape)}")
    if coords.shape[-2] == 0 or coords.shape[-3] == 0:
        raise ValueError("coordinate map is empty")
    return coords.reshape(*coords.shape[:-3], -1, 2)


def sq_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances between point sets ``(..., N, 2)`` and ``(..., M, 2)``.

    Evaluated term by term, so equal points give exactly 0.
    """
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(-1)


def sq_distances_mm(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Same as :func:`sq_distances` through ``|a|^2 + |b|^2 - 2ab``.

    Much faster for large sets; entries carry rounding-level error and may dip
    slightly below 0.
    """
    aa = (a * a).sum(-1, keepdim=True)
    bb = (b * b).sum(-1).unsqueeze(-2)
    if a.dim() == 3 and b.dim() == 3:
        d = torch.baddbmm(bb, a, b.transpose(-1, -2), alpha=-2.0)
    else:
        d = bb - 2 * a @ b.transpose(-1, -2)
    return d + aa


def hard_transfer(c1: torch.Tensor, c2: torch.Tensor) -> torch.Tensor:
    """For every pixel of ``c1`` the row-major index of the nearest coordinate in ``c2``.

    Returns an integer tensor shaped like ``c1`` without the last axis. Ties go
    to the smallest index.
    """
    a, b = _flat(c1), _flat(c2)
    idx = sq_distances(a, b).argmin(dim=-1)
    return idx.reshape(c1.shape[:-1])


def _affinity_logits(c_target: torch.Tensor, c_source: torch.Tensor, tau: float) -> torch.Tensor:
    # -(|a|^2 + |b|^2 - 2ab) / tau without the |a|^2 term, which is constant along
    # each softmax row; one fused baddbmm instead of three full passes
    bb = (c_source * c_source).sum(-1).unsqueeze(-2) * (-1.0 / tau)
    if c_target.dim() == 3 and c_source.dim() == 3:
        return torch.baddbmm(bb, c_target, c_source.transpose(-1, -2), alpha=2.0 / tau)
    return bb + (2.0 / tau) * (c_target @ c_source.transpose(-1, -2))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"affinity temperature must be positive, got {tau}")


def soft_affinity(c_target: torch.Tensor, c_source: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-stochastic affinity ``(..., HW_target, HW_source)``.

    Row ``q`` is the softmax over source pixels ``p`` of ``-|c_t(q) - c_s(p)|^2 / tau``.
    """
    _check_tau(tau)
    a, b = _flat(c_target), _flat(c_source)
    return torch.softmax(_affinity_logits(a, b, tau), dim=-1)


def _blocked_apply(a: torch.Tensor, b: torch.Tensor, values: torch.Tensor, tau: float) -> torch.Tensor:
    # values: (..., HW_source, C) -> (..., HW_target, C)
    n = a.shape[-2]
    if n <= DENSE_AFFINITY_LIMIT:
        return torch.softmax(_affinity_logits(a, b, tau), dim=-1) @ values
    out = []
    for start in range(0, n, ROW_BLOCK):
        blk = a[..., start:start + ROW_BLOCK, :]
        out.append(torch.softmax(_affinity_logits(blk, b, tau), dim=-1) @ values)
    return torch.cat(out, dim=-2)


def warp_image(x_source: torch.Tensor, c_source: torch.Tensor, c_target: torch.Tensor, tau: float) -> torch.Tensor:
    """Pull source pixel values into the target frame through the soft affinity.

    ``x_source`` is ``(..., C, H, W)`` matching ``c_source``'s ``(..., H, W, 2)``;
    the result is ``(..., C, H_t, W_t)``.
    """
    _check_tau(tau)
    if x_source.shape[-2:] != c_source.shape[-3:-1]:
        raise ValueError(
            f"image spatial dims {tuple(x_source.shape[-2:])} do not match "
            f"coordinate map dims {tuple(c_source.shape[-3:-1])}"
        )
    ht, wt = c_target.shape[-3:-1]
    vals = x_source.flatten(-2).transpose(-1, -2)
    out = _blocked_apply(_flat(c_target), _flat(c_source), vals, tau)
    return out.transpose(-1, -2).reshape(*out.shape[:-2], x_source.shape[-3], ht, wt)


def _gather_distance(a: torch.Tensor, b: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    nn_pts = torch.gather(b, -2, idx.unsqueeze(-1).expand(*idx.shape, 2))
    d2 = (a - nn_pts).pow(2).sum(-1)
    pos = d2 > 0
    return torch.where(pos, d2.clamp_min(torch.finfo(d2.dtype).tiny).sqrt(), torch.zeros_like(d2))


def chamfer(c_canon: torch.Tensor, c_warped: torch.Tensor) -> torch.Tensor:
    """Symmetric chamfer distance between two coordinate sets.

    Mean over canonical points of the distance to the closest warped point,
    plus the mean over warped points of the distance to the closest canonical
    point. Batched inputs give one value per leading index.

    Neighbours are found with the fast expansion; distances are then
    recomputed exactly at the chosen pairs, so coincident sets give exactly 0
    and gradients are those of the selected pairs.
    """
    a, b = _flat(c_canon), _flat(c_warped)
    with torch.no_grad():
        ia = sq_distances_mm(a, b).argmin(dim=-1)
        ib = sq_distances_mm(b, a).argmin(dim=-1)
    return _gather_distance(a, b, ia).mean(-1) + _gather_distance(b, a, ib).mean(-1)


def chamfer_to_canonical(c_warped: torch.Tensor) -> torch.Tensor:
    """:func:`chamfer` against the canonical grid of the same size.

    The warped -> canonical half snaps each point to its nearest grid node by
    rounding instead of searching, since the canonical frame is a regular grid.
    """
    h, w = c_warped.shape[-3:-1]
    b = _flat(c_warped)
    a = _flat(make_canonical(h, w, dtype=c_warped.dtype, device=c_warped.device))
    a = a.expand(*b.shape[:-2], *a.shape)
    with torch.no_grad():
        ia = sq_distances_mm(a, b).argmin(dim=-1)
        col = ((b[..., 0] + 1) * 0.5 * (w - 1)).round().clamp(0, w - 1).long()
        row = ((b[..., 1] + 1) * 0.5 * (h - 1)).round().clamp(0, h - 1).long()
        ib = row * w + col
    return _gather_distance(a, b, ia).mean(-1) + _gather_distance(b, a, ib).mean(-1)


def propagate_labels(
    mask_ref: torch.Tensor,
    c_ref: torch.Tensor,
    c_query: torch.Tensor,
    tau: float,
    num_classes: int | None = None,
) -> torch.Tensor:
    """Transfer a reference label map onto a query frame by coordinate matching.

    Each query pixel takes the argmax of affinity-weighted one-hot votes;
    ties go to the smallest class index. ``tau = 0`` is the zero-temperature
    limit: every query pixel copies the label of its nearest reference
    coordinate.
    """
    if tau != 0:
        _check_tau(tau)
    if mask_ref.shape[-2:] != c_ref.shape[-3:-1]:
        raise ValueError("mask and reference coordinate map differ in size")
    if num_classes is None:
        num_classes = int(mask_ref.max().item()) + 1 if mask_ref.numel() else 0
    if num_classes < 1:
        raise ValueError("propagation needs at least one class")
    if tau == 0:
        flat = mask_ref.flatten(-2)
        idx = hard_transfer(c_query, c_ref).flatten(-2)
        return torch.gather(flat.expand(*idx.shape[:-1], flat.shape[-1]), -1, idx).reshape(c_query.shape[:-1])
    onehot = F.one_hot(mask_ref.long().flatten(-2), num_classes).to(c_ref.dtype)
    votes = _blocked_apply(_flat(c_query), _flat(c_ref), onehot, tau)
    return votes.argmax(dim=-1).reshape(c_query.shape[:-1])
