"""Matching cost volumes over quarter-resolution disparity levels.

All volumes use the layout [N, C, D, H, W]. Level ``d`` pairs left pixel
``x`` with right pixel ``x - d``; where ``x - d < 0`` the right feature is
taken to be a zero vector, so correlations are 0 and the right half of a
concatenation volume is 0.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


def _check_pair(f_l: Tensor, f_r: Tensor, d_levels: int) -> None:
    if f_l.shape != f_r.shape:
        raise ValueError(f"left/right features differ in shape: {f_l.shape} vs {f_r.shape}")
    if f_l.ndim != 4:
        raise ValueError(f"features must be [N, C, H, W], got {f_l.shape}")
    if d_levels < 1:
        raise ValueError(f"d_levels must be at least 1, got {d_levels}")


def _shifted_right(f_r: Tensor, d: int) -> Tensor:
    """Right features moved ``d`` columns to the right, zero-filled on the left."""
    w = f_r.shape[-1]
    if d == 0:
        return f_r
    if d >= w:
        return F.scale(f_r, 0.0)
    return F.pad(f_r[..., : w - d], ((0, 0), (0, 0), (0, 0), (d, 0)))


def build_full_correlation_volume(f_l: Tensor, f_r: Tensor, d_levels: int) -> Tensor:
    """Single-channel volume of channel-averaged inner products, [N, 1, D, H, W]."""
    _check_pair(f_l, f_r, d_levels)
    levels = []
    for d in range(d_levels):
        levels.append(F.mean(f_l * _shifted_right(f_r, d), axis=1, keepdims=True))
    return F.stack(levels, axis=2)


def build_gwc_volume(f_l: Tensor, f_r: Tensor, d_levels: int, n_groups: int) -> Tensor:
    """Group-wise correlation volume, [N, n_groups, D, H, W]."""
    _check_pair(f_l, f_r, d_levels)
    nc = f_l.shape[1]
    if n_groups < 1 or nc % n_groups:
        raise ValueError(f"feature channels Nc={nc} are not divisible into Ng={n_groups} groups")
    return F.group_correlation(f_l, f_r, d_levels, n_groups)


def build_concat_volume(f_l: Tensor, f_r: Tensor, d_levels: int) -> Tensor:
    """Left features stacked on shifted right features, [N, 2C, D, H, W]."""
    _check_pair(f_l, f_r, d_levels)
    left = F.stack([f_l] * d_levels, axis=2)
    right = F.stack([_shifted_right(f_r, d) for d in range(d_levels)], axis=2)
    return F.concat([left, right], axis=1)


def build_combined_volume(gwc: Tensor, concat: Tensor) -> Tensor:
    """Channel concatenation, group-wise correlation channels first."""
    if gwc.ndim != 5 or concat.ndim != 5:
        raise ValueError("volumes must be [N, C, D, H, W]")
    if gwc.shape[0] != concat.shape[0] or gwc.shape[2:] != concat.shape[2:]:
        raise ValueError(f"volume extents differ outside the channel axis: {gwc.shape} vs {concat.shape}")
    return F.concat([gwc, concat], axis=1)


def oracle_volume(kind: str, f_l, f_r, d_levels: int, n_groups: int = 1) -> np.ndarray:
    """Reference volume computed with plain loops, for checking the builders.

    ``kind`` is one of ``"corr"``, ``"gwc"`` or ``"concat"``.
    """
    fl = np.asarray(f_l.data if isinstance(f_l, Tensor) else f_l, dtype=np.float64)
    fr = np.asarray(f_r.data if isinstance(f_r, Tensor) else f_r, dtype=np.float64)
    if fl.shape != fr.shape:
        raise ValueError(f"left/right features differ in shape: {fl.shape} vs {fr.shape}")
    if d_levels < 1:
        raise ValueError(f"d_levels must be at least 1, got {d_levels}")
    n, nc, h, w = fl.shape
    if kind == "corr":
        n_groups = 1
    if kind in ("corr", "gwc"):
        if n_groups < 1 or nc % n_groups:
            raise ValueError(f"feature channels Nc={nc} are not divisible into Ng={n_groups} groups")
        width = nc // n_groups
        out = np.zeros((n, n_groups, d_levels, h, w))
        for b in range(n):
            for d in range(d_levels):
                for y in range(h):
                    for x in range(w):
                        if x - d < 0:
                            continue
                        for g in range(n_groups):
                            acc = 0.0
                            for c in range(g * width, (g + 1) * width):
                                acc += fl[b, c, y, x] * fr[b, c, y, x - d]
                            out[b, g, d, y, x] = acc / width
        return out
    if kind == "concat":
        out = np.zeros((n, 2 * nc, d_levels, h, w))
        for b in range(n):
            for d in range(d_levels):
                for y in range(h):
                    for x in range(w):
                        for c in range(nc):
                            out[b, c, d, y, x] = fl[b, c, y, x]
                            if x - d >= 0:
                                out[b, nc + c, d, y, x] = fr[b, c, y, x - d]
        return out
    raise ValueError(f"unknown volume kind {kind!r}")
