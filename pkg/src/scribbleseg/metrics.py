"""Overlap and surface-distance metrics plus the per-round report records."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .grid import LabelMap, Spacing

# Above this many surface-pair comparisons the distance-transform path kicks in.
_PAIRWISE_LIMIT = 2 ** 21


def dice(a: LabelMap, b: LabelMap) -> float:
    """2|A n B| / (|A| + |B|) over foreground; two empty masks agree (1.0)."""
    if a.dims != b.dims:
        raise ValidationError("dims mismatch between label maps")
    af = a.labels.astype(bool)
    bf = b.labels.astype(bool)
    size = int(af.sum()) + int(bf.sum())
    if size == 0:
        return 1.0
    return 2.0 * int((af & bf).sum()) / size


def surface_voxels(mask_grid: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbor background (volume border counts)."""
    mask = mask_grid.astype(bool)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(None, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return mask & ~interior


def _surface_coords(mask_grid: np.ndarray, spacing: Spacing) -> np.ndarray:
    surf = surface_voxels(mask_grid)
    coords = np.argwhere(surf).astype(np.float64)  # (n, 3) in z, y, x order
    sx, sy, sz = spacing
    coords *= np.array([sz, sy, sx])
    return coords


def _directed_min_dists(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    mins = np.empty(src.shape[0])
    chunk = max(1, _PAIRWISE_LIMIT // max(1, dst.shape[0]))
    for i0 in range(0, src.shape[0], chunk):
        block = src[i0 : i0 + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        mins[i0 : i0 + block.shape[0]] = np.sqrt(d2.min(axis=1))
    return mins


def assd(a: LabelMap, b: LabelMap, spacing: Spacing = (1.0, 1.0, 1.0), method: str = "auto") -> float:
    """Average symmetric surface distance in mm, spacing-aware.

    ``method`` selects the implementation: "pairwise" (exact brute force),
    "edt" (exact, via a Euclidean distance transform of each surface) or
    "auto" (pairwise below a size threshold, edt above it).
    """
    if a.dims != b.dims:
        raise ValidationError("dims mismatch between label maps")
    if method not in ("auto", "pairwise", "edt"):
        raise ValidationError(f"unknown assd method {method!r}")
    if not a.labels.any() or not b.labels.any():
        raise ValidationError("assd is undefined for an empty mask")
    ga, gb = a.grid, b.grid
    ca = _surface_coords(ga, spacing)
    cb = _surface_coords(gb, spacing)
    if method == "auto":
        method = "pairwise" if ca.shape[0] * cb.shape[0] <= _PAIRWISE_LIMIT else "edt"
    if method == "pairwise":
        d_ab = _directed_min_dists(ca, cb)
        d_ba = _directed_min_dists(cb, ca)
    else:
        sx, sy, sz = spacing
        sampling = (sz, sy, sx)
        to_b = ndimage.distance_transform_edt(~surface_voxels(gb), sampling=sampling)
        to_a = ndimage.distance_transform_edt(~surface_voxels(ga), sampling=sampling)
        d_ab = to_b[surface_voxels(ga)]
        d_ba = to_a[surface_voxels(gb)]
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


@dataclass
class EvalReport:
    """One refinement round: accuracy (when ground truth is known) and stage timings."""

    round: int
    scribble_voxels: int
    dice: float | None = None
    assd: float | None = None
    t_weights: float = 0.0
    t_train: float = 0.0
    t_infer: float = 0.0
    t_graphcut: float = 0.0

    def to_record(self, include_timings: bool = False) -> dict:
        record: dict = {"round": self.round}
        if self.dice is not None:
            record["dice"] = round(self.dice, 6)
        if self.assd is not None:
            record["assd"] = round(self.assd, 6)
        record["scribble_voxels"] = self.scribble_voxels
        if include_timings:
            record["t_weights"] = round(self.t_weights, 4)
            record["t_train"] = round(self.t_train, 4)
            record["t_infer"] = round(self.t_infer, 4)
            record["t_graphcut"] = round(self.t_graphcut, 4)
        return record

    def to_line(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_record(include_timings))


def write_report(reports: list[EvalReport], path, include_timings: bool = False) -> None:
    """Line-delimited report; timings are opt-in so default output is
    byte-reproducible for a fixed seed."""
    with open(path, "w", encoding="ascii") as fh:
        for report in reports:
            fh.write(report.to_line(include_timings))
            fh.write("\n")
