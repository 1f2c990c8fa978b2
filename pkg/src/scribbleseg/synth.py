"""Synthetic phantoms, corrupted initial segmentations and the scripted scribbler.

The scribbler stands in for a human: it compares the current prediction to
the ground truth, finds the connected error components (false negatives and
false positives separately, so each component has one correction class),
and drops one short axis-aligned stroke through the innermost voxel of each
of the largest components.  Everything is seeded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .grid import LabelMap, ProbMap, ScribbleSet, Volume

_PLACEMENT_RETRIES = 200


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    blobs: int = 2
    radius: tuple[float, float] = (4.0, 7.0)
    contrast: float = 0.6
    noise: float = 0.05
    background: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.blobs < 0:
            raise ValidationError(f"blob count must be >= 0, got {self.blobs}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValidationError(f"radius range must be positive and ordered, got {self.radius}")
        if not 0 < self.contrast <= 1:
            raise ValidationError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.noise < 0:
            raise ValidationError(f"noise std must be >= 0, got {self.noise}")


def _coordinate_grids(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nz, ny, nx = shape
    zz = np.arange(nz, dtype=np.float64)[:, None, None]
    yy = np.arange(ny, dtype=np.float64)[None, :, None]
    xx = np.arange(nx, dtype=np.float64)[None, None, :]
    return zz, yy, xx


def _place_ellipsoid(
    mask: np.ndarray,
    rng: np.random.Generator,
    radius: tuple[float, float],
    *,
    avoid: np.ndarray | None = None,
) -> bool:
    """Add one random ellipsoid fitting inside the grid; False if impossible."""
    nz, ny, nx = mask.shape
    zz, yy, xx = _coordinate_grids(mask.shape)
    for _ in range(_PLACEMENT_RETRIES):
        rx, ry, rz = rng.uniform(radius[0], radius[1], size=3)
        if 2 * rx + 2 >= nx or 2 * ry + 2 >= ny or 2 * rz + 2 >= nz:
            continue
        cx = rng.uniform(rx + 1, nx - rx - 1)
        cy = rng.uniform(ry + 1, ny - ry - 1)
        cz = rng.uniform(rz + 1, nz - rz - 1)
        if avoid is not None and avoid[int(round(cz)), int(round(cy)), int(round(cx))]:
            continue
        blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2 <= 1.0
        if not blob.any():
            continue
        mask |= blob
        return True
    return False


def make_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Ellipsoid blobs of contrasting intensity on a noisy background."""
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    mask = np.zeros(shape, dtype=bool)
    for _ in range(spec.blobs):
        if not _place_ellipsoid(mask, rng, spec.radius):
            raise ValidationError(f"could not place a blob of radius {spec.radius} in dims {spec.dims}")
    intensity = np.full(shape, spec.background, dtype=np.float64)
    intensity[mask] += spec.contrast
    if spec.noise > 0:
        intensity += rng.normal(0.0, spec.noise, size=shape)
    return Volume.from_grid(intensity.astype(np.float32)), LabelMap.from_grid(mask.astype(np.uint8))


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance to the boundary, positive inside the mask."""
    bound = float(np.linalg.norm(mask.shape))
    if mask.all():
        return np.full(mask.shape, bound)
    if not mask.any():
        return np.full(mask.shape, -bound)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside, -outside)


@dataclass(frozen=True)
class CorruptionSpec:
    boundary_amplitude: float = 1.5
    drop_prob: float = 0.25
    false_positive_blobs: int = 1
    false_positive_radius: tuple[float, float] = (2.0, 3.5)
    sharpness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.boundary_amplitude < 0:
            raise ValidationError("boundary_amplitude must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValidationError("drop_prob must lie in [0, 1]")
        if self.false_positive_blobs < 0:
            raise ValidationError("false_positive_blobs must be >= 0")
        if self.sharpness <= 0:
            raise ValidationError("sharpness must be > 0")


def corrupt_segmentation(gt: LabelMap, spec: CorruptionSpec) -> tuple[LabelMap, ProbMap]:
    """Plausibly wrong initial segmentation plus a matching confidence map.

    Whole ground-truth components may be dropped (false negatives), the
    boundary is wobbled by smooth noise, and small false-positive blobs are
    added.  The probability map follows the corrupted labels through a
    logistic of the signed boundary distance, so it is confident deep inside
    regions and ambiguous near the (possibly wrong) boundary.
    """
    rng = np.random.default_rng(spec.seed)
    mask = gt.grid.astype(bool).copy()

    if spec.drop_prob > 0 and mask.any():
        labeled, ncomp = ndimage.label(mask)
        drops = rng.random(ncomp) < spec.drop_prob
        for ci in range(1, ncomp + 1):
            if drops[ci - 1]:
                mask &= labeled != ci

    if spec.boundary_amplitude > 0 and mask.any() and not mask.all():
        sd = signed_distance(mask)
        rough = ndimage.gaussian_filter(rng.standard_normal(mask.shape), sigma=2.0)
        std = rough.std()
        if std > 0:
            rough /= std
        mask = (sd + spec.boundary_amplitude * rough) > 0

    gt_mask = gt.grid.astype(bool)
    for _ in range(spec.false_positive_blobs):
        _place_ellipsoid(mask, rng, spec.false_positive_radius, avoid=gt_mask)

    labels = LabelMap.from_grid(mask.astype(np.uint8))
    sd_c = signed_distance(mask)
    prob = 1.0 / (1.0 + np.exp(-sd_c / spec.sharpness))
    return labels, ProbMap(gt.dims, np.clip(prob.reshape(-1), 0.0, 1.0).astype(np.float32))


@dataclass(frozen=True)
class ScribblerConfig:
    max_per_round: int = 5
    min_component: int = 10
    length: tuple[int, int] = (3, 10)
    seed: int = 0

    def __post_init__(self):
        if self.max_per_round < 1:
            raise ValidationError("max_per_round must be >= 1")
        if self.min_component < 1:
            raise ValidationError("min_component must be >= 1")
        if not 1 <= self.length[0] <= self.length[1]:
            raise ValidationError(f"length range must be ordered and >= 1, got {self.length}")


def _axis_run(avail: np.ndarray, anchor: tuple[int, int, int], axis: int) -> tuple[int, int]:
    """Extent (lo, hi) of the contiguous available run through anchor along axis."""
    pos = anchor[axis]
    line_index = list(anchor)
    line_index[axis] = slice(None)
    line = avail[tuple(line_index)]
    lo = pos
    while lo > 0 and line[lo - 1]:
        lo -= 1
    hi = pos
    while hi < line.shape[0] - 1 and line[hi + 1]:
        hi += 1
    return lo, hi


def synthesize_scribbles(
    pred: LabelMap,
    gt: LabelMap,
    cfg: ScribblerConfig = ScribblerConfig(),
    existing: ScribbleSet | None = None,
    rng: np.random.Generator | None = None,
) -> ScribbleSet:
    """Corrective scribbles on the largest mis-segmented components.

    Returns only the additions; every emitted voxel is mis-segmented in
    ``pred`` and does not collide with ``existing``.
    """
    if pred.dims != gt.dims:
        raise ValidationError("prediction dims do not match ground truth dims")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    nx, ny, _ = pred.dims
    additions = ScribbleSet(pred.dims)
    taken = np.zeros(pred.grid.shape, dtype=bool)
    if existing is not None:
        if existing.dims != pred.dims:
            raise ValidationError("existing scribble dims do not match prediction dims")
        for idx in existing.union():
            x = idx % nx
            y = (idx // nx) % ny
            z = idx // (nx * ny)
            taken[z, y, x] = True

    pg = pred.grid.astype(bool)
    gg = gt.grid.astype(bool)
    components: list[tuple[int, int, int, np.ndarray]] = []
    for cls, err in ((1, gg & ~pg), (0, pg & ~gg)):
        labeled, ncomp = ndimage.label(err)
        if ncomp == 0:
            continue
        sizes = ndimage.sum_labels(err, labeled, index=np.arange(1, ncomp + 1))
        for ci, size in enumerate(sizes, start=1):
            if size >= cfg.min_component:
                components.append((int(size), cls, ci, labeled))
    # biggest mistakes first; class then component id break ties deterministically
    components.sort(key=lambda item: (-item[0], item[1], item[2]))

    for _, cls, ci, labeled in components[: cfg.max_per_round]:
        comp = labeled == ci
        avail = comp & ~taken
        if not avail.any():
            continue
        depth = ndimage.distance_transform_cdt(comp, metric="taxicab")
        depth = np.where(avail, depth, -1)
        anchor_flat = int(np.argmax(depth))
        anchor = np.unravel_index(anchor_flat, comp.shape)
        length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
        runs = [(_axis_run(avail, anchor, axis), axis) for axis in (2, 1, 0)]  # x, y, z preference
        (lo, hi), axis = max(runs, key=lambda item: item[0][1] - item[0][0])
        start = max(lo, min(anchor[axis] - (length - 1) // 2, hi - length + 1))
        end = min(hi, start + length - 1)
        add = additions.add_foreground if cls == 1 else additions.add_background
        for pos in range(start, end + 1):
            voxel = list(anchor)
            voxel[axis] = pos
            z, y, x = voxel
            add(x + nx * (y + ny * z))
            taken[z, y, x] = True
    return additions
