import math

import numpy as np
import pytest

from scribbleseg import (
    CorruptionSpec,
    LabelMap,
    PhantomSpec,
    ScribblerConfig,
    ScribbleSet,
    ValidationError,
    corrupt_segmentation,
    dice,
    make_phantom,
    synthesize_scribbles,
)
from scribbleseg.grid import coord_of

from helpers import cube_labels


class TestPhantom:
    def test_single_sphere_volume_fraction(self):
        spec = PhantomSpec(dims=(32, 32, 32), blobs=1, radius=(5.0, 5.0), contrast=0.6, noise=0.05, seed=3)
        volume, gt = make_phantom(spec)
        count = gt.foreground_count()
        ideal = 4.0 / 3.0 * math.pi * 5.0 ** 3
        assert abs(count - ideal) / ideal < 0.2

    def test_deterministic_per_seed(self):
        spec = PhantomSpec(seed=11)
        v1, g1 = make_phantom(spec)
        v2, g2 = make_phantom(spec)
        assert np.array_equal(v1.data, v2.data)
        assert np.array_equal(g1.labels, g2.labels)

    def test_different_seeds_differ(self):
        v1, _ = make_phantom(PhantomSpec(seed=1))
        v2, _ = make_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(v1.data, v2.data)

    def test_zero_blobs_all_background(self):
        _, gt = make_phantom(PhantomSpec(blobs=0, seed=0))
        assert gt.foreground_count() == 0

    def test_unplaceable_blob_raises(self):
        with pytest.raises(ValidationError):
            make_phantom(PhantomSpec(dims=(8, 8, 8), blobs=1, radius=(10.0, 12.0)))

    def test_blobs_fit_inside_grid(self):
        _, gt = make_phantom(PhantomSpec(dims=(24, 24, 24), blobs=3, radius=(3.0, 6.0), seed=5))
        grid = gt.grid
        assert not grid[0].any() and not grid[-1].any()
        assert not grid[:, 0].any() and not grid[:, -1].any()
        assert not grid[:, :, 0].any() and not grid[:, :, -1].any()


class TestCorruption:
    def test_identity_corruption(self):
        _, gt = make_phantom(PhantomSpec(seed=2))
        spec = CorruptionSpec(boundary_amplitude=0.0, drop_prob=0.0, false_positive_blobs=0, seed=0)
        labels, probs = corrupt_segmentation(gt, spec)
        assert np.array_equal(labels.labels, gt.labels)
        assert dice(labels, gt) == 1.0

    def test_drop_everything(self):
        _, gt = make_phantom(PhantomSpec(blobs=1, seed=4))
        spec = CorruptionSpec(boundary_amplitude=0.0, drop_prob=1.0, false_positive_blobs=0, seed=0)
        labels, probs = corrupt_segmentation(gt, spec)
        assert labels.foreground_count() == 0
        assert dice(labels, gt) == 0.0

    def test_probability_map_tracks_labels(self):
        _, gt = make_phantom(PhantomSpec(seed=6))
        labels, probs = corrupt_segmentation(gt, CorruptionSpec(seed=1))
        fg = labels.labels.astype(bool)
        if fg.any():
            assert probs.prob[fg].mean() > 0.5
        assert probs.prob[~fg].mean() < 0.5

    def test_deterministic(self):
        _, gt = make_phantom(PhantomSpec(seed=7))
        a = corrupt_segmentation(gt, CorruptionSpec(seed=3))
        b = corrupt_segmentation(gt, CorruptionSpec(seed=3))
        assert np.array_equal(a[0].labels, b[0].labels)
        assert np.array_equal(a[1].prob, b[1].prob)

    def test_boundary_amplitude_degrades_dice(self):
        _, gt = make_phantom(PhantomSpec(blobs=2, seed=8))
        mild, _ = corrupt_segmentation(gt, CorruptionSpec(0.5, 0.0, 0, seed=1))
        harsh, _ = corrupt_segmentation(gt, CorruptionSpec(3.0, 0.0, 0, seed=1))
        assert dice(harsh, gt) < dice(mild, gt) <= 1.0


class TestScribbler:
    def test_perfect_prediction_emits_nothing(self):
        _, gt = make_phantom(PhantomSpec(seed=9))
        additions = synthesize_scribbles(gt, gt, ScribblerConfig(seed=0))
        assert len(additions) == 0

    def test_false_negative_cube_gets_foreground_scribble(self):
        dims = (16, 16, 16)
        gt = cube_labels(dims, (4, 4, 4), (9, 9, 9))  # 5^3 cube
        pred = LabelMap(dims, np.zeros(16 ** 3, dtype=np.uint8))
        additions = synthesize_scribbles(pred, gt, ScribblerConfig(seed=1))
        assert len(additions.background) == 0
        assert 3 <= len(additions.foreground) <= 10
        gt_mask = gt.labels.astype(bool)
        for idx in additions.foreground:
            assert gt_mask[idx]

    def test_false_positive_gets_background_scribble(self):
        dims = (16, 16, 16)
        pred = cube_labels(dims, (4, 4, 4), (9, 9, 9))
        gt = LabelMap(dims, np.zeros(16 ** 3, dtype=np.uint8))
        additions = synthesize_scribbles(pred, gt, ScribblerConfig(seed=1))
        assert len(additions.foreground) == 0
        assert len(additions.background) >= 3

    def test_every_scribble_voxel_is_mis_segmented(self):
        for seed in range(20):
            _, gt = make_phantom(PhantomSpec(seed=seed))
            pred, _ = corrupt_segmentation(gt, CorruptionSpec(seed=seed + 100))
            additions = synthesize_scribbles(pred, gt, ScribblerConfig(seed=seed), rng=np.random.default_rng(seed))
            assert len(additions) > 0 or np.array_equal(pred.labels, gt.labels)
            for idx in additions.foreground:
                assert pred.labels[idx] == 0 and gt.labels[idx] == 1
            for idx in additions.background:
                assert pred.labels[idx] == 1 and gt.labels[idx] == 0

    def test_never_overlaps_existing(self):
        dims = (16, 16, 16)
        gt = cube_labels(dims, (4, 4, 4), (12, 12, 12))
        pred = LabelMap(dims, np.zeros(16 ** 3, dtype=np.uint8))
        existing = synthesize_scribbles(pred, gt, ScribblerConfig(seed=2))
        assert len(existing) > 0
        more = synthesize_scribbles(pred, gt, ScribblerConfig(seed=2), existing=existing)
        assert not (more.union() & existing.union())

    def test_scribbles_are_axis_aligned_runs(self):
        dims = (16, 16, 16)
        gt = cube_labels(dims, (3, 3, 3), (13, 13, 13))
        pred = LabelMap(dims, np.zeros(16 ** 3, dtype=np.uint8))
        additions = synthesize_scribbles(pred, gt, ScribblerConfig(seed=3))
        coords = sorted(coord_of(i, dims) for i in additions.foreground)
        varying = [axis for axis in range(3) if len({c[axis] for c in coords}) > 1]
        assert len(varying) <= 1  # a single straight run

    def test_components_below_min_size_ignored(self):
        dims = (16, 16, 16)
        gt = cube_labels(dims, (4, 4, 4), (6, 6, 6))  # 8 voxels < min_component 10
        pred = LabelMap(dims, np.zeros(16 ** 3, dtype=np.uint8))
        additions = synthesize_scribbles(pred, gt, ScribblerConfig(min_component=10, seed=0))
        assert len(additions) == 0

    def test_round_monotone_coverage(self):
        """Cumulative scribbles strictly grow while sizeable errors remain."""
        _, gt = make_phantom(PhantomSpec(seed=13))
        pred, _ = corrupt_segmentation(gt, CorruptionSpec(seed=14))
        cumulative = ScribbleSet(gt.dims)
        last = 0
        for round_no in range(3):
            additions = synthesize_scribbles(
                pred, gt, ScribblerConfig(seed=round_no), existing=cumulative,
                rng=np.random.default_rng(round_no),
            )
            if len(additions) == 0:
                break
            cumulative.update(additions)
            assert len(cumulative) > last
            last = len(cumulative)
        assert last > 0

    def test_largest_component_fixed_first(self):
        dims = (24, 24, 24)
        gt_grid = np.zeros((24, 24, 24), dtype=np.uint8)
        gt_grid[2:12, 2:12, 2:12] = 1  # 1000-voxel error
        gt_grid[16:19, 16:19, 16:19] = 1  # 27-voxel error
        gt = LabelMap.from_grid(gt_grid)
        pred = LabelMap(dims, np.zeros(24 ** 3, dtype=np.uint8))
        additions = synthesize_scribbles(pred, gt, ScribblerConfig(max_per_round=1, seed=0))
        big = {i for i in additions.foreground}
        for idx in big:
            x, y, z = coord_of(idx, dims)
            assert 2 <= x < 12 and 2 <= y < 12 and 2 <= z < 12
