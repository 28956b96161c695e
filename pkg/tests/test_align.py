import numpy as np
import numpy.testing as npt
import pytest

from orion3d.align import (AzimuthDescriptor, align_class, align_pair,
                           align_objects_of_class, assign_orientation_levels,
                           azimuth_descriptor, build_reference_set,
                           profile_quality, shift_profile)
from orion3d.voxel import rotate_points

BIN_W = 360.0 / 32


def safe_cloud(seed, n=400):
    """Points kept away from azimuth-bin and shell boundaries so whole-bin
    rotations shift the histogram exactly."""
    rng = np.random.default_rng(seed)
    abin = rng.integers(0, 32, size=n)
    angle = (abin + rng.uniform(0.2, 0.8, n)) * (2 * np.pi / 32)
    radius = (rng.integers(0, 8, size=n) + rng.uniform(0.2, 0.8, n)) / 8.0
    radius[np.argmax(radius)] = 0.99  # pin the max so shells stay aligned
    z = rng.standard_normal(n)
    pts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), z])
    return pts - pts.mean(axis=0) * [1, 1, 0]  # keep xy centroid at origin


def uniform_ring(n_per_bin=5):
    """Exactly rotation-uniform: one identical cluster in every azimuth bin."""
    angles = (np.arange(32) + 0.5) * (2 * np.pi / 32)
    pts = []
    for k in range(n_per_bin):
        r = 0.5 + 0.5 * k / n_per_bin
        pts.append(np.column_stack([r * np.cos(angles), r * np.sin(angles),
                                    np.full(32, 0.1 * k)]))
    return np.concatenate(pts)


def rot_bins(cloud, bins):
    return rotate_points(cloud, np.deg2rad(bins * BIN_W), center=(0.0, 0.0, 0.0))


class TestDescriptor:
    def test_shape_and_normalization(self):
        d = azimuth_descriptor(safe_cloud(0))
        assert d.hist.shape == (8, 32)
        sums = d.hist.sum(axis=1)
        for s in sums:
            assert s == 0.0 or abs(s - 1.0) < 1e-12

    def test_whole_bin_rotation_shifts_columns(self):
        cloud = safe_cloud(1)
        a = azimuth_descriptor(cloud)
        b = azimuth_descriptor(rot_bins(cloud, 1))
        npt.assert_allclose(np.roll(a.hist, 1, axis=1), b.hist, atol=1e-12)

    def test_multi_bin_rotation(self):
        cloud = safe_cloud(2)
        a = azimuth_descriptor(cloud)
        for s in (3, 9, 17):
            b = azimuth_descriptor(rot_bins(cloud, s))
            npt.assert_allclose(np.roll(a.hist, s, axis=1), b.hist, atol=1e-12)

    def test_scale_invariance_bit_exact(self):
        cloud = safe_cloud(3)
        a = azimuth_descriptor(cloud)
        b = azimuth_descriptor(cloud * 2.0)
        npt.assert_array_equal(a.hist, b.hist)

    def test_translation_invariance(self):
        cloud = safe_cloud(4)
        a = azimuth_descriptor(cloud)
        b = azimuth_descriptor(cloud + np.array([5.0, -3.0, 11.0]))
        npt.assert_allclose(a.hist, b.hist, atol=1e-12)

    def test_uniform_ring_rows(self):
        d = azimuth_descriptor(uniform_ring())
        for row in d.hist:
            if row.sum() > 0:
                npt.assert_allclose(row, row[0], atol=1e-12)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            azimuth_descriptor(np.zeros((0, 3)))

    def test_bins_divisible_by_four(self):
        with pytest.raises(ValueError, match="divisible"):
            azimuth_descriptor(safe_cloud(0), bins=30)


class TestAlignPair:
    def test_identity(self):
        a = azimuth_descriptor(safe_cloud(5))
        shift, err = align_pair(a, a)
        assert shift == 0.0 and err == 0.0

    def test_recovers_exact_shift(self):
        cloud = safe_cloud(6)
        a = azimuth_descriptor(cloud)
        b = azimuth_descriptor(rot_bins(cloud, 2))
        shift, err = align_pair(a, b)
        npt.assert_allclose(shift, 2 * BIN_W)
        assert err < 1e-20

    def test_all_shifts_recovered_within_period(self):
        cloud = safe_cloud(7)
        a = azimuth_descriptor(cloud)
        for s in range(32):
            b = azimuth_descriptor(rot_bins(cloud, s))
            shift, err = align_pair(a, b, period=360)
            npt.assert_allclose(shift, s * BIN_W)
            assert err < 1e-18

    def test_matches_brute_force_scan(self, rng):
        a = azimuth_descriptor(safe_cloud(8))
        b = azimuth_descriptor(safe_cloud(9))
        shift, err = align_pair(a, b)
        # independent enumeration oracle
        best_s, best_e = 0, np.inf
        for s in range(32):
            e = float(((np.roll(a.hist, s, axis=1) - b.hist) ** 2).sum())
            if e < best_e:
                best_s, best_e = s, e
        npt.assert_allclose(shift, best_s * BIN_W)
        npt.assert_allclose(err, best_e, rtol=1e-12)

    def test_period_restricts_search(self):
        cloud = safe_cloud(10)
        a = azimuth_descriptor(cloud)
        b = azimuth_descriptor(rot_bins(cloud, 20))  # 225 degrees
        shift, err = align_pair(a, b, period=90)
        assert 0 <= shift < 90
        assert err > 0  # true shift is outside the window

    def test_dimension_mismatch_rejected(self):
        a = azimuth_descriptor(safe_cloud(11))
        b = azimuth_descriptor(safe_cloud(11), bins=16, shells=8)
        with pytest.raises(ValueError, match="differ"):
            align_pair(a, b)

    def test_tie_breaks_to_smallest_angle(self):
        d = AzimuthDescriptor(np.full((1, 32), 1 / 32), 32, 8)
        shift, err = align_pair(d, d)  # flat: every shift ties at 0
        assert shift == 0.0


class TestProfileQuality:
    def test_sharp_profile_scores_low(self):
        prof = np.ones(32)
        prof[5] = 0.0
        assert profile_quality(prof) < 0.05

    def test_flat_profile_scores_one(self):
        assert profile_quality(np.zeros(32)) == 1.0
        npt.assert_allclose(profile_quality(np.full(32, 0.7)), 1.0)


class TestReferenceSet:
    def test_identical_objects_error_zero_nothing_pruned(self):
        proto = safe_cloud(20)
        rng = np.random.default_rng(0)
        descs = [azimuth_descriptor(rot_bins(proto, int(rng.integers(32))))
                 for _ in range(12)]
        refs, ids, err = build_reference_set(descs, initial_size=100,
                                             prune_fraction=0.1, seed=1)
        assert err < 1e-12
        assert len(ids) == 12  # clamped to class size, nothing pruned
        base = refs[0].hist
        for r in refs[1:]:
            npt.assert_allclose(r.hist, base, atol=1e-12)

    def test_corrupted_object_pruned_first(self):
        proto = safe_cloud(21)
        rng = np.random.default_rng(1)
        descs = [azimuth_descriptor(rot_bins(proto, int(rng.integers(32))))
                 for _ in range(30)]
        descs[7] = azimuth_descriptor(safe_cloud(99))  # impostor
        refs, ids, err = build_reference_set(descs, initial_size=30,
                                             prune_fraction=0.1, floor_size=20,
                                             seed=2)
        assert 7 not in ids

    def test_initial_size_clamped(self):
        proto = safe_cloud(22)
        descs = [azimuth_descriptor(rot_bins(proto, s)) for s in range(5)]
        refs, ids, err = build_reference_set(descs, initial_size=100, seed=0)
        assert len(ids) == 5

    def test_needs_two_objects(self):
        with pytest.raises(ValueError, match="at least 2"):
            build_reference_set([azimuth_descriptor(safe_cloud(0))])


class TestAlignClass:
    def test_recovers_rotations_up_to_global_frame(self):
        proto = safe_cloud(23)
        rng = np.random.default_rng(3)
        shifts = [int(rng.integers(32)) for _ in range(15)]
        clouds = [rot_bins(proto, s) for s in shifts]
        descs = [azimuth_descriptor(c) for c in clouds]
        refs, _, _ = build_reference_set(descs, seed=4)
        result = align_class(descs, refs)
        npt.assert_allclose(result.residuals, 0.0, atol=1e-15)
        # recovered + applied must be constant modulo 360 (the medoid frame)
        total = (result.rotations + np.array(shifts) * BIN_W) % 360.0
        npt.assert_allclose(total, total[0], atol=1e-9)

    def test_rotations_within_period(self):
        proto = safe_cloud(24)
        descs = [azimuth_descriptor(rot_bins(proto, s)) for s in (0, 3, 5, 7, 1, 2)]
        refs, _, _ = build_reference_set(descs, period=90, seed=0)
        result = align_class(descs, refs, period=90)
        assert np.all(result.rotations >= 0) and np.all(result.rotations < 90)

    def test_residual_is_mean_over_references(self):
        proto = safe_cloud(25)
        descs = [azimuth_descriptor(rot_bins(proto, s)) for s in (0, 4, 9)]
        target = azimuth_descriptor(safe_cloud(26))
        result = align_class([target], descs)
        s = int(round(result.rotations[0] / BIN_W))
        manual = np.mean([((np.roll(target.hist, s, axis=1) - r.hist) ** 2).sum()
                          for r in descs])
        npt.assert_allclose(result.residuals[0], manual, rtol=1e-12)


class TestAssignLevels:
    def test_rule_table(self):
        assert assign_orientation_levels(0.1, 0.5, 0.5, threshold=0.2) == 12
        assert assign_orientation_levels(0.5, 0.1, 0.05, threshold=0.2) == 6
        assert assign_orientation_levels(0.5, 0.5, 0.1, threshold=0.2) == 3
        assert assign_orientation_levels(0.5, 0.5, 0.5, threshold=0.2) == 1

    def test_monotone_in_threshold(self):
        errs = (0.3, 0.2, 0.1)
        levels = [assign_orientation_levels(*errs, threshold=t)
                  for t in (0.05, 0.15, 0.25, 0.35)]
        assert levels == sorted(levels)  # lowering threshold never raises K


class TestFullPipeline:
    def test_distinct_prototype_gets_twelve_levels(self):
        proto = safe_cloud(30)
        rng = np.random.default_rng(5)
        clouds = [rot_bins(proto, int(rng.integers(32))) for _ in range(10)]
        result = align_objects_of_class(clouds, threshold=0.25, seed=0)
        assert result.level == 12
        npt.assert_allclose(result.residuals, 0.0, atol=1e-15)

    def test_uniform_prototype_gets_single_level(self):
        ring = uniform_ring()
        rng = np.random.default_rng(6)
        clouds = [rot_bins(ring, int(rng.integers(32))) for _ in range(8)]
        result = align_objects_of_class(clouds, threshold=0.25, seed=0)
        assert result.level == 1
        npt.assert_array_equal(result.rotations, 0.0)
