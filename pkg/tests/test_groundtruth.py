"""Ground-truth map synthesis: conservation, symmetry, pyramid layout."""

import numpy as np
import pytest

from crowdflow.groundtruth import (
    HeadAnnotation, adaptive_sigmas, augment, density_map, heads_by_frame,
    hflip, load_annotations, load_meta, localization_map, multiscale_targets,
    save_annotations, save_meta, split_patches, trajectories,
)


class TestDensityMap:
    def test_single_center_head_has_unit_mass(self):
        m = density_map([(32.0, 32.0)], 64, 64, adaptive=False, sigma_fixed=4.0)
        assert abs(m.sum() - 1.0) < 1e-9

    def test_count_conservation_random_sets(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 40))
            heads = np.column_stack([rng.uniform(0, 64, n), rng.uniform(0, 48, n)])
            m = density_map(heads, 64, 48)
            assert abs(m.sum() - n) <= 1e-6 * n

    def test_border_head_keeps_unit_mass(self):
        m = density_map([(0.0, 0.0), (63.0, 47.0)], 64, 48, adaptive=False,
                        sigma_fixed=4.0)
        assert abs(m.sum() - 2.0) < 1e-9

    def test_tiny_sigma_between_pixels_keeps_unit_mass(self):
        # a sub-pixel truncation radius must still reach the nearest
        # pixel, or heads silently vanish from coarse pyramid levels
        m = density_map([(1.5, 2.5)], 4, 4, sigmas=[0.05])
        assert abs(m.sum() - 1.0) < 1e-12

    def test_flip_equivariance(self, rng):
        w, h = 40, 32
        heads = np.column_stack([rng.uniform(0, w - 1, 12),
                                 rng.uniform(0, h - 1, 12)])
        flipped = np.column_stack([w - 1.0 - heads[:, 0], heads[:, 1]])
        a = density_map(flipped, w, h)
        b = density_map(heads, w, h)[:, ::-1]
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_out_of_bounds_head_rejected(self):
        with pytest.raises(ValueError, match="head 1"):
            density_map([(3.0, 3.0), (64.0, 2.0)], 64, 64)

    def test_non_negative(self, rng):
        heads = np.column_stack([rng.uniform(0, 32, 6), rng.uniform(0, 32, 6)])
        assert density_map(heads, 32, 32).min() >= 0.0

    def test_empty_head_set_gives_zero_map(self):
        m = density_map(np.zeros((0, 2)), 16, 16)
        assert m.shape == (16, 16)
        assert m.sum() == 0.0


class TestAdaptiveSigmas:
    def test_lone_head_falls_back_to_fixed(self):
        assert adaptive_sigmas([(5.0, 5.0)], sigma_fixed=4.0) == [4.0]

    def test_mean_neighbor_rule(self):
        # three collinear heads 10 apart: ends see {10, 20}, middle {10, 10}
        pts = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]
        sig = adaptive_sigmas(pts, beta=0.3, k_neighbors=3)
        np.testing.assert_allclose(sig, [0.3 * 15, 0.3 * 10, 0.3 * 15])

    def test_clamped_to_range(self):
        tight = adaptive_sigmas([(0.0, 0.0), (0.5, 0.0)], beta=0.3)
        wide = adaptive_sigmas([(0.0, 0.0), (500.0, 0.0)], beta=0.3)
        assert tight.min() >= 1.0
        assert wide.max() <= 16.0


class TestLocalizationMap:
    def test_single_head_unique_peak_of_one(self):
        m = localization_map([(20.0, 12.0)], 40, 30, sigma_loc=3.0)
        assert m.max() == 1.0
        assert np.argwhere(m == 1.0).tolist() == [[12, 20]]

    def test_midpoint_of_two_heads_two_sigma_apart(self):
        m = localization_map([(10.0, 10.0), (16.0, 10.0)], 32, 24, sigma_loc=3.0)
        assert abs(m[10, 13] - np.exp(-0.5)) < 1e-12

    def test_values_in_unit_interval(self, rng):
        heads = np.column_stack([rng.uniform(0, 32, 10), rng.uniform(0, 24, 10)])
        m = localization_map(heads, 32, 24)
        assert m.min() >= 0.0 and m.max() <= 1.0

    def test_overlaps_combine_by_max(self, rng):
        a = [(8.0, 8.0), (11.0, 8.0)]
        both = localization_map(a, 24, 24)
        first = localization_map(a[:1], 24, 24)
        second = localization_map(a[1:], 24, 24)
        assert np.max(np.abs(both - np.maximum(first, second))) <= 1e-12

    def test_fractional_head_peaks_at_nearest_pixel(self):
        m = localization_map([(5.4, 7.6)], 16, 16)
        assert m[8, 5] == 1.0


class TestMultiscale:
    def test_pyramid_extents(self):
        dens, locs = multiscale_targets([(30.0, 20.0)], 64, 64)
        assert [d.shape for d in dens] == [(8, 8), (16, 16), (32, 32), (64, 64)]
        assert [loc.shape for loc in locs] == [(8, 8), (16, 16), (32, 32), (64, 64)]

    def test_conservation_at_every_scale(self, rng):
        n = 15
        heads = np.column_stack([rng.uniform(0, 64, n), rng.uniform(0, 48, n)])
        dens, _ = multiscale_targets(heads, 64, 48)
        for d in dens:
            assert abs(d.sum() - n) <= 1e-6 * n

    def test_peaks_track_rescaled_coordinates(self):
        dens, locs = multiscale_targets([(40.0, 24.0)], 64, 64, adaptive=False,
                                        sigma_fixed=2.0)
        for s, loc in enumerate(locs, start=1):
            f = 2 ** (4 - s)
            peak = np.unravel_index(np.argmax(loc), loc.shape)
            assert peak == (24 // f, 40 // f)

    def test_indivisible_extents_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            multiscale_targets([(3.0, 3.0)], 60, 64)


class TestAugment:
    def test_hflip_is_an_involution(self, rng):
        frame = rng.normal(size=(3, 8, 10))
        heads = [[(2.0, 3.0, 7), (9.0, 0.0, 8)]]
        (f1,), h1 = hflip([frame], heads, 10)
        (f2,), h2 = hflip([f1], h1, 10)
        np.testing.assert_array_equal(f2, frame)
        assert h2 == heads

    def test_crop_shifts_and_drops_heads(self, rng):
        frames = [np.arange(64, dtype=float).reshape(1, 8, 8)] * 2
        heads = [[(1.0, 1.0, 0), (6.0, 6.0, 1)]] * 2
        out_frames, out_heads = augment(
            frames, heads, np.random.default_rng(0), crop=(4, 4), flip_prob=0.0)
        assert out_frames[0].shape == (1, 4, 4)
        for hs in out_heads:
            for x, y, _ in hs:
                assert 0 <= x < 4 and 0 <= y < 4

    def test_deterministic_given_seed(self, rng):
        frames = [rng.normal(size=(3, 12, 16)) for _ in range(2)]
        heads = [[(4.0, 5.0, 1), (10.0, 2.0, 2)], [(4.5, 5.5, 1)]]
        a = augment(frames, heads, np.random.default_rng(42), crop=(8, 8))
        b = augment(frames, heads, np.random.default_rng(42), crop=(8, 8))
        for fa, fb in zip(a[0], b[0]):
            np.testing.assert_array_equal(fa, fb)
        assert a[1] == b[1]

    def test_both_frames_get_identical_transform(self, rng):
        frame = rng.normal(size=(1, 8, 8))
        out_frames, _ = augment([frame, frame.copy()], [[], []],
                                np.random.default_rng(3), crop=(4, 4))
        np.testing.assert_array_equal(out_frames[0], out_frames[1])

    def test_oversized_crop_rejected(self, rng):
        with pytest.raises(ValueError, match="crop"):
            augment([rng.normal(size=(1, 4, 4))], [[]],
                    np.random.default_rng(0), crop=(8, 8))


class TestSplitPatches:
    def test_full_hd_quarters(self):
        frame = np.zeros((1, 1080, 1920), dtype=np.uint8)
        heads = [(100.0, 100.0, 0), (1000.0, 600.0, 1)]
        patches = split_patches(frame, heads)
        assert len(patches) == 4
        assert all(p.shape == (1, 540, 960) for p, _ in patches)
        assert patches[0][1] == [(100.0, 100.0, 0)]
        assert patches[3][1] == [(1000.0 - 960.0, 600.0 - 540.0, 1)]

    def test_odd_extents_rejected(self):
        with pytest.raises(ValueError, match="even"):
            split_patches(np.zeros((1, 7, 8)), [])


class TestAnnotationFiles:
    def test_csv_round_trip(self, tmp_path):
        anns = [HeadAnnotation(0, 3, 1.25, 2.5), HeadAnnotation(1, 3, 1.5, 2.75),
                HeadAnnotation(0, 4, 60.0, 30.0)]
        path = tmp_path / "annotations.csv"
        save_annotations(path, anns)
        loaded = load_annotations(path)
        assert sorted(loaded, key=lambda a: (a.frame, a.ident)) == sorted(
            anns, key=lambda a: (a.frame, a.ident))

    def test_duplicate_identity_in_frame_rejected(self, tmp_path):
        path = tmp_path / "annotations.csv"
        path.write_text("frame,id,x,y\n0,1,2.0,3.0\n0,1,4.0,5.0\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_annotations(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "annotations.csv"
        path.write_text("f,i,x,y\n")
        with pytest.raises(ValueError, match="header"):
            load_annotations(path)

    def test_meta_round_trip(self, tmp_path):
        path = tmp_path / "meta.json"
        save_meta(path, 128, 96, 40, attributes={"illumination": "cloudy"})
        doc = load_meta(path)
        assert doc["width"] == 128 and doc["frame_count"] == 40
        assert doc["attributes"]["illumination"] == "cloudy"

    def test_grouping_helpers(self):
        anns = [HeadAnnotation(0, 1, 1.0, 2.0), HeadAnnotation(1, 1, 2.0, 2.0),
                HeadAnnotation(0, 2, 5.0, 5.0)]
        frames = heads_by_frame(anns)
        assert len(frames) == 2
        assert (1.0, 2.0, 1) in frames[0]
        trajs = trajectories(anns)
        assert trajs[1] == {0: (1.0, 2.0), 1: (2.0, 2.0)}
