import math

import numpy as np
import pytest

from msir.core import SharingStructure, classify_sharing, predict, seeded_rng
from msir.metrics import rmse
from msir.penalties import tv_value
from msir.simgen import (
    ShapeKind,
    ShapeSpec,
    SimConfig,
    generate,
    make_components,
    make_weights,
    rasterize,
)


class TestRasterize:
    @pytest.mark.parametrize("size", [1, 4, 7, 16])
    def test_square_pixel_count(self, size):
        spec = ShapeSpec(ShapeKind.SQUARE, (20, 20), size)
        assert (rasterize(spec, 64, 64) != 0).sum() == size ** 2

    @pytest.mark.parametrize("size", [8, 16, 24, 40])
    def test_disk_count_near_area(self, size):
        radius = size / 2
        spec = ShapeSpec(ShapeKind.CIRCLE, (32, 32), size)
        count = (rasterize(spec, 64, 64) != 0).sum()
        assert abs(count - math.pi * radius ** 2) <= 4 * radius

    def test_zero_amplitude_gives_zero_matrix(self):
        spec = ShapeSpec(ShapeKind.PENTAGON, (20, 20), 10, amplitude=0.0)
        assert np.array_equal(rasterize(spec, 40, 40), np.zeros((40, 40)))

    def test_amplitude_scales_values(self):
        spec = ShapeSpec(ShapeKind.TRIANGLE, (20, 20), 10, amplitude=2.5)
        img = rasterize(spec, 40, 40)
        assert set(np.unique(img)) == {0.0, 2.5}

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            rasterize(ShapeSpec(ShapeKind.SQUARE, (2, 2), 16), 64, 64)
        with pytest.raises(ValueError):
            rasterize(ShapeSpec(ShapeKind.CIRCLE, (60, 60), 16), 64, 64)

    @pytest.mark.parametrize("kind", list(ShapeKind))
    def test_all_shapes_nonempty_and_inside_bbox(self, kind):
        spec = ShapeSpec(kind, (20, 20), 12)
        img = rasterize(spec, 40, 40)
        nz_rows, nz_cols = np.nonzero(img)
        assert nz_rows.size > 0
        assert nz_rows.min() >= 14 and nz_rows.max() <= 26
        assert nz_cols.min() >= 14 and nz_cols.max() <= 26


class TestMakeComponents:
    def test_supports_pairwise_disjoint(self):
        comps = make_components()
        supports = [set(zip(*np.nonzero(c))) for c in comps]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not supports[i] & supports[j]

    def test_square_confined_to_top_left_quadrant(self):
        comps = make_components()
        rows, cols = np.nonzero(comps[0])
        assert rows.max() < 32 and cols.max() < 32

    def test_each_component_has_positive_tv(self):
        for c in make_components():
            assert tv_value(c) > 0


class TestMakeWeights:
    def test_setting1_range_and_classification(self):
        w = make_weights("S1", seeded_rng(0))
        assert w.shape == (3, 3)
        assert np.all((w >= 0.5) & (w <= 1.5))
        assert classify_sharing(w) is SharingStructure.FS

    def test_setting2_multiset(self):
        w = make_weights("S2", seeded_rng(1))
        assert np.allclose(np.sort(w.ravel()), np.linspace(0.0, 2.0, 9))

    def test_setting3_row_zeros(self):
        for seed in range(20):
            w = make_weights("S3", seeded_rng(seed))
            for row in w:
                assert (row == 0.0).sum() >= 1
                assert (row != 0.0).sum() <= 2

    def test_setting3_classification_per_draw(self):
        # independent support-enumeration oracle; most draws come out PS
        ps_draws = 0
        for seed in range(30):
            w = make_weights("S3", seeded_rng(seed))
            supports = [frozenset(np.flatnonzero(row != 0.0)) for row in w]
            pairs = [(i, j) for i in range(3) for j in range(i + 1, 3)]
            if all(not (supports[i] & supports[j]) for i, j in pairs):
                expected = SharingStructure.STL
            elif all(s == {0, 1, 2} for s in supports):
                expected = SharingStructure.FS
            elif all(supports[i] & supports[j]
                     == supports[0] & supports[1] & supports[2]
                     for i, j in pairs):
                expected = SharingStructure.JI
            else:
                expected = SharingStructure.PS
            assert classify_sharing(w) is expected
            ps_draws += expected is SharingStructure.PS
        assert ps_draws >= 15

    def test_unknown_setting_rejected(self):
        with pytest.raises(ValueError):
            make_weights("S4", seeded_rng(0))


class TestGenerate:
    def small_cfg(self, **kw):
        defaults = dict(setting="S1", n_per_source=50, p=16, q=16,
                        component_size=5, seed=5)
        defaults.update(kw)
        return SimConfig(**defaults)

    def test_noiseless_truth_predicts_exactly(self):
        cfg = self.small_cfg(noise_sd=0.0)
        train, val, test, truth = generate(cfg)
        for t, ds in enumerate(test):
            c = np.tensordot(truth.weights[t], truth.components, axes=1)
            assert rmse(predict(ds, truth.betas[t], c), ds.y) < 1e-10

    def test_split_sizes(self):
        cfg = self.small_cfg(n_per_source=300)
        train, val, test, _ = generate(cfg)
        assert all(ds.n == 180 for ds in train)
        assert all(ds.n == 60 for ds in val)
        assert all(ds.n == 60 for ds in test)

    def test_linear_functional_variance(self):
        # over gaussian pixels, var(<X, C>) equals the squared Frobenius norm
        cfg = SimConfig(setting="S1", n_per_source=10_000, p=8, q=8,
                        component_size=3, noise_sd=0.0, seed=6)
        train, val, test, truth = generate(cfg)
        c = np.tensordot(truth.weights[0], truth.components, axes=1)
        ds = train[0]
        signal = ds.x_mat @ c.reshape(-1)
        assert abs(signal.var() / (c ** 2).sum() - 1.0) < 0.10

    def test_bitwise_reproducible(self):
        cfg = self.small_cfg()
        a = generate(cfg)
        b = generate(cfg)
        for bundle_a, bundle_b in zip(a[:3], b[:3]):
            for ds_a, ds_b in zip(bundle_a, bundle_b):
                assert np.array_equal(ds_a.y, ds_b.y)
                assert np.array_equal(ds_a.z, ds_b.z)
                assert np.array_equal(ds_a.x, ds_b.x)
        assert np.array_equal(a[3].weights, b[3].weights)

    def test_true_coefficient_supports_are_component_unions(self):
        cfg = self.small_cfg(setting="S3", seed=9)
        _, _, _, truth = generate(cfg)
        for t in range(3):
            c = np.tensordot(truth.weights[t], truth.components, axes=1)
            expected = np.zeros_like(c, dtype=bool)
            for r in range(3):
                if truth.weights[t, r] != 0.0:
                    expected |= truth.components[r] != 0
            assert np.array_equal(c != 0, expected)

    def test_intercept_flag_sets_constant_column(self):
        cfg = self.small_cfg(intercept=True)
        train, _, _, _ = generate(cfg)
        for ds in train:
            assert np.all(ds.z[:, 0] == 1.0)

    def test_from_files_requires_enough_images(self, tmp_path):
        from msir.fileio import write_image_stack

        cfg = self.small_cfg(n_per_source=50)
        stack = seeded_rng(1).normal(size=(40, 16, 16))  # need 150
        path = tmp_path / "imgs.bin"
        write_image_stack(path, stack)
        with pytest.raises(ValueError):
            generate(cfg, image_source="from_files", image_path=path)

    def test_from_files_normalizes_pixels(self, tmp_path):
        from msir.fileio import write_image_stack

        cfg = self.small_cfg(n_per_source=20)
        stack = 5.0 + 3.0 * seeded_rng(2).normal(size=(60, 16, 16))
        path = tmp_path / "imgs.bin"
        write_image_stack(path, stack)
        train, val, test, _ = generate(cfg, image_source="from_files",
                                       image_path=path)
        pixels = np.concatenate([ds.x.ravel() for b in (train, val, test)
                                 for ds in b])
        assert abs(pixels.mean()) < 0.05
        assert abs(pixels.std() - 1.0) < 0.05
