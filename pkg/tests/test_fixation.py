import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olbp.fixation import (DEFAULT_SIGMA, EmptyFixationError, FixationMap, downsample_fdm, gaussian_kernel1d,
                           load_fdm_png, make_fdm, read_fixations, resize_fdm, save_fdm_png, sigma_for_width,
                           write_fixations)
from olbp.tensor import ShapeError


class TestMakeFdm:
    def test_default_sigma(self):
        assert DEFAULT_SIGMA == 24.0
        assert make_fdm(FixationMap(100, 80, [(50, 40)])).sigma == 24.0

    def test_single_fixation_profile(self):
        fdm = make_fdm(FixationMap(800, 600, [(400, 300)]), 24.0)
        assert fdm.grid[300, 400] == 1.0
        assert abs(fdm.grid[300, 424] - math.exp(-0.5)) < 1e-6
        assert abs(fdm.grid[276, 400] - math.exp(-0.5)) < 1e-6

    def test_duplicates_absorbed(self):
        a = make_fdm(FixationMap(60, 40, [(20, 10)]), 3.0)
        b = make_fdm(FixationMap(60, 40, [(20, 10), (20, 10)]), 3.0)
        np.testing.assert_allclose(a.grid, b.grid, atol=1e-15)

    def test_min_max(self, rng):
        pts = [(int(x), int(y)) for x, y in zip(rng.integers(0, 64, 5), rng.integers(0, 48, 5))]
        g = make_fdm(FixationMap(64, 48, pts), 4.0).grid
        assert g.min() == 0.0 and g.max() == 1.0

    def test_peak_at_a_fixation(self, rng):
        pts = [(int(x), int(y)) for x, y in zip(rng.integers(0, 64, 3), rng.integers(0, 64, 3))]
        g = make_fdm(FixationMap(64, 64, pts), 3.0).grid
        y, x = np.unravel_index(np.argmax(g), g.shape)
        assert any(abs(x - px) <= 1 and abs(y - py) <= 1 for px, py in pts)

    def test_empty_rejected(self):
        with pytest.raises(EmptyFixationError):
            make_fdm(FixationMap(10, 10, []))

    def test_truncation_radius(self):
        k = gaussian_kernel1d(2.0)
        assert len(k) == 2 * 6 + 1
        assert abs(k.sum() - 1) < 1e-15

    @settings(max_examples=20, deadline=None)
    @given(dx=st.integers(-8, 8), dy=st.integers(-8, 8), seed=st.integers(0, 1000))
    def test_translation_equivariance(self, dx, dy, seed):
        rng = np.random.default_rng(seed)
        pts = [(int(x), int(y)) for x, y in zip(rng.integers(30, 50, 3), rng.integers(30, 50, 3))]
        a = make_fdm(FixationMap(80, 80, pts), 2.0).grid
        b = make_fdm(FixationMap(80, 80, [(x + dx, y + dy) for x, y in pts]), 2.0).grid
        np.testing.assert_allclose(np.roll(a, (dy, dx), axis=(0, 1))[20:60, 20:60], b[20:60, 20:60], atol=1e-12)

    def test_out_of_bounds_point(self):
        with pytest.raises(ValueError):
            FixationMap(10, 10, [(10, 0)])


class TestPyramid:
    def test_level1_identity(self, rng):
        g = make_fdm(FixationMap(32, 32, [(5, 9)]), 2.0)
        np.testing.assert_array_equal(downsample_fdm(g, 1).data[0, 0], g.grid)

    def test_288_level5(self):
        g = make_fdm(FixationMap(288, 288, [(100, 200)]), 8.0)
        assert downsample_fdm(g, 5).shape == (1, 1, 18, 18)

    def test_max_preserved_all_levels(self, rng):
        g = make_fdm(FixationMap(64, 64, [(3, 60), (40, 2)]), 2.0)
        for lvl in range(1, 6):
            t = downsample_fdm(g, lvl)
            assert t.data.max() == 1.0
            assert t.data.min() >= 0.0

    def test_bad_level(self):
        g = make_fdm(FixationMap(32, 32, [(5, 9)]), 2.0)
        with pytest.raises(ValueError):
            downsample_fdm(g, 6)

    def test_non_divisible(self):
        g = make_fdm(FixationMap(30, 32, [(5, 9)]), 2.0)
        with pytest.raises(ShapeError):
            downsample_fdm(g, 3)


class TestIO:
    def test_fixation_file_roundtrip(self, tmp_path):
        fm = FixationMap(20, 10, [(1, 2), (19, 9), (1, 2)])
        write_fixations(tmp_path / "f.txt", fm)
        assert read_fixations(tmp_path / "f.txt", 20, 10).points == fm.points

    def test_comments_and_bad_line(self, tmp_path):
        p = tmp_path / "f.txt"
        p.write_text("# header\n3,4  # gaze\n\n5,6\n")
        assert read_fixations(p, 10, 10).points == [(3, 4), (5, 6)]
        p.write_text("3;4\n")
        with pytest.raises(ValueError, match="f.txt:1"):
            read_fixations(p, 10, 10)

    @pytest.mark.parametrize("bits,tol", [(8, 0.5 / 255), (16, 0.5 / 65535)])
    def test_png_sidecar(self, tmp_path, bits, tol):
        fdm = make_fdm(FixationMap(40, 30, [(10, 10)]), 3.0)
        save_fdm_png(tmp_path / "m.png", fdm, bits)
        back = load_fdm_png(tmp_path / "m.png")
        assert back.sigma == 3.0
        assert np.abs(back.grid - fdm.grid).max() <= tol + 1e-12

    def test_resize_renormalises(self):
        fdm = make_fdm(FixationMap(800, 600, [(400, 300), (100, 100)]))
        small = resize_fdm(fdm, 288, 288)
        assert small.shape == (288, 288)
        assert small.grid.max() == 1.0 and small.grid.min() == 0.0
        assert sigma_for_width(800) == 24.0
