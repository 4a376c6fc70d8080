import math

import numpy as np
import pytest

from imtok.errors import InvalidLayout, ParseError, UnsupportedFormat
from imtok.imagegrid import (
    Image,
    PatchGrid,
    PatchLayout,
    load_image,
    partition,
    patch_count,
    patch_positions,
    reassemble,
    write_image,
)


def make_image(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Image(arr.shape[0], arr.shape[1], arr.shape[2], arr)


class TestLoadImage:
    def test_p5_single_zero_pixel(self, tmp_path):
        p = tmp_path / "z.pgm"
        p.write_bytes(b"P5\n1 1\n255\n" + bytes([0]))
        img = load_image(p)
        assert (img.height, img.width, img.channels) == (1, 1, 1)
        assert img.data[0, 0, 0] == 0.0

    def test_p6_saturated_pixel(self, tmp_path):
        p = tmp_path / "w.ppm"
        p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 255, 255]))
        img = load_image(p)
        assert (img.height, img.width, img.channels) == (1, 1, 3)
        np.testing.assert_array_equal(img.data.reshape(-1), [1.0, 1.0, 1.0])

    def test_p5_byte_scaling(self, tmp_path):
        p = tmp_path / "g.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 51, 102, 204]))
        img = load_image(p)
        np.testing.assert_allclose(
            img.data.reshape(-1), [0.0, 51 / 255, 102 / 255, 204 / 255]
        )
        # hand check of the first nonzero value: 51/255 = 0.2
        assert img.data.reshape(-1)[1] == pytest.approx(0.2)

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5 # magic\n# a comment line\n 2 # width\n1\n255\n" + bytes([7, 9]))
        img = load_image(p)
        assert (img.height, img.width) == (1, 2)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P5\nxx 1\n255\n" + bytes([0]))
        with pytest.raises(ParseError):
            load_image(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 1]))
        with pytest.raises(ParseError):
            load_image(p)

    def test_unsupported_maxval(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n" + bytes([0, 0]))
        with pytest.raises(UnsupportedFormat):
            load_image(p)

    def test_unknown_magic(self, tmp_path):
        p = tmp_path / "a.pbm"
        p.write_bytes(b"P4\n1 1\n" + bytes([0]))
        with pytest.raises(UnsupportedFormat):
            load_image(p)

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = np.round(rng.random((5, 4, 3)) * 255) / 255
        img = Image(5, 4, 3, data)
        p = tmp_path / "rt.ppm"
        write_image(p, img)
        back = load_image(p)
        np.testing.assert_array_equal(back.data, img.data)


class TestPatchCount:
    def test_exact_tiling(self):
        assert patch_count(256, 256, 16, 0.0) == (16, 16)

    def test_441_patch_grid(self):
        rows, cols = patch_count(336, 336, 16, 0.0)
        assert (rows, cols) == (21, 21)
        assert rows * cols == 441

    def test_overlap_formula(self):
        # ceil((256 - 8) / 8) = 31 per axis
        assert patch_count(256, 256, 16, 0.5) == (31, 31)

    def test_patch_larger_than_image(self):
        with pytest.raises(InvalidLayout):
            patch_count(8, 32, 16, 0.0)

    def test_bad_overlap_rate(self):
        with pytest.raises(InvalidLayout):
            patch_count(32, 32, 8, 1.0)

    @pytest.mark.parametrize("r", [0.0, 0.25, 0.5])
    def test_matches_loop_oracle(self, r):
        def axis_oracle(extent, s, r):
            # count steps of the growing prefix until the formula's
            # numerator is covered; never consults math.ceil
            if r == 0.0:
                n, covered = 0, 0
                while covered < extent:
                    covered += s
                    n += 1
                return n
            n = 1
            while n * (s * r) < extent - s * (1.0 - r):
                n += 1
            return n

        for extent in range(1, 65):
            for s in range(1, min(extent, 32) + 1):
                got = patch_count(extent, extent, s, r)
                want = axis_oracle(extent, s, r)
                assert got == (want, want), (extent, s, r)


class TestPartition:
    def test_single_patch_is_flattened_image(self):
        rng = np.random.default_rng(1)
        img = make_image(rng.random((16, 16)))
        grid = partition(img, 16, 0.0)
        assert grid.layout.patch_total == 1
        np.testing.assert_array_equal(grid.patches[0], img.data.reshape(-1))

    def test_constant_image_constant_patches(self):
        img = make_image(np.full((24, 24), 0.5))
        for s, r in [(8, 0.0), (8, 0.5), (6, 0.25)]:
            grid = partition(img, s, r)
            np.testing.assert_array_equal(grid.patches, 0.5)

    def test_ramp_quadrant_means_increase(self):
        ramp = np.linspace(0.0, 1.0, 32 * 32).reshape(32, 32)
        grid = partition(make_image(ramp), 16, 0.0)
        means = grid.patches.mean(axis=1)
        assert grid.layout.patch_total == 4
        assert np.all(np.diff(means) > 0)

    def test_row_major_positions(self):
        img = make_image(np.zeros((32, 48)))
        grid = partition(img, 16, 0.0)
        pos = patch_positions(grid.layout)
        assert pos == [(0, 0), (0, 16), (0, 32), (16, 0), (16, 16), (16, 32)]


class TestReassemble:
    @pytest.mark.parametrize("s", [4, 8, 16])
    def test_exact_round_trip_no_overlap(self, s):
        rng = np.random.default_rng(2)
        img = make_image(rng.random((32, 32)))
        back = reassemble(partition(img, s, 0.0))
        np.testing.assert_array_equal(back.data, img.data)

    @pytest.mark.parametrize("r", [0.25, 0.5])
    def test_overlap_round_trip_within_tolerance(self, r):
        rng = np.random.default_rng(3)
        img = make_image(rng.random((20, 28, 3)))
        back = reassemble(partition(img, 8, r))
        assert np.abs(back.data - img.data).max() < 1e-12

    def test_constant_overlap_round_trip(self):
        img = make_image(np.full((20, 20), 0.5))
        back = reassemble(partition(img, 8, 0.5))
        np.testing.assert_array_equal(back.data, img.data)

    def test_shared_pixel_averages(self):
        # two 2x2 patches side by side with stride 1 share a 2x1 strip
        layout = PatchLayout(
            patch_size=2, overlap_rate=0.5, rows=1, cols=2, stride=1.0,
            height=2, width=3, channels=1,
        )
        p0 = np.zeros(4)
        p1 = np.ones(4)
        img = reassemble(PatchGrid(layout, np.stack([p0, p1])))
        np.testing.assert_array_equal(img.data[:, 1, 0], [0.5, 0.5])
        np.testing.assert_array_equal(img.data[:, 0, 0], [0.0, 0.0])
        np.testing.assert_array_equal(img.data[:, 2, 0], [1.0, 1.0])

    def test_inconsistent_patch_matrix_rejected(self):
        layout = PatchLayout(
            patch_size=2, overlap_rate=0.0, rows=1, cols=1, stride=2.0,
            height=2, width=2, channels=1,
        )
        with pytest.raises(InvalidLayout):
            PatchGrid(layout, np.zeros((2, 4)))
        with pytest.raises(InvalidLayout):
            PatchGrid(layout, np.zeros((1, 5)))


class TestImageInvariants:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            make_image(np.full((2, 2), 1.5))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            Image(2, 2, 1, np.zeros((2, 3, 1)))
