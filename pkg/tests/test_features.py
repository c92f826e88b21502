"""Tests for BHoG, BGH and RAW feature extraction."""

import math
from pathlib import Path

import numpy as np
import pytest

from bottlecheck.features import (
    SOBEL_X,
    SOBEL_Y,
    FeatureError,
    FeatureKind,
    FeatureSpec,
    bgh,
    bgh_direct,
    bhog,
    block_edges,
    build_lut,
    extract,
    extract_batch,
    gradient_polar,
    raw_feature,
    sobel_gradients,
    write_feature_csv,
)
from bottlecheck.imaging import Image


def random_image(seed: int, h: int = 20, w: int = 20) -> Image:
    return Image(np.random.default_rng(seed).random((h, w)))


def brute_force_bhog(img: Image, spec: FeatureSpec) -> np.ndarray:
    """Per-pixel accumulation of gradient magnitude into (block, orientation bin)."""
    field = gradient_polar(*sobel_gradients(img))
    h, w = img.shape
    expected = np.zeros(spec.rows * spec.cols * spec.n_bins)
    rows, cols = block_edges(h, spec.rows), block_edges(w, spec.cols)
    for y in range(h):
        for x in range(w):
            r = int(np.searchsorted(rows, y, side="right") - 1)
            c = int(np.searchsorted(cols, x, side="right") - 1)
            b = min(int(field.orientation[y, x] / (2 * math.pi / spec.n_bins)), spec.n_bins - 1)
            expected[(r * spec.cols + c) * spec.n_bins + b] += field.magnitude[y, x]
    return expected


def double_loop_sobel(img: Image) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img.data, 1, mode="edge")
    h, w = img.shape
    gx, gy = np.zeros((h, w)), np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            gx[y, x] = sum(SOBEL_X[j, i] * p[y + j, x + i] for j in range(3) for i in range(3))
            gy[y, x] = sum(SOBEL_Y[j, i] * p[y + j, x + i] for j in range(3) for i in range(3))
    return gx, gy


class TestFeatureSpec:
    """Test spec validation and serialization."""

    def test_histogram_kinds_need_two_bins(self):
        """n_bins = 1 is invalid for BHoG."""
        with pytest.raises(FeatureError):
            FeatureSpec(FeatureKind.BHOG, 2, 2, 1)

    def test_scale_must_be_in_unit_interval(self):
        """RAW scale 0 is invalid."""
        with pytest.raises(FeatureError):
            FeatureSpec.raw(0.0)

    def test_dict_round_trip_is_equal(self):
        """from_dict(to_dict(spec)) == spec for every kind."""
        for spec in (FeatureSpec.bhog(), FeatureSpec.bgh(8, 6, 32), FeatureSpec.raw(0.4)):
            assert FeatureSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_rejects_unknown_keys(self):
        """Typos in spec keys are errors."""
        with pytest.raises(FeatureError):
            FeatureSpec.from_dict({"kind": "bhog", "rowz": 3})

    def test_dims_on_default_roi(self):
        """BHoG 11x11x9 gives 1089 and RAW 0.6 gives 90 * 213 on a 150x356 ROI."""
        assert FeatureSpec.bhog(11, 11, 9).dim(356, 150) == 1089
        assert FeatureSpec.raw(0.6).raw_shape(356, 150) == (213, 90)
        assert FeatureSpec.raw(0.6).dim(356, 150) == 19170


class TestSobel:
    """Test Sobel gradients."""

    def test_constant_image_has_zero_gradient(self):
        """Flat field gives gx = gy = 0."""
        gx, gy = sobel_gradients(Image.filled(5, 5, 0.4))
        assert np.all(gx == 0) and np.all(gy == 0)

    @pytest.mark.parametrize("level", [0.1, 0.3, 1 / 3, 0.7])
    def test_flat_levels_are_exactly_zero(self, level):
        """Gray levels with no exact binary form still give exact zeros."""
        gx, gy = sobel_gradients(Image.filled(13, 7, level))
        assert not gx.any() and not gy.any()

    def test_flat_region_inside_noisy_image(self):
        """Pixels whose 3x3 window is flat have exactly zero gradient."""
        data = random_image(3, 12, 12).data.copy()
        data[3:9, 3:9] = 0.3
        gx, gy = sobel_gradients(Image(data))
        assert not gx[4:8, 4:8].any() and not gy[4:8, 4:8].any()

    def test_horizontal_ramp(self):
        """I = x / (W - 1) gives interior gx = 8 / (W - 1) and gy = 0."""
        w = 11
        data = np.tile(np.arange(w) / (w - 1), (6, 1))
        gx, gy = sobel_gradients(Image(data))
        np.testing.assert_allclose(gx[1:-1, 1:-1], 8 / (w - 1))
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    def test_matches_double_loop(self):
        """Random 9x9 image agrees with a scalar loop over the padded image."""
        img = random_image(0, 9, 9)
        gx, gy = sobel_gradients(img)
        ex, ey = double_loop_sobel(img)
        np.testing.assert_allclose(gx, ex, rtol=0, atol=1e-9)
        np.testing.assert_allclose(gy, ey, rtol=0, atol=1e-9)

    @pytest.mark.slow
    def test_matches_double_loop_on_many_images(self):
        """100 random images of mixed sizes agree with the scalar loop to 1e-9."""
        rng = np.random.default_rng(40)
        for seed in range(100):
            h, w = (int(v) for v in rng.integers(3, 41, 2))
            img = random_image(seed, h, w)
            gx, gy = sobel_gradients(img)
            ex, ey = double_loop_sobel(img)
            np.testing.assert_allclose(gx, ex, rtol=0, atol=1e-9)
            np.testing.assert_allclose(gy, ey, rtol=0, atol=1e-9)

    def test_too_small_image_raises(self):
        """Images below 3x3 are rejected."""
        with pytest.raises(FeatureError):
            sobel_gradients(Image.filled(2, 5, 0.5))


class TestGradientPolar:
    """Test magnitude and orientation."""

    def test_three_four_five(self):
        """(3, 4) has magnitude 5."""
        field = gradient_polar(np.array([[3.0]]), np.array([[4.0]]))
        assert field.magnitude[0, 0] == pytest.approx(5.0)

    @pytest.mark.parametrize(
        "gx, gy, theta",
        [(1.0, 0.0, 0.0), (0.0, 1.0, math.pi / 2), (-1.0, 0.0, math.pi), (0.0, -1.0, 1.5 * math.pi)],
    )
    def test_orientation_covers_full_circle(self, gx, gy, theta):
        """Orientation uses both signs and lies in [0, 2 pi)."""
        field = gradient_polar(np.array([[gx]]), np.array([[gy]]))
        assert field.orientation[0, 0] == pytest.approx(theta)

    def test_zero_gradient_has_orientation_zero(self):
        """(0, 0) maps to orientation 0."""
        assert gradient_polar(np.zeros((1, 1)), np.zeros((1, 1))).orientation[0, 0] == 0.0

    def test_orientation_never_reaches_two_pi(self):
        """A tiny negative angle stays below 2 pi."""
        field = gradient_polar(np.array([[1.0]]), np.array([[-1e-300]]))
        assert field.orientation[0, 0] < 2 * math.pi


class TestBHoG:
    """Test the blocked histogram of gradient."""

    def test_constant_image_is_all_zero(self):
        """No gradients, no mass."""
        v = bhog(Image.filled(20, 20, 0.3), FeatureSpec.bhog(4, 4, 9))
        assert v.dim == 4 * 4 * 9
        assert np.all(v.values == 0)

    def test_matches_brute_force_accumulation(self):
        """2x2 grid with 4 bins agrees with a per-pixel loop."""
        img = random_image(1)
        spec = FeatureSpec.bhog(2, 2, 4)
        np.testing.assert_allclose(bhog(img, spec).values, brute_force_bhog(img, spec), rtol=1e-6)

    @pytest.mark.slow
    def test_matches_brute_force_on_many_images(self):
        """200 images of 20 to 64 pixels with grids up to 4x4 agree with the loop; mass is conserved."""
        rng = np.random.default_rng(41)
        for seed in range(200):
            h, w = (int(v) for v in rng.integers(20, 65, 2))
            rows, cols = (int(v) for v in rng.integers(1, 5, 2))
            spec = FeatureSpec.bhog(rows, cols, 9)
            img = random_image(seed, h, w)
            values = bhog(img, spec).values
            np.testing.assert_allclose(values, brute_force_bhog(img, spec), rtol=1e-6, atol=1e-9)
            total = gradient_polar(*sobel_gradients(img)).magnitude.sum()
            assert values.sum() == pytest.approx(total, rel=1e-6)

    def test_mass_equals_total_magnitude(self):
        """Histogram mass is the summed gradient magnitude."""
        img = random_image(2, 23, 17)
        total = gradient_polar(*sobel_gradients(img)).magnitude.sum()
        assert bhog(img, FeatureSpec.bhog(3, 5, 9)).values.sum() == pytest.approx(total, rel=1e-6)

    def test_invariant_to_intensity_offset(self):
        """Adding a constant leaves gradients unchanged."""
        img = Image(np.random.default_rng(3).uniform(0.0, 0.5, (16, 16)))
        shifted = Image(img.data + 0.3)
        spec = FeatureSpec.bhog(2, 2, 9)
        np.testing.assert_allclose(bhog(img, spec).values, bhog(shifted, spec).values, atol=1e-6)

    def test_grid_larger_than_image_raises(self):
        """More block rows than pixel rows is an error."""
        with pytest.raises(FeatureError):
            bhog(Image.filled(4, 10, 0.5), FeatureSpec.bhog(5, 2, 9))


class TestLUT:
    """Test the gray level lookup table."""

    def test_256_bins_is_identity(self):
        """Every level is its own bin."""
        np.testing.assert_array_equal(build_lut(256).table, np.arange(256))

    def test_two_bins_split_at_128(self):
        """Levels below 128 go to bin 0."""
        table = build_lut(2).table
        assert table[127] == 0 and table[128] == 1

    def test_sixteen_bins_endpoints(self):
        """table[0] = 0 and table[255] = 15."""
        table = build_lut(16).table
        assert (table[0], table[255]) == (0, 15)

    @pytest.mark.parametrize("n_bins", [2, 4, 8, 16, 32, 64, 128, 256])
    def test_matches_division_for_powers_of_two(self, n_bins):
        """lut[v] = floor(v / (256 / n_bins))."""
        table = build_lut(n_bins).table
        for v in range(256):
            assert table[v] == math.floor(v / (256 / n_bins))

    def test_out_of_range_raises(self):
        """n_bins = 1 and 257 are invalid."""
        for n in (1, 257):
            with pytest.raises(FeatureError):
                build_lut(n)


class TestBGH:
    """Test the blocked gray histogram."""

    def test_uniform_image_fills_one_bin_per_block(self):
        """Gray level g lands entirely in lut[round(255 g)]."""
        spec = FeatureSpec.bgh(2, 3, 16)
        img = Image.filled(10, 12, 0.5)
        v = bgh(img, spec).values.reshape(6, 16)
        target = build_lut(16).table[round(255 * 0.5)]
        np.testing.assert_array_equal(v[:, target], [20] * 6)
        assert v.sum() == 120

    def test_block_mass_equals_pixel_count(self):
        """Each block's bins sum to its pixel count."""
        spec = FeatureSpec.bgh(3, 4, 16)
        img = random_image(4, 23, 17)
        v = bgh(img, spec).values.reshape(12, 16).sum(axis=1)
        rows, cols = np.diff(block_edges(23, 3)), np.diff(block_edges(17, 4))
        np.testing.assert_array_equal(v, np.outer(rows, cols).ravel())

    def test_permuting_pixels_within_a_block(self):
        """Shuffling inside one block leaves the vector unchanged."""
        spec = FeatureSpec.bgh(2, 2, 8)
        data = np.random.default_rng(5).random((10, 10))
        shuffled = data.copy()
        block = shuffled[:5, :5].ravel()
        np.random.default_rng(6).shuffle(block)
        shuffled[:5, :5] = block.reshape(5, 5)
        np.testing.assert_array_equal(
            bgh(Image(data), spec).values, bgh(Image(shuffled), spec).values
        )

    def test_lut_path_matches_direct_path(self):
        """LUT and direct division agree exactly on random images."""
        for seed in range(200):
            spec = FeatureSpec.bgh(3, 3, [2, 4, 16, 64, 256][seed % 5])
            img = random_image(seed, 15, 15)
            np.testing.assert_array_equal(bgh(img, spec).values, bgh_direct(img, spec).values)

    @pytest.mark.slow
    def test_lut_path_matches_direct_path_on_full_roi(self):
        """LUT and direct paths agree on 1000 ROI-sized images for every power-of-two bin count."""
        bins = [2, 4, 8, 16, 32, 64, 128, 256]
        for seed in range(1000):
            spec = FeatureSpec.bgh(10, 10, bins[seed % len(bins)])
            img = random_image(seed, 356, 150)
            np.testing.assert_array_equal(bgh(img, spec).values, bgh_direct(img, spec).values)

    def test_lut_bin_count_must_match(self):
        """A 16-bin LUT cannot serve an 8-bin spec."""
        with pytest.raises(FeatureError):
            bgh(Image.filled(4, 4, 0.5), FeatureSpec.bgh(1, 1, 8), build_lut(16))


class TestRaw:
    """Test RAW downsampling."""

    def test_scale_one_is_exact_copy(self):
        """RAW at scale 1 is the row-major image."""
        img = random_image(7, 6, 9)
        np.testing.assert_array_equal(raw_feature(img, FeatureSpec.raw(1.0)).values, img.data.ravel())

    def test_constant_image(self):
        """Cell means of a constant are the constant."""
        v = raw_feature(Image.filled(356, 150, 0.25), FeatureSpec.raw(0.6))
        assert v.dim == 19170
        np.testing.assert_allclose(v.values, 0.25)

    def test_cell_means(self):
        """4x4 at scale 0.5 averages 2x2 cells."""
        data = np.arange(16, dtype=np.float64).reshape(4, 4) / 16
        v = raw_feature(Image(data), FeatureSpec.raw(0.5)).values
        expected = [data[:2, :2].mean(), data[:2, 2:].mean(), data[2:, :2].mean(), data[2:, 2:].mean()]
        np.testing.assert_allclose(v, expected)

    def test_empty_target_raises(self):
        """A scale that floors to zero rows is an error."""
        with pytest.raises(FeatureError):
            raw_feature(Image.filled(1, 10, 0.5), FeatureSpec.raw(0.5))


class TestExtract:
    """Test dispatch and batch extraction."""

    @pytest.mark.parametrize(
        "spec", [FeatureSpec.bhog(2, 2, 9), FeatureSpec.bgh(2, 2, 16), FeatureSpec.raw(0.5)]
    )
    def test_dispatch_and_dim(self, spec):
        """extract routes by kind and returns spec.dim values."""
        img = random_image(8)
        v = extract(img, spec)
        assert v.dim == spec.dim(20, 20)
        assert v.spec == spec

    def test_deterministic(self):
        """Same input, same output bits."""
        img = random_image(9)
        spec = FeatureSpec.bhog(3, 3, 9)
        assert np.array_equal(extract(img, spec).values, extract(img, spec).values)

    def test_batch_with_threads_matches_serial(self):
        """Worker count does not change the matrix."""
        images = [random_image(s) for s in range(6)]
        spec = FeatureSpec.bgh(2, 2, 8)
        np.testing.assert_array_equal(
            extract_batch(images, spec, workers=1), extract_batch(images, spec, workers=3)
        )

    def test_write_feature_csv(self, tmp_path: Path):
        """One CSV row per vector, led by the spec label."""
        spec = FeatureSpec.raw(0.5)
        path = tmp_path / "f.csv"
        n = write_feature_csv(path, [extract(random_image(s, 4, 4), spec) for s in range(3)])
        lines = path.read_text().splitlines()
        assert n == 3 and len(lines) == 3
        assert lines[0].startswith("raw-0.5,")
