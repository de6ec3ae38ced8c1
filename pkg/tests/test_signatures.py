"""Signature mining tests.

Oracles here are deliberately dumb: double loops over pixels and kernel
offsets, and counting loops for histograms. The hand cases (solid color,
axis-aligned stripes, unit checkerboard) have closed-form signatures worked
out in comments.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from physloc import signatures as sg
from physloc.errors import DimensionError, ValidationError


def make_image(arr) -> sg.Image:
    return sg.Image(pixels=np.asarray(arr, dtype=np.uint8))


def solid(r, g, b, h=8, w=8) -> sg.Image:
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, :, 0] = r
    px[:, :, 1] = g
    px[:, :, 2] = b
    return make_image(px)


def conv_oracle(field, kernel):
    """Direct double loop over output pixels and kernel offsets."""
    h, w = field.shape
    out = np.zeros_like(field, dtype=float)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    acc += kernel[dy + 1, dx + 1] * field[(y + dy) % h, (x + dx) % w]
            out[y, x] = acc
    return out


def color_hist_oracle(img, bins):
    """Counting loop over pixels, one histogram per channel."""
    h, w, _ = img.pixels.shape
    out = []
    for c in range(3):
        hist = [0] * bins
        for y in range(h):
            for x in range(w):
                hist[int(img.pixels[y, x, c]) * bins // 256] += 1
        out.extend(v / (h * w) for v in hist)
    return np.array(out)


class TestGrayscale:
    def test_pure_red_luma(self):
        # 0.299 * 255 = 76.245 by the stated weights
        img = solid(255, 0, 0)
        luma = sg.to_grayscale(img)
        assert luma.shape == (8, 8)
        assert luma[0, 0] == pytest.approx(76.245, abs=1e-9)

    def test_white_luma_is_255(self):
        luma = sg.to_grayscale(solid(255, 255, 255))
        assert luma[0, 0] == pytest.approx(255.0, abs=1e-9)


class TestConvolution:
    def test_zero_sum_kernel_on_constant_field(self):
        field = np.full((5, 7), 9.5)
        out = sg.conv3x3_circular(field, sg.SOBEL_X)
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_identity_kernel_preserves_delta(self):
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        field = np.zeros((4, 4))
        field[2, 1] = 3.0
        out = sg.conv3x3_circular(field, k)
        assert np.array_equal(out, field)

    def test_against_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for kernel in (sg.SOBEL_X, sg.SOBEL_Y, sg.LAPLACIAN_4, rng.normal(size=(3, 3))):
            field = rng.normal(size=(6, 9))
            got = sg.conv3x3_circular(field, kernel)
            assert np.allclose(got, conv_oracle(field, kernel), atol=1e-12)

    def test_wraps_at_the_border(self):
        # A single bright column at x = 0 must produce Sobel responses on the
        # x = W-1 column through the circular pad.
        field = np.zeros((4, 4))
        field[:, 0] = 1.0
        out = sg.conv3x3_circular(field, sg.SOBEL_X)
        assert np.any(out[:, 3] != 0.0)

    def test_too_small_field_rejected(self):
        with pytest.raises(DimensionError):
            sg.conv3x3_circular(np.zeros((2, 5)), sg.SOBEL_X)


class TestColorSignature:
    def test_solid_red_bins(self):
        # 255 -> bin 15, 0 -> bin 0 for 16 bins; mass 1 in each channel's bin
        f = sg.color_signature(solid(255, 0, 0), 16)
        assert f.shape == (48,)
        assert f[15] == 1.0
        assert f[16] == 1.0  # G channel bin 0
        assert f[32] == 1.0  # B channel bin 0
        assert f.sum() == pytest.approx(3.0, abs=1e-12)

    def test_half_black_half_white(self):
        px = np.zeros((4, 4, 3), dtype=np.uint8)
        px[:, 2:, :] = 255
        f = sg.color_signature(make_image(px), 16)
        for c in range(3):
            assert f[16 * c + 0] == pytest.approx(0.5)
            assert f[16 * c + 15] == pytest.approx(0.5)

    def test_against_counting_oracle(self):
        rng = np.random.default_rng(2)
        img = make_image(rng.integers(0, 256, size=(5, 6, 3)))
        for bins in (4, 16, 17):
            got = sg.color_signature(img, bins)
            assert np.allclose(got, color_hist_oracle(img, bins), atol=1e-12)

    def test_255_lands_in_top_bin_for_any_bin_count(self):
        img = solid(255, 255, 255, 3, 3)
        for bins in (2, 3, 16, 32):
            f = sg.color_signature(img, bins)
            assert f[bins - 1] == 1.0


class TestStructureSignature:
    def test_vertical_stripes_orientation_zero(self):
        # Intensity varies along x only, so gy = 0 exactly and every salient
        # pixel folds to orientation 0 -> bin 0.
        px = np.zeros((16, 16, 3), dtype=np.uint8)
        px[:, ::4, :] = 200
        px[:, 1::4, :] = 200
        f, grad = sg.structure_signature(make_image(px))
        assert f[0] == pytest.approx(1.0)
        assert f.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(grad.magnitude[grad.mask] > 0, True)

    def test_rotated_stripes_move_to_middle_bin(self):
        # The same pattern transposed varies along y: orientation pi/2,
        # bin floor((pi/2) * 18 / pi) = 9.
        px = np.zeros((16, 16, 3), dtype=np.uint8)
        px[:, ::4, :] = 200
        px[:, 1::4, :] = 200
        rotated = make_image(np.transpose(px, (1, 0, 2)))
        f, _ = sg.structure_signature(rotated)
        assert f[9] == pytest.approx(1.0)

    def test_constant_image_uniform_fallback(self):
        f, grad = sg.structure_signature(solid(77, 77, 77))
        assert not grad.mask.any()
        assert np.allclose(f, 1.0 / 18)
        assert f.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mask_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        img = make_image(rng.integers(0, 256, size=(12, 12, 3)))
        sizes = []
        for tau in (0.05, 0.15, 0.5, 0.9):
            _, grad = sg.structure_signature(img, sg.SignatureConfig(tau_rel=tau))
            sizes.append(int(grad.mask.sum()))
        assert sizes == sorted(sizes, reverse=True)

    def test_strict_inequality_keeps_peak_pixels(self):
        # With tau_rel -> 1 the pixels at the maximum still satisfy M > tau*M
        # only if tau < 1; at tau close to 1 the arg-max pixels survive.
        px = np.zeros((8, 8, 3), dtype=np.uint8)
        px[:, 0, :] = 255
        _, grad = sg.structure_signature(make_image(px), sg.SignatureConfig(tau_rel=0.999))
        assert grad.mask.sum() > 0

    def test_orientation_range(self):
        rng = np.random.default_rng(4)
        img = make_image(rng.integers(0, 256, size=(9, 9, 3)))
        _, grad = sg.structure_signature(img)
        assert np.all(grad.orientation >= 0.0)
        assert np.all(grad.orientation < np.pi)


class TestTextureSignature:
    def test_unit_checkerboard_tops_the_histogram(self):
        # Alternating 0/255: |Laplacian| = 4*255 at every pixel, so after
        # log scaling every pixel maps to v = 1 -> top bin.
        y, x = np.indices((8, 8))
        checker = ((x + y) % 2 * 255).astype(np.uint8)
        img = make_image(np.stack([checker] * 3, axis=-1))
        f, field = sg.texture_signature(img)
        assert np.allclose(field.energy, 4 * 255.0)
        assert f[15] == pytest.approx(1.0)

    def test_contrast_scaling_invariance_for_single_level_fields(self):
        # Halving the contrast changes E but not the all-in-top-bin shape.
        y, x = np.indices((8, 8))
        for level in (255, 128, 64):
            checker = ((x + y) % 2 * level).astype(np.uint8)
            img = make_image(np.stack([checker] * 3, axis=-1))
            f, _ = sg.texture_signature(img)
            assert f[15] == pytest.approx(1.0)

    def test_flat_image_mass_in_bin_zero(self):
        f, field = sg.texture_signature(solid(100, 100, 100))
        assert np.allclose(field.energy, 0.0)
        assert f[0] == pytest.approx(1.0)

    def test_sums_to_one(self):
        rng = np.random.default_rng(5)
        img = make_image(rng.integers(0, 256, size=(7, 11, 3)))
        f, _ = sg.texture_signature(img)
        assert f.sum() == pytest.approx(1.0, abs=1e-12)


class TestMineSignature:
    def test_dimensions(self):
        cfg = sg.SignatureConfig()
        p = sg.mine_signature(solid(10, 20, 30), cfg)
        assert p.f_color.shape == (48,)
        assert p.f_struc.shape == (18,)
        assert p.f_tex.shape == (16,)
        assert p.p_sig.shape == (82,)

    def test_custom_bins(self):
        cfg = sg.SignatureConfig(color_bins=8, orient_bins=9, texture_bins=4)
        p = sg.mine_signature(solid(10, 20, 30), cfg)
        assert p.p_sig.shape == (8 * 3 + 9 + 4,)

    def test_small_image_rejected(self):
        px = np.zeros((2, 5, 3), dtype=np.uint8)
        with pytest.raises(DimensionError):
            sg.mine_signature(make_image(px))

    def test_purity(self):
        rng = np.random.default_rng(6)
        img = make_image(rng.integers(0, 256, size=(10, 10, 3)))
        a = sg.mine_signature(img).p_sig
        b = sg.mine_signature(img).p_sig
        assert np.array_equal(a, b)

    @settings(max_examples=25, deadline=None)
    @given(
        hnp.arrays(np.uint8, (9, 9, 3), elements=st.integers(0, 255)),
        st.integers(0, 8),
        st.integers(0, 8),
    )
    def test_shift_equivariance_bitwise(self, px, dy, dx):
        img = make_image(px)
        shifted = make_image(np.roll(px, (dy, dx), axis=(0, 1)))
        a = sg.mine_signature(img)
        b = sg.mine_signature(shifted)
        assert np.array_equal(a.p_sig, b.p_sig)

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.uint8, (8, 12, 3), elements=st.integers(0, 255)))
    def test_component_histograms_sum_to_one(self, px):
        p = sg.mine_signature(make_image(px))
        f = p.f_color
        for c in range(3):
            assert f[16 * c:16 * (c + 1)].sum() == pytest.approx(1.0, abs=1e-9)
        assert p.f_struc.sum() == pytest.approx(1.0, abs=1e-9)
        assert p.f_tex.sum() == pytest.approx(1.0, abs=1e-9)


class TestConfigValidation:
    def test_bad_bin_counts(self):
        with pytest.raises(ValidationError):
            sg.SignatureConfig(color_bins=1)
        with pytest.raises(ValidationError):
            sg.SignatureConfig(orient_bins=0)

    def test_bad_tau(self):
        with pytest.raises(ValidationError):
            sg.SignatureConfig(tau_rel=0.0)
        with pytest.raises(ValidationError):
            sg.SignatureConfig(tau_rel=1.0)

    def test_image_validation(self):
        with pytest.raises(ValidationError):
            sg.Image(pixels=np.zeros((4, 4, 3), dtype=np.float64))
        with pytest.raises(ValidationError):
            sg.Image(pixels=np.zeros((4, 4, 4), dtype=np.uint8))
