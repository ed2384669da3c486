import numpy as np
import pytest
from PIL import Image

from audioshield.imaging import (
    ColorSpectrogram,
    HIGHBOOST_KERNEL,
    SvdReduction,
    color_compensate,
    highboost,
    load_color_channels,
    luminance,
    palette_map,
    save_color_channels,
    save_png,
    svd_reconstruct,
    svd_reduce,
    svd_smooth,
)
from audioshield.spectra import Spectrogram


def _sp(data):
    return Spectrogram(np.asarray(data, dtype=float), "dwt", "linear")


class TestColorCompensate:
    def test_wb_endpoints(self):
        sp = _sp([[0.0, 1.0]])
        img = color_compensate(sp, "WB", 1.0)
        assert np.allclose(img.channels[:, 0, 0], [1, 1, 1])
        assert np.allclose(img.channels[:, 0, 1], [0, 0, 0])

    def test_bbg_midpoint_is_blue(self):
        sp = _sp([[0.0, 0.5, 1.0]])
        img = color_compensate(sp, "BBG", 1.0)
        assert np.allclose(img.channels[:, 0, 1], [0, 0, 1])

    def test_scale_c(self):
        # c scales the palette position: t=1 with c=0.5 lands on the blue
        # anchor, and with c=0.25 halfway between black and blue
        sp = _sp([[0.0, 1.0]])
        assert np.allclose(color_compensate(sp, "BBG", 0.5).channels[:, 0, 1], [0, 0, 1])
        assert np.allclose(color_compensate(sp, "BBG", 0.25).channels[:, 0, 1], [0, 0, 0.5])

    def test_rejects_bad_c(self):
        sp = _sp([[0.0, 1.0]])
        for c in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                color_compensate(sp, "BBG", c)

    def test_constant_input_no_division_by_zero(self):
        sp = _sp(np.full((4, 4), 3.7))
        img = color_compensate(sp, "WB", 1.0)
        # all-zero normalized image -> palette position 0 everywhere (white)
        assert np.allclose(img.channels, 1.0)

    def test_monotone_ordering_preserved(self):
        ts = np.linspace(0, 1, 50)
        for pal in ("BBG", "PG", "WB"):
            rgb = palette_map(pal, ts)
            # position along the palette is monotone in t per channel segment:
            # check via the anchor-table interpolant evaluated directly
            direct = palette_map(pal, ts)
            assert np.allclose(rgb, direct)
        sp = _sp([np.linspace(2.0, 9.0, 20)])
        img = color_compensate(sp, "WB", 1.0)
        lum = luminance(img)[0]
        assert np.all(np.diff(lum) <= 1e-12)  # WB darkens monotonically


class TestHighboost:
    def _img(self, arr):
        return ColorSpectrogram(np.stack([arr] * 3), "WB")

    def test_c_zero_identity(self):
        rng = np.random.default_rng(0)
        img = self._img(rng.uniform(0.2, 0.8, (9, 9)))
        out = highboost(img, 0.0)
        assert np.allclose(out.channels, img.channels)

    def test_constant_channel_unchanged(self):
        img = self._img(np.full((8, 10), 0.4))
        out = highboost(img, 2.0)
        assert np.allclose(out.channels, img.channels)

    def test_single_bright_pixel(self):
        arr = np.zeros((11, 11))
        arr[5, 5] = 0.5
        img = self._img(arr)
        c = 0.8
        out = highboost(img, c)
        # direct 5x5 convolution at the bright pixel: response = 0.5 * kernel center
        assert out.channels[0, 5, 5] == pytest.approx(0.5 + c * 0.5 * HIGHBOOST_KERNEL[2, 2])
        # ring neighbours get a negative response, clipped to 0
        assert out.channels[0, 5, 6] == 0.0
        assert out.channels[0, 3, 3] == 0.0

    def test_linear_in_c_before_clipping(self):
        rng = np.random.default_rng(1)
        arr = rng.uniform(0.45, 0.55, (12, 12))  # narrow band: no clipping
        img = self._img(arr)
        c1, c2 = 0.3, 0.5
        lhs = highboost(img, c1).channels + highboost(img, c2).channels - img.channels
        rhs = highboost(img, c1 + c2).channels
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestSvd:
    def test_rank_one(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=(12, 1))
        v = rng.normal(size=(1, 9))
        r = svd_reduce(u @ v, n_prime=2.0)
        assert r.kept_rank == 1
        assert np.allclose(svd_reconstruct(r), u @ v, atol=1e-6)

    def test_kept_rank_formula(self):
        rng = np.random.default_rng(3)
        mat = rng.normal(size=(100, 80))
        r = svd_reduce(mat, n_prime=2.0)
        assert r.kept_rank == 40

    def test_identity_dropped_energy(self):
        r = svd_reduce(np.eye(10), n_prime=2.0)
        assert r.kept_rank == 5
        err = np.linalg.norm(np.eye(10) - svd_reconstruct(r), "fro") ** 2
        assert err == pytest.approx(5.0)

    def test_full_rank_exact(self):
        rng = np.random.default_rng(4)
        mat = rng.normal(size=(7, 7))
        r = svd_reduce(mat, n_prime=1.0001)
        r = SvdReduction(r.singular_values, r.hangers, r.aligners, kept_rank=7)
        assert np.allclose(svd_reconstruct(r), mat, atol=1e-9)

    def test_error_matches_dropped_spectrum(self):
        rng = np.random.default_rng(5)
        mat = rng.normal(size=(20, 15))
        r = svd_reduce(mat, n_prime=2.0)
        r = SvdReduction(r.singular_values, r.hangers, r.aligners, kept_rank=7)
        err = np.linalg.norm(mat - svd_reconstruct(r), "fro")
        # independent spectrum: eigenvalues of the Gram matrix
        eig = np.sort(np.linalg.eigvalsh(mat.T @ mat))[::-1]
        expected = np.sqrt(np.sum(eig[7:]))
        assert err == pytest.approx(expected, rel=1e-6)

    def test_eckart_young(self):
        rng = np.random.default_rng(6)
        mat = rng.normal(size=(15, 12))
        r = svd_reduce(mat, n_prime=3.0)
        best = np.linalg.norm(mat - svd_reconstruct(r), "fro")
        k = r.kept_rank
        for _ in range(10):
            a = rng.normal(size=(15, k))
            b = rng.normal(size=(k, 12))
            assert np.linalg.norm(mat - a @ b, "fro") >= best - 1e-9

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            svd_reduce(np.array([[np.inf, 1.0]]), 2.0)
        with pytest.raises(ValueError):
            svd_reduce(np.ones((3, 3)), 1.0)
        r = svd_reduce(np.eye(4), 2.0)
        with pytest.raises(ValueError):
            SvdReduction(r.singular_values, r.hangers * 2.0, r.aligners, 2)

    def test_smooth_shape(self):
        rng = np.random.default_rng(7)
        mat = rng.uniform(size=(16, 24))
        out = svd_smooth(mat, 2.0)
        assert out.shape == mat.shape


class TestImageIo:
    def test_png(self, tmp_path):
        rng = np.random.default_rng(8)
        img = ColorSpectrogram(rng.uniform(0, 1, (3, 6, 8)), "PG")
        path = tmp_path / "x.png"
        save_png(img, path)
        with Image.open(path) as im:
            assert im.size == (8, 6)
            assert im.mode == "RGB"

    def test_channel_spg_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        img = ColorSpectrogram(rng.uniform(0, 1, (3, 5, 7)), "BBG", scale_c=0.57)
        paths = save_color_channels(img, tmp_path / "img0")
        assert len(paths) == 3
        back = load_color_channels(tmp_path / "img0", scale_c=0.57)
        assert back.palette == "BBG"
        assert np.allclose(back.channels, img.channels, atol=1e-6)

    def test_luminance_weights(self):
        img = ColorSpectrogram(np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))]), "WB")
        assert np.allclose(luminance(img), 0.299)
