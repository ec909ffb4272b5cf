import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chesscal.heatmap import (
    GaussianFitError,
    Heatmap,
    STATUS_INLIER,
    STATUS_REJECTED_RESIDUAL,
    STATUS_REJECTED_SIGMA,
    CornerObservation,
    detect_peaks,
    fit_gaussian_surface,
    heatmap_mse,
    observations_from_json,
    observations_to_json,
    read_hmap,
    reject_outliers,
    render_heatmap,
    response_detect,
    write_hmap,
)


def gaussian_patch(size, mu, sigma):
    """Direct evaluation of the blob model on an integer raster."""
    yy, xx = np.mgrid[0 : size[1], 0 : size[0]]
    return np.exp(
        -((xx - mu[0]) ** 2) / (2 * sigma[0] ** 2) - ((yy - mu[1]) ** 2) / (2 * sigma[1] ** 2)
    )


def antialiased_disk(center, radius, size, ss=8, taper=0.08):
    """Near-uniform disk; the faint taper gives it a unique peak pixel
    without making it remotely Gaussian."""
    yy, xx = np.mgrid[0 : size[1] * ss, 0 : size[0] * ss]
    xs = (xx + 0.5) / ss - 0.5
    ys = (yy + 0.5) / ss - 0.5
    d = np.hypot(xs - center[0], ys - center[1])
    inside = np.where(d <= radius, 1.0 - taper * (d / radius) ** 2, 0.0)
    return inside.reshape(size[1], ss, size[0], ss).mean(axis=(1, 3))


class TestRenderHeatmap:
    def test_integer_center_values(self):
        h = render_heatmap([[10.0, 10.0]], 1.5, (32, 32))
        assert h.values[10, 10] == pytest.approx(1.0)
        assert h.values[11, 10] == pytest.approx(np.exp(-1 / 4.5), abs=1e-12)
        assert h.values[11, 10] == pytest.approx(0.8007, abs=1e-4)

    def test_empty_corner_list(self):
        h = render_heatmap([], 1.5, (16, 8))
        assert h.width == 16 and h.height == 8
        assert not h.values.any()

    def test_disjoint_supports_add(self):
        both = render_heatmap([[8.0, 8.0], [40.0, 40.0]], 1.5, (64, 64))
        one = render_heatmap([[8.0, 8.0]], 1.5, (64, 64))
        two = render_heatmap([[40.0, 40.0]], 1.5, (64, 64))
        assert np.array_equal(both.values, one.values + two.values)

    def test_overlap_is_max_not_sum(self):
        both = render_heatmap([[10.0, 10.0], [11.0, 10.0]], 1.5, (24, 24))
        assert both.values.max() <= 1.0


class TestHeatmapMse:
    def test_identical_zero(self, rng):
        h = Heatmap(rng.random((9, 7)))
        assert heatmap_mse(h, h) == 0.0

    def test_zero_vs_one(self):
        a = Heatmap(np.zeros((2, 2)))
        b = Heatmap(np.ones((2, 2)))
        assert heatmap_mse(a, b) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            heatmap_mse(Heatmap(np.zeros((2, 2))), Heatmap(np.zeros((2, 3))))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((5, 6)), r.random((5, 6))
        expected = sum(
            (a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(6)
        ) / 30.0
        assert heatmap_mse(Heatmap(a), Heatmap(b)) == pytest.approx(expected, abs=1e-12)


class TestDetectPeaks:
    def test_single_corner_single_peak(self):
        h = render_heatmap([[12.3, 17.8]], 1.5, (32, 32))
        peaks = detect_peaks(h, 0.3, 4.0)
        assert peaks == [(12, 18)]

    def test_all_zero_empty(self):
        assert detect_peaks(Heatmap(np.zeros((16, 16))), 0.3, 4.0) == []

    def test_grid_count(self, rng):
        xs = 15.0 + 12.0 * np.arange(11)
        ys = 20.0 + 13.0 * np.arange(8)
        corners = np.array([[x + rng.uniform(-0.4, 0.4), y + rng.uniform(-0.4, 0.4)] for y in ys for x in xs])
        h = render_heatmap(corners, 1.5, (180, 140))
        peaks = detect_peaks(h, 0.3, 6.0)
        assert len(peaks) == 88

    def test_order_descending_value(self, rng):
        v = np.zeros((20, 20))
        v[5, 5] = 0.9
        v[15, 15] = 0.7
        v[5, 15] = 0.8
        peaks = detect_peaks(Heatmap(v), 0.5, 2.0)
        assert peaks == [(5, 5), (15, 5), (15, 15)]

    def test_suppression_radius(self):
        v = np.zeros((20, 20))
        v[10, 10] = 0.9
        v[10, 13] = 0.8
        assert detect_peaks(Heatmap(v), 0.5, 5.0) == [(10, 10)]
        assert detect_peaks(Heatmap(v), 0.5, 2.0) == [(10, 10), (13, 10)]


class TestFitGaussianSurface:
    def test_subpixel_center_exact(self):
        mu = (10.37, 22.81)
        h = Heatmap(gaussian_patch((40, 40), mu, (1.5, 1.5)))
        obs = fit_gaussian_surface(h, (10, 23), window=7)
        assert np.abs(obs.mu - mu).max() < 1e-6

    def test_integral_center_exact(self):
        h = Heatmap(gaussian_patch((40, 40), (15.0, 20.0), (1.5, 1.5)))
        obs = fit_gaussian_surface(h, (15, 20), window=7)
        assert np.abs(obs.mu - (15.0, 20.0)).max() < 1e-9
        assert np.abs(obs.sigma - 1.5).max() < 1e-6
        assert obs.fit_residual < 1e-9

    def test_flat_patch_rejected(self):
        v = np.full((20, 20), 0.5)
        with pytest.raises(GaussianFitError):
            fit_gaussian_surface(Heatmap(v), (10, 10), window=7)

    def test_anisotropic_sigma_recovered(self):
        h = Heatmap(gaussian_patch((40, 40), (20.2, 19.7), (1.2, 2.4)))
        obs = fit_gaussian_surface(h, (20, 20), window=9)
        assert np.abs(obs.sigma - (1.2, 2.4)).max() < 1e-6

    def test_amplitude_invariance(self):
        # scaled blobs (network outputs rarely peak at exactly 1) keep mu
        h = Heatmap(0.6 * gaussian_patch((40, 40), (18.6, 14.2), (1.5, 1.5)))
        obs = fit_gaussian_surface(h, (19, 14), window=7)
        assert np.abs(obs.mu - (18.6, 14.2)).max() < 1e-6

    def test_exactness_over_sigma_range(self, rng):
        for _ in range(50):
            mu = rng.uniform(12, 20, size=2)
            sigma = rng.uniform(1.0, 3.0)
            h = Heatmap(gaussian_patch((33, 33), mu, (sigma, sigma)))
            obs = fit_gaussian_surface(h, tuple(np.rint(mu).astype(int)), window=7)
            assert np.abs(obs.mu - mu).max() < 1e-6

    def test_translation_equivariance_exact(self):
        # fits in local window coordinates are bit-identical, so the
        # recovered offsets from the shifted peaks agree exactly
        base = gaussian_patch((60, 60), (21.43, 25.91), (1.5, 1.5))
        shifted = np.roll(np.roll(base, 7, axis=0), 11, axis=1)
        obs0 = fit_gaussian_surface(Heatmap(base), (21, 26), window=7)
        obs1 = fit_gaussian_surface(Heatmap(shifted), (32, 33), window=7)
        # identical up to one float addition of the integer peak offset
        assert np.allclose(obs1.mu - obs0.mu, (11.0, 7.0), atol=1e-12, rtol=0)
        assert np.array_equal(obs0.sigma, obs1.sigma)
        assert obs0.fit_residual == obs1.fit_residual

    def test_window_validation(self):
        h = Heatmap(np.zeros((20, 20)))
        with pytest.raises(ValueError):
            fit_gaussian_surface(h, (10, 10), window=6)

    def test_border_window_shrinks_then_errors(self):
        h = Heatmap(gaussian_patch((30, 30), (1.0, 15.0), (1.5, 1.5)))
        # one pixel in: the window clips to 5 columns and still fits
        obs = fit_gaussian_surface(h, (1, 15), window=7)
        assert abs(obs.mu[0] - 1.0) < 1e-6
        h0 = Heatmap(gaussian_patch((30, 30), (0.0, 15.0), (1.5, 1.5)))
        with pytest.raises(GaussianFitError):
            fit_gaussian_surface(h0, (0, 15), window=7)

    def test_noise_degradation_bound(self, rng):
        errors = []
        for _ in range(1000):
            mu = rng.uniform(14, 18, size=2)
            base = gaussian_patch((33, 33), mu, (1.5, 1.5))
            noisy = base + rng.uniform(-0.01, 0.01, size=base.shape)
            obs = fit_gaussian_surface(Heatmap(noisy), tuple(np.rint(mu).astype(int)), window=7)
            errors.append(np.abs(obs.mu - mu).max())
        errors = np.array(errors)
        assert (errors < 0.05).mean() >= 0.99


class TestRejectOutliers:
    def obs(self, sx, sy, resid=1e-4):
        return CornerObservation(mu=(5.0, 5.0), sigma=(sx, sy), fit_residual=resid)

    def test_all_exact_sigma_inliers(self):
        out = reject_outliers([self.obs(1.5, 1.5)] * 4, sigma_ref=1.5, tau=2.0)
        assert all(o.status == STATUS_INLIER for o in out)

    def test_wide_sigma_rejected(self):
        out = reject_outliers([self.obs(1.5, 1.5), self.obs(6.0, 1.5)], sigma_ref=1.5, tau=2.0)
        assert out[0].status == STATUS_INLIER
        assert out[1].status == STATUS_REJECTED_SIGMA

    def test_high_residual_rejected(self):
        out = reject_outliers([self.obs(1.5, 1.5, resid=0.2)], sigma_ref=1.5, tau=2.0)
        assert out[0].status == STATUS_REJECTED_RESIDUAL

    def test_positions_and_order_preserved(self, rng):
        obs = [self.obs(1.5 + 0.1 * i, 1.5) for i in range(6)]
        out = reject_outliers(obs)
        for before, after in zip(obs, out):
            assert np.array_equal(before.mu, after.mu)
            assert np.array_equal(before.sigma, after.sigma)

    def test_disk_blob_rejected_true_corners_kept(self, rng):
        size = (140, 100)
        corners = np.array([[20.0 + 30 * j, 20.0 + 30 * i] for i in range(3) for j in range(4)])
        raster = render_heatmap(corners, 1.5, size).values
        disk = antialiased_disk((65.0, 35.0), 4.0, size)
        combined = Heatmap(np.maximum(raster, disk))
        peaks = detect_peaks(combined, 0.3, 6.0)
        assert len(peaks) == 13
        observations = [fit_gaussian_surface(combined, p, window=7) for p in peaks]
        out = reject_outliers(observations, sigma_ref=1.5, tau=2.0, residual_max=0.05)
        for peak, o in zip(peaks, out):
            near_disk = np.hypot(peak[0] - 65.0, peak[1] - 35.0) < 5
            if near_disk:
                assert o.status in (STATUS_REJECTED_SIGMA, STATUS_REJECTED_RESIDUAL)
            else:
                assert o.status == STATUS_INLIER

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            reject_outliers([], tau=1.0)


class TestResponseDetect:
    def test_constant_image_zero(self):
        h = response_detect(np.full((64, 64), 0.37), kernel_radius=4)
        assert not h.values.any()

    def test_synthetic_junction_strong_response(self):
        # ideal response is 2r^2/(2r * sqrt(3n/16)) ~ 0.89: the kernel's
        # zeroed center cross still counts toward the window energy
        yy, xx = np.mgrid[0:41, 0:41]
        pattern = ((xx >= 20) ^ (yy >= 20)).astype(float)
        h = response_detect(pattern, kernel_radius=4)
        assert h.values[20, 20] > 0.85

    def test_straight_edge_cancels(self):
        yy, xx = np.mgrid[0:41, 0:41]
        edge = (xx >= 17).astype(float)
        h = response_detect(edge, kernel_radius=4)
        assert h.values[5:-5, 5:-5].max() < 0.2


class TestHmapSerialization:
    def test_roundtrip_under_float32(self, tmp_path, rng):
        h = render_heatmap(rng.uniform(5, 55, size=(12, 2)), 1.5, (64, 48))
        path = tmp_path / "x.hmap"
        write_hmap(path, h)
        back = read_hmap(path)
        assert back.width == 64 and back.height == 48
        assert heatmap_mse(h, back) < 1e-12

    def test_header_layout(self, tmp_path):
        h = Heatmap(np.zeros((3, 5)))
        path = tmp_path / "y.hmap"
        write_hmap(path, h)
        raw = path.read_bytes()
        assert raw[:4] == b"HMAP"
        assert int.from_bytes(raw[4:8], "little") == 5
        assert int.from_bytes(raw[8:12], "little") == 3
        assert len(raw) == 12 + 4 * 15

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hmap"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            read_hmap(path)

    def test_observation_json_roundtrip(self):
        obs = [
            CornerObservation(mu=(1.5, 2.5), sigma=(1.2, 1.6), fit_residual=0.01, status="inlier"),
            CornerObservation(mu=(9.0, 3.0), sigma=(4.0, 4.0), fit_residual=0.2, status="rejected_sigma"),
        ]
        back = observations_from_json(observations_to_json(obs))
        for a, b in zip(obs, back):
            assert np.array_equal(a.mu, b.mu)
            assert np.array_equal(a.sigma, b.sigma)
            assert a.status == b.status


class TestHeatmapType:
    def test_clamped_on_construction(self):
        h = Heatmap(np.array([[-0.5, 0.5], [1.5, 1.0]]))
        assert h.values.min() >= 0.0 and h.values.max() <= 1.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Heatmap(np.array([[np.nan, 0.0]]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_mse_nonnegative_and_zero_on_self(self, seed):
        r = np.random.default_rng(seed)
        h = Heatmap(r.random((4, 4)))
        g = Heatmap(r.random((4, 4)))
        assert heatmap_mse(h, g) >= 0.0
        assert heatmap_mse(h, h) == 0.0
