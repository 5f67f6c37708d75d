import numpy as np
import pytest

from andes.augment import (
    AugmentConfig,
    CropConfig,
    View,
    band_dropout,
    denormalize,
    gaussian_blur,
    gaussian_kernel,
    hflip,
    multi_crop,
    normalize,
    random_resized_crop,
    resize_tile,
    sample_crop_box,
    spectral_jitter,
)
from andes.data import BandImage, BandStats


def rand_tile(size=64, bands=4, seed=0):
    rng = np.random.default_rng(seed)
    return BandImage(rng.integers(0, 256, size=(bands, size, size), dtype=np.uint8))


def unit_stats(bands):
    return BandStats(mean=np.zeros(bands), std=np.ones(bands))


class TestRandomResizedCrop:
    def test_identity_crop_equals_input(self):
        img = rand_tile(48, 3, seed=4)
        rng = np.random.default_rng(0)
        view = random_resized_crop(img, 48, (1.0, 1.0), (1.0, 1.0), rng)
        np.testing.assert_array_equal(view.tensor, img.data.astype(np.float32) / 255.0)

    def test_seeded_geometry_replays(self):
        img = rand_tile(64, 2, seed=1)
        v1 = random_resized_crop(img, 32, (0.2, 0.9), (0.75, 1.33), np.random.default_rng(77))
        v2 = random_resized_crop(img, 32, (0.2, 0.9), (0.75, 1.33), np.random.default_rng(77))
        np.testing.assert_array_equal(v1.tensor, v2.tensor)

    def test_quarter_area_gives_half_side(self):
        # sqrt(0.25 * 256^2) = 128
        rng = np.random.default_rng(5)
        top, left, h, w = sample_crop_box(256, 256, (0.25, 0.25), (1.0, 1.0), rng)
        assert (h, w) == (128, 128)
        assert 0 <= top <= 128 and 0 <= left <= 128

    def test_fallback_center_crop(self):
        # Impossible aspect at full scale forces the fallback.
        rng = np.random.default_rng(2)
        top, left, h, w = sample_crop_box(64, 64, (1.0, 1.0), (4.0, 4.0), rng)
        assert (top, left, h, w) == (0, 0, 64, 64)


class TestSpectralJitter:
    def test_zero_strength_is_identity(self):
        view = View(np.random.default_rng(3).uniform(size=(4, 8, 8)).astype(np.float32))
        out = spectral_jitter(view, 0.0, np.random.default_rng(1))
        np.testing.assert_allclose(out.tensor, view.tensor, atol=1e-6)

    def test_seeded_reproducible(self):
        view = View(np.full((3, 6, 6), 0.4, dtype=np.float32))
        o1 = spectral_jitter(view, 1.0, np.random.default_rng(9))
        o2 = spectral_jitter(view, 1.0, np.random.default_rng(9))
        np.testing.assert_array_equal(o1.tensor, o2.tensor)

    def test_mean_abs_change_matches_monte_carlo_oracle(self):
        # Oracle: draw (gains, offsets, brightness) from the declared uniform
        # distributions and evaluate clamp(G*(g*0.5 + o)) - 0.5 directly.
        strength, trials = 0.5, 4000
        oracle_rng = np.random.default_rng(123456)
        g = oracle_rng.uniform(0.8, 1.2, size=trials)
        o = oracle_rng.uniform(-0.05, 0.05, size=trials)
        big_g = oracle_rng.uniform(0.8, 1.2, size=trials)
        oracle = np.abs(np.clip(big_g * (g * 0.5 + o), 0, 1) - 0.5).mean()

        view = View(np.full((1, 2, 2), 0.5, dtype=np.float32))
        changes = [
            np.abs(spectral_jitter(view, strength, np.random.default_rng(s)).tensor - 0.5).mean()
            for s in range(trials)
        ]
        measured = float(np.mean(changes))
        assert measured == pytest.approx(oracle, rel=0.05)

    def test_rejects_bad_strength(self):
        view = View(np.zeros((1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            spectral_jitter(view, 1.5, np.random.default_rng(0))


class TestGaussianBlur:
    def test_kernel_normalized(self):
        for sigma in (0.1, 0.5, 1.3, 2.0, 3.7):
            assert abs(gaussian_kernel(sigma).sum() - 1.0) < 1e-6

    def test_small_sigma_mass_within_radius_one(self):
        view = np.zeros((1, 9, 9), dtype=np.float32)
        view[0, 4, 4] = 1.0
        out = gaussian_blur(View(view), (0.1, 0.1), np.random.default_rng(0)).tensor
        assert out[0, 3:6, 3:6].sum() >= 0.99 * out.sum()

    def test_constant_unchanged(self):
        view = View(np.full((2, 12, 12), 0.37, dtype=np.float32))
        out = gaussian_blur(view, (0.5, 2.0), np.random.default_rng(4))
        np.testing.assert_allclose(out.tensor, view.tensor, atol=1e-6)

    def test_sigma_floor(self):
        with pytest.raises(ValueError):
            gaussian_blur(View(np.zeros((1, 4, 4), np.float32)), (0.01, 1.0), np.random.default_rng(0))


class TestNormalize:
    def test_mean_view_maps_to_zero(self):
        stats = BandStats(mean=np.array([0.2, 0.6]), std=np.array([0.1, 0.5]))
        view = View(np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.6)]).astype(np.float32))
        np.testing.assert_allclose(normalize(view, stats).tensor, 0.0, atol=1e-7)

    def test_identity_stats(self):
        view = View(np.random.default_rng(1).uniform(size=(3, 5, 5)).astype(np.float32))
        np.testing.assert_array_equal(normalize(view, unit_stats(3)).tensor, view.tensor)

    def test_roundtrip(self):
        stats = BandStats(mean=np.array([0.3, 0.5, 0.1]), std=np.array([0.2, 0.4, 0.9]))
        view = View(np.random.default_rng(8).uniform(size=(3, 6, 6)).astype(np.float32))
        back = denormalize(normalize(view, stats), stats)
        np.testing.assert_allclose(back.tensor, view.tensor, atol=1e-6)

    def test_band_mismatch(self):
        with pytest.raises(ValueError):
            normalize(View(np.zeros((3, 4, 4), np.float32)), unit_stats(2))


class TestMultiCrop:
    def cfg(self, **kw):
        defaults = dict(global_size=28, local_size=14, n_local=8)
        defaults.update(kw)
        return CropConfig(**defaults)

    def test_default_counts(self):
        vs = multi_crop(rand_tile(64), self.cfg(), unit_stats(4), np.random.default_rng(0))
        assert len(vs.global_views) == 2
        assert len(vs.local_views) == 8
        assert all(v.size == 28 for v in vs.global_views)
        assert all(v.size == 14 for v in vs.local_views)

    def test_disabled_augment_is_plain_resize(self):
        img = rand_tile(64, seed=2)
        cfg = self.cfg(global_scale=(1.0, 1.0), local_scale=(1.0, 1.0))
        stats = BandStats(mean=np.full(4, 0.5), std=np.full(4, 0.25))
        vs = multi_crop(img, cfg, stats, np.random.default_rng(3), AugmentConfig.disabled())
        expected_g = normalize(resize_tile(img, 28), stats).tensor
        expected_l = normalize(resize_tile(img, 14), stats).tensor
        for v in vs.global_views:
            np.testing.assert_array_equal(v.tensor, expected_g)
        for v in vs.local_views:
            np.testing.assert_array_equal(v.tensor, expected_l)

    def test_same_seed_identical(self):
        img = rand_tile(64, seed=5)
        vs1 = multi_crop(img, self.cfg(), unit_stats(4), np.random.default_rng(42))
        vs2 = multi_crop(img, self.cfg(), unit_stats(4), np.random.default_rng(42))
        for a, b in zip(vs1.global_views + vs1.local_views, vs2.global_views + vs2.local_views):
            np.testing.assert_array_equal(a.tensor, b.tensor)

    def test_views_finite_and_prenorm_in_unit_range(self):
        img = rand_tile(64, seed=7)
        vs = multi_crop(img, self.cfg(), unit_stats(4), np.random.default_rng(11))
        for v in vs.global_views + vs.local_views:
            assert np.all(np.isfinite(v.tensor))
            # identity stats means these are the pre-normalization samples
            assert v.tensor.min() >= 0.0 and v.tensor.max() <= 1.0

    def test_band_dropout_zeroes_one_band(self):
        view = View(np.random.default_rng(0).uniform(0.2, 0.9, size=(5, 4, 4)).astype(np.float32))
        out = band_dropout(view, np.random.default_rng(3))
        zeroed = [b for b in range(5) if np.all(out.tensor[b] == 0)]
        assert len(zeroed) == 1
        kept = [b for b in range(5) if b not in zeroed]
        np.testing.assert_array_equal(out.tensor[kept], view.tensor[kept])

    def test_hflip_mirrors_columns(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4) / 16.0
        np.testing.assert_array_equal(hflip(View(img)).tensor, img[:, :, ::-1])
