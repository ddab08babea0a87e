import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nldenoise.errors import (
    ConstantInputError,
    EmptyBackgroundError,
    EmptyMaskError,
    ParameterError,
)
from nldenoise.noise import (
    BinningConfig,
    EmbedStats,
    NoiseBin,
    background_lumpiness,
    classify_bin,
    cov,
    describe_patch,
    embed_scalar,
    fit_embed_stats,
    mask_mean,
    otsu_threshold,
)
from nldenoise.volume import Patch


def otsu_oracle(values, bins=256):
    """Exhaustive search over all interior bin edges, lowest tie wins."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = vals.min(), vals.max()
    idx = np.minimum(((vals - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    best_k, best_score = 1, -1.0
    for k in range(1, bins):
        in0 = idx < k
        n0 = int(in0.sum())
        n1 = idx.size - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = float(idx[in0].sum()) / n0
        mu1 = float(idx[~in0].sum()) / n1
        score = n0 * n1 * (mu0 - mu1) * (mu0 - mu1)
        if score > best_score:
            best_score, best_k = score, k
    return lo + best_k * (hi - lo) / bins


def make_patch(values, p=None):
    values = np.asarray(values, dtype=np.float32)
    if p is None:
        p = round(values.size ** (1 / 3))
    return Patch(origin=(0, 0, 0), size=p, values=values.reshape(p, p, p))


class TestOtsu:
    def test_constant_input(self):
        with pytest.raises(ConstantInputError):
            otsu_threshold(np.full(100, 5.0))

    def test_two_clusters(self):
        vals = np.concatenate([np.zeros(500), np.full(500, 10.0)])
        thr = otsu_threshold(vals)
        assert 0.0 < thr < 10.0
        assert np.array_equal(vals > thr, vals == 10.0)

    def test_matches_exhaustive_oracle_bimodal(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            vals = np.concatenate([
                rng.normal(2.0, 0.5, 400),
                rng.normal(8.0, 1.0, 600),
            ])
            assert otsu_threshold(vals) == otsu_oracle(vals)

    def test_matches_exhaustive_oracle_unimodal(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            vals = rng.gamma(2.0, 2.0, 500)
            assert otsu_threshold(vals) == otsu_oracle(vals)

    def test_custom_bin_count(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(0, 1, 300)
        assert otsu_threshold(vals, 64) == otsu_oracle(vals, 64)


class TestMaskMean:
    def test_two_level(self):
        patch = make_patch([0, 0, 0, 0, 10, 10, 10, 10], p=2)
        mean, count = mask_mean(patch, 5.0)
        assert mean == 10.0
        assert count == 4

    def test_full_mask(self):
        rng = np.random.default_rng(0)
        patch = make_patch(rng.random(27) + 1.0, p=3)
        mean, count = mask_mean(patch, 0.5)
        assert count == 27
        assert mean == pytest.approx(float(patch.values.mean(dtype=np.float64)))

    def test_empty_mask(self):
        patch = make_patch(np.ones(8), p=2)
        with pytest.raises(EmptyMaskError):
            mask_mean(patch, 1.0)


class TestCov:
    def test_values(self):
        assert cov(100.0) == pytest.approx(0.1)
        assert cov(1.0) == 1.0

    def test_zero_rejected(self):
        with pytest.raises(ParameterError):
            cov(0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 1e6), st.floats(0.01, 1e6))
    def test_strictly_decreasing(self, m1, m2):
        if m1 == m2:
            return
        lo, hi = sorted([m1, m2])
        assert cov(lo) > cov(hi)


class TestLumpiness:
    def test_flat_background(self):
        patch = make_patch([1, 1, 1, 1, 9, 9, 9, 9], p=2)
        assert background_lumpiness(patch, 5.0) == 0.0

    def test_known_value(self):
        patch = make_patch([1, 1, 3, 3, 9, 9, 9, 9], p=2)
        # background {1,1,3,3}: population std 1, mean 2
        assert background_lumpiness(patch, 5.0) == pytest.approx(0.5, abs=1e-6)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        vals = (rng.random(64) * 4).astype(np.float32)
        patch = make_patch(vals, p=4)
        thr = 2.0
        bg = vals[vals <= thr].astype(np.float64)
        mean = sum(bg) / len(bg)
        var = sum((x - mean) ** 2 for x in bg) / len(bg)
        expected = math.sqrt(var) / (mean + 1e-6)
        assert background_lumpiness(patch, thr) == pytest.approx(expected, abs=1e-9)

    def test_empty_background(self):
        patch = make_patch(np.arange(8) + 10.0, p=2)
        with pytest.raises(EmptyBackgroundError):
            background_lumpiness(patch, 1.0)


class TestClassify:
    CFG = BinningConfig(cov_split=0.3, lump_split=0.2)

    @pytest.mark.parametrize("c,l,expected", [
        (0.5, 0.05, NoiseBin.HIGH_NOISE_CLEAN),
        (0.1, 0.4, NoiseBin.LOW_NOISE_LUMPY),
        (0.3, 0.2, NoiseBin.HIGH_NOISE_LUMPY),  # boundary inclusive
        (0.1, 0.05, NoiseBin.LOW_NOISE_CLEAN),
        (0.5, 0.5, NoiseBin.HIGH_NOISE_LUMPY),
    ])
    def test_cases(self, c, l, expected):
        assert classify_bin(c, l, self.CFG) is expected


class TestEmbedScalar:
    STATS = EmbedStats(mu_logcov=-1.0, sigma_logcov=0.5)

    def test_centered(self):
        assert embed_scalar(math.exp(-1.0), self.STATS) == pytest.approx(0.0, abs=1e-12)

    def test_one_sigma(self):
        assert embed_scalar(math.exp(-0.5), self.STATS) == pytest.approx(1.0, abs=1e-12)

    def test_refit_standardizes(self):
        rng = np.random.default_rng(4)
        covs = np.exp(rng.normal(-1.5, 0.7, 200))
        stats = fit_embed_stats(covs)
        scalars = np.array([embed_scalar(c, stats) for c in covs])
        assert scalars.mean() == pytest.approx(0.0, abs=1e-6)
        assert scalars.std(ddof=1) == pytest.approx(1.0, abs=1e-6)

    def test_non_positive_cov(self):
        with pytest.raises(ParameterError):
            embed_scalar(0.0, self.STATS)


class TestDescribePatch:
    CFG = BinningConfig()
    STATS = EmbedStats(mu_logcov=-1.0, sigma_logcov=0.5)

    def _half_patch(self, hot=100.0):
        vals = np.zeros((4, 4, 4), dtype=np.float32)
        vals[2:] = hot
        return Patch(origin=(0, 0, 0), size=4, values=vals)

    def test_composition(self):
        desc = describe_patch(self._half_patch(), self.CFG, self.STATS)
        assert desc.mask_mean_counts == pytest.approx(100.0)
        assert desc.cov == pytest.approx(0.1)
        assert desc.bin in (NoiseBin.LOW_NOISE_CLEAN, NoiseBin.LOW_NOISE_LUMPY)
        assert desc.cov == pytest.approx(1.0 / math.sqrt(desc.mask_mean_counts))

    def test_scaling_halves_cov(self):
        d1 = describe_patch(self._half_patch(100.0), self.CFG, self.STATS)
        d4 = describe_patch(self._half_patch(400.0), self.CFG, self.STATS)
        assert d4.cov == pytest.approx(d1.cov / 2)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        vals = rng.poisson(20.0, size=(4, 4, 4)).astype(np.float32)
        patch = Patch(origin=(0, 0, 0), size=4, values=vals)
        d1 = describe_patch(patch, self.CFG, self.STATS)
        d2 = describe_patch(patch, self.CFG, self.STATS)
        assert d1 == d2

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        vals = rng.poisson(15.0, size=64).astype(np.float32) + rng.random(64).astype(np.float32)
        p1 = make_patch(vals, p=4)
        p2 = make_patch(rng.permutation(vals), p=4)
        d1 = describe_patch(p1, self.CFG, self.STATS)
        d2 = describe_patch(p2, self.CFG, self.STATS)
        assert d1.otsu_threshold == d2.otsu_threshold
        assert d1.cov == pytest.approx(d2.cov, rel=1e-6)
        assert d1.bin is d2.bin

    def test_poisson_cov_statistics(self):
        # Poisson(lam) foreground: empirical std/mean should approach 1/sqrt(lam)
        rng = np.random.default_rng(7)
        lam = 50.0
        vals = rng.poisson(lam, size=(16, 16, 16)).astype(np.float32)
        emp = vals.std() / vals.mean()
        assert emp == pytest.approx(1.0 / math.sqrt(lam), rel=0.05)
