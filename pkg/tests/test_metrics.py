import math

import mpmath
import numpy as np
import pytest

from nldenoise.errors import DegenerateDifferencesError, MetricError, ParameterError
from nldenoise.metrics import (
    PSNR_INF,
    MetricsRow,
    betainc_reg,
    box_summary,
    delta_ci,
    paired_t_test,
    psnr,
    read_metrics_csv,
    report,
    ssim3d,
    t_sf_two_sided,
    write_report_csv,
)
from reference_metrics import EXPECTED_MEANS, metrics_rows, write_csv


class TestPsnr:
    def test_identical_is_sentinel(self):
        x = np.random.default_rng(0).random((8, 8, 8))
        assert psnr(x, x) == PSNR_INF

    def test_uniform_offset(self):
        ref = np.zeros((8, 8, 8))
        ref[0, 0, 0] = 1.0  # peak 1
        pred = ref + 0.1
        assert psnr(pred, ref) == pytest.approx(20.0)

    def test_matches_recomputation_oracle(self):
        rng = np.random.default_rng(1)
        ref = rng.random((10, 10, 10))
        pred = ref + rng.normal(0, 0.05, ref.shape)
        mse = float(np.mean((pred - ref) ** 2))
        expected = 20.0 * math.log10(ref.max() / math.sqrt(mse))
        assert psnr(pred, ref) == pytest.approx(expected, abs=1e-9)

    def test_affine_rescale_invariance(self):
        rng = np.random.default_rng(2)
        ref = rng.random((8, 8, 8)) + 0.5
        pred = ref + rng.normal(0, 0.1, ref.shape)
        assert psnr(3.7 * pred, 3.7 * ref) == pytest.approx(psnr(pred, ref), abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))

    def test_zero_reference(self):
        with pytest.raises(MetricError):
            psnr(np.ones((4, 4, 4)), np.zeros((4, 4, 4)))


def ssim_window_oracle(pred, ref, c1, c2):
    """Dense sliding-window SSIM: explicit Gaussian-weighted moments per
    valid window position."""
    radius, sigma = 3, 1.5
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k1d = np.exp(-0.5 * (x / sigma) ** 2)
    k1d /= k1d.sum()
    kern = k1d[:, None, None] * k1d[None, :, None] * k1d[None, None, :]
    d, h, w = pred.shape
    vals = []
    for z in range(d - 6):
        for y in range(h - 6):
            for xx in range(w - 6):
                wp = pred[z : z + 7, y : y + 7, xx : xx + 7]
                wr = ref[z : z + 7, y : y + 7, xx : xx + 7]
                mp = float((kern * wp).sum())
                mr = float((kern * wr).sum())
                vp = float((kern * wp * wp).sum()) - mp * mp
                vr = float((kern * wr * wr).sum()) - mr * mr
                cpr = float((kern * wp * wr).sum()) - mp * mr
                vals.append(
                    ((2 * mp * mr + c1) * (2 * cpr + c2))
                    / ((mp * mp + mr * mr + c1) * (vp + vr + c2))
                )
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        x = np.random.default_rng(3).random((9, 9, 9))
        assert ssim3d(x, x) == 1.0

    def test_constant_volumes_closed_form(self):
        ref = np.full((9, 9, 9), 0.5)
        pred = np.full((9, 9, 9), 0.7)
        c1 = 1e-4
        expected = (2 * 0.5 * 0.7 + c1) / (0.25 + 0.49 + c1)
        assert ssim3d(pred, ref, data_range=1.0) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.94595, abs=5e-6)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        ref = rng.random((9, 9, 9))
        pred = ref + rng.normal(0, 0.1, ref.shape)
        dr = float(ref.max() - ref.min())
        expected = ssim_window_oracle(pred, ref, (0.01 * dr) ** 2, (0.03 * dr) ** 2)
        assert ssim3d(pred, ref) == pytest.approx(expected, abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.random((9, 9, 9))
        b = rng.random((9, 9, 9))
        dr = 1.0
        assert ssim3d(a, b, data_range=dr) == pytest.approx(ssim3d(b, a, data_range=dr), abs=1e-12)

    def test_too_small_volume(self):
        with pytest.raises(MetricError):
            ssim3d(np.zeros((5, 9, 9)), np.zeros((5, 9, 9)))


class TestIncompleteBeta:
    @pytest.mark.parametrize("df", [2, 5, 14])
    def test_t_tail_matches_quadrature(self, df):
        # high-precision oracle: numerical integration of the t density
        mpmath.mp.dps = 30
        for t in (0.1, 0.5, 1.0, 2.5, 4.0, 7.0, 10.0):
            pdf = lambda u: (
                mpmath.gamma((df + 1) / 2)
                / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
                * (1 + u**2 / df) ** (-(df + 1) / 2)
            )
            tail = 2 * mpmath.quad(pdf, [t, mpmath.inf])
            assert abs(t_sf_two_sided(t, df) - float(tail)) < 1e-9

    def test_betainc_bounds(self):
        assert betainc_reg(2.0, 3.0, 0.0) == 0.0
        assert betainc_reg(2.0, 3.0, 1.0) == 1.0


class TestPairedTTest:
    def test_identical_samples(self):
        a = [1.0, 2.0, 3.0]
        with pytest.raises(DegenerateDifferencesError):
            paired_t_test(a, a)

    def test_closed_form_df2(self):
        res = paired_t_test([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])
        t = res.t_stat
        assert t == pytest.approx(2.0 / (1.0 / math.sqrt(3)), rel=1e-12)
        # closed-form two-sided p for df=2
        expected_p = 2 * (0.5 - t / (2 * math.sqrt(t * t + 2)))
        assert res.p_two_sided == pytest.approx(expected_p, abs=1e-12)
        assert res.p_two_sided == pytest.approx(0.0742, abs=5e-5)

    def test_antisymmetric(self):
        rng = np.random.default_rng(6)
        a = rng.random(10)
        b = a + rng.normal(0.2, 0.1, 10)
        r1 = paired_t_test(a, b)
        r2 = paired_t_test(b, a)
        assert r1.t_stat == pytest.approx(-r2.t_stat, rel=1e-12)
        assert r1.p_two_sided == pytest.approx(r2.p_two_sided, rel=1e-12)

    def test_reference_table_psnr_p_value(self):
        rows = metrics_rows()
        res = paired_t_test([r.psnr_a for r in rows], [r.psnr_b for r in rows])
        assert res.df == 14
        assert 3e-6 <= res.p_two_sided <= 3e-5

    def test_too_few_pairs(self):
        with pytest.raises(ParameterError):
            paired_t_test([1.0], [2.0])


class TestDeltaCi:
    def test_constant_deltas(self):
        with pytest.raises(ParameterError):
            delta_ci([2.0])
        lo, hi = delta_ci([2.0, 2.0, 2.0])
        assert lo == hi == 2.0

    def test_hand_arithmetic(self):
        lo, hi = delta_ci([0.0, 2.0])
        assert lo == pytest.approx(-0.959964, abs=1e-6)
        assert hi == pytest.approx(2.959964, abs=1e-6)

    def test_outlier_never_shrinks_width(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            d = rng.normal(0, 1, 10).tolist()
            lo, hi = delta_ci(d)
            lo2, hi2 = delta_ci(d + [25.0])
            assert (hi2 - lo2) >= (hi - lo)


class TestBoxSummary:
    def test_five_numbers(self):
        s = box_summary([1, 2, 3, 4, 5])
        assert (s["q1"], s["median"], s["q3"]) == (2.0, 3.0, 4.0)
        assert s["outliers"] == []

    def test_single_value(self):
        s = box_summary([4.2])
        assert s["min"] == s["q1"] == s["median"] == s["q3"] == s["max"] == 4.2
        assert s["outliers"] == []

    def test_outlier_flagged(self):
        s = box_summary([1, 2, 3, 4, 100])
        assert s["outliers"] == [100.0]
        assert s["whisker_hi"] == 4.0


class TestReport:
    def test_reference_table_means(self):
        rep = report(metrics_rows())
        for col, expected in EXPECTED_MEANS.items():
            assert rep["means"][col] == pytest.approx(expected, abs=0.005)

    def test_single_row_mean(self):
        row = MetricsRow("x", 40.0, 42.0, 43.0, 0.9, 0.93, 0.94)
        rep = report([row])
        assert rep["means"]["psnr_a"] == 42.0

    def test_csv_round_trip(self, tmp_path):
        rows = metrics_rows()
        write_report_csv(tmp_path / "r.csv", rows)
        back = read_metrics_csv(tmp_path / "r.csv")
        assert back == rows

    def test_csv_import_fixture(self, tmp_path):
        write_csv(tmp_path / "ref.csv")
        rows = read_metrics_csv(tmp_path / "ref.csv")
        assert len(rows) == 15
        rep = report(rows)
        assert 3e-6 <= rep["psnr_test"]["p_two_sided"] <= 3e-5
        # SSIM differences collapse under 2-decimal rounding; the p-value is
        # not comparable to the PSNR one and is merely required to exist
        assert rep["ssim_test"] is None or rep["ssim_test"]["p_two_sided"] > 1e-4
