"""Image-quality metrics and paired statistics.

PSNR uses the reference maximum as the peak (configurable to a fixed
peak). SSIM is the standard Gaussian-window formulation computed over the
valid (fully inside) window positions of a 3D volume. The paired t-test
p-value comes from a hand-rolled regularized incomplete beta (Lentz
continued fraction), and the normal-assumption CI uses the z quantile.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateDifferencesError, MetricError, ParameterError

Z_95 = 1.959964  # two-sided 95% normal quantile

PSNR_INF = float("inf")  # sentinel for identical volumes


def _check_dims(pred, ref):
    pred = np.asarray(pred.values if hasattr(pred, "values") else pred, dtype=np.float64)
    ref = np.asarray(ref.values if hasattr(ref, "values") else ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise MetricError(f"volume shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref, peak: float = None) -> float:
    """20*log10(peak / rmse); peak defaults to max(ref)."""
    p, r = _check_dims(pred, ref)
    if peak is None:
        peak = float(r.max())
    if peak <= 0:
        raise MetricError("reference peak must be positive")
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 20.0 * math.log10(peak / math.sqrt(mse))


def _gaussian_window(sigma: float = 1.5, radius: int = 3) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim3d(pred, ref, sigma: float = 1.5, radius: int = 3,
           k1: float = 0.01, k2: float = 0.03, data_range: float = None) -> float:
    """Mean SSIM over all valid 7^3 Gaussian-window positions."""
    p, r = _check_dims(pred, ref)
    if min(p.shape) < 2 * radius + 1:
        raise MetricError(f"volume shape {p.shape} smaller than the {2 * radius + 1}^3 window")
    if data_range is None:
        data_range = float(r.max() - r.min())
        if data_range == 0.0:
            data_range = float(r.max()) if r.max() > 0 else 1.0
    if data_range <= 0:
        raise MetricError("data range must be positive")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    taps = _gaussian_window(sigma, radius)

    def smooth(a):
        for axis in range(3):
            a = correlate1d(a, taps, axis=axis, mode="constant")
        return a[radius:-radius, radius:-radius, radius:-radius]

    mu_p = smooth(p)
    mu_r = smooth(r)
    var_p = smooth(p * p) - mu_p**2
    var_r = smooth(r * r) - mu_r**2
    cov_pr = smooth(p * r) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov_pr + c2)
    den = (mu_p**2 + mu_r**2 + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# regularized incomplete beta and the t distribution
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Lentz's continued fraction for the incomplete beta function."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ParameterError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t."""
    if df < 1:
        raise ParameterError("df must be >= 1")
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class PairedTestResult:
    n: int
    mean_diff: float
    sd_diff: float
    t_stat: float
    df: int
    p_two_sided: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def paired_t_test(a, b) -> PairedTestResult:
    """Two-sided paired t-test on d = b - a (sample sd, n-1 denominator)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError("paired samples must be equal-length 1D sequences")
    n = a.size
    if n < 2:
        raise ParameterError("need at least 2 pairs")
    d = b - a
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateDifferencesError("all paired differences are identical")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return PairedTestResult(
        n=n,
        mean_diff=float(d.mean()),
        sd_diff=sd,
        t_stat=t,
        df=n - 1,
        p_two_sided=t_sf_two_sided(t, n - 1),
    )


def delta_ci(deltas, level: float = 0.95):
    """Normal-assumption CI: mean +/- z * sd / sqrt(n)."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.size < 2:
        raise ParameterError("need at least 2 deltas")
    if level != 0.95:
        raise ParameterError("only the 95% level is supported")
    half = Z_95 * float(d.std(ddof=1)) / math.sqrt(d.size)
    mean = float(d.mean())
    return mean - half, mean + half


def box_summary(values) -> dict:
    """Five-number summary with 1.5*IQR whiskers and outlier list."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ParameterError("box_summary on empty input")
    q1, med, q3 = (float(np.percentile(v, q)) for q in (25, 50, 75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return {
        "min": float(v[0]),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(v[-1]),
        "whisker_lo": float(inside[0]),
        "whisker_hi": float(inside[-1]),
        "outliers": outliers.tolist(),
    }


@dataclass(frozen=True)
class MetricsRow:
    image_id: str
    psnr_input: float
    psnr_a: float
    psnr_b: float
    ssim_input: float
    ssim_a: float
    ssim_b: float


CSV_COLUMNS = ["image_id", "psnr_input", "psnr_a", "psnr_b", "ssim_input", "ssim_a", "ssim_b"]


def report(rows) -> dict:
    """Aggregate table with mean row, paired tests and CIs on the a-vs-b columns."""
    if not rows:
        raise ParameterError("report needs at least one row")
    cols = {c: [getattr(r, c) for r in rows] for c in CSV_COLUMNS[1:]}
    means = {c: float(np.mean(v)) for c, v in cols.items()}
    out = {"rows": rows, "means": means}
    if len(rows) >= 2:
        for metric in ("psnr", "ssim"):
            a, b = cols[f"{metric}_a"], cols[f"{metric}_b"]
            deltas = [y - x for x, y in zip(a, b)]
            try:
                out[f"{metric}_test"] = paired_t_test(a, b).to_dict()
            except DegenerateDifferencesError:
                out[f"{metric}_test"] = None
            out[f"{metric}_ci"] = delta_ci(deltas)
            out[f"{metric}_delta_box"] = box_summary(deltas)
    return out


def write_report_csv(path, rows) -> None:
    means = report(rows)["means"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([getattr(r, c) for c in CSV_COLUMNS])
        writer.writerow(["mean"] + [means[c] for c in CSV_COLUMNS[1:]])


def write_report_json(path, rep: dict) -> None:
    payload = dict(rep)
    payload["rows"] = [
        {c: getattr(r, c) for c in CSV_COLUMNS} for r in rep["rows"]
    ]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_metrics_csv(path) -> list:
    """Import a metrics table (same columns the report writer emits)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ParameterError(f"metrics CSV missing columns: {sorted(missing)}")
        for rec in reader:
            if rec["image_id"].lower() == "mean":
                continue
            rows.append(MetricsRow(
                image_id=rec["image_id"],
                **{c: float(rec[c]) for c in CSV_COLUMNS[1:]},
            ))
    return rows
