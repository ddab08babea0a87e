"""Per-patch relative-noise quantification.

Pipeline: Otsu threshold on the patch histogram -> mean counts inside the
foreground mask -> COV = 1/sqrt(mean counts) -> background lumpiness ->
4-way bin -> standardized log-COV embedding scalar.
"""

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import (
    ConstantInputError,
    EmptyBackgroundError,
    EmptyMaskError,
    ParameterError,
)
from .volume import Patch


class NoiseBin(Enum):
    HIGH_NOISE_CLEAN = "high_noise_clean"
    LOW_NOISE_CLEAN = "low_noise_clean"
    HIGH_NOISE_LUMPY = "high_noise_lumpy"
    LOW_NOISE_LUMPY = "low_noise_lumpy"


# Fixed order used for stratified sampling round-robin.
BIN_ORDER = (
    NoiseBin.HIGH_NOISE_CLEAN,
    NoiseBin.LOW_NOISE_CLEAN,
    NoiseBin.HIGH_NOISE_LUMPY,
    NoiseBin.LOW_NOISE_LUMPY,
)


@dataclass(frozen=True)
class BinningConfig:
    cov_split: float = 0.3
    lump_split: float = 0.2
    histogram_bins: int = 256

    def __post_init__(self):
        if self.cov_split <= 0 or self.lump_split <= 0:
            raise ParameterError("cov_split and lump_split must be positive")
        if self.histogram_bins < 2:
            raise ParameterError("histogram_bins must be >= 2")


@dataclass(frozen=True)
class EmbedStats:
    """Training-set mean/std of ln(COV) used to standardize the embedding scalar."""

    mu_logcov: float
    sigma_logcov: float

    def __post_init__(self):
        if self.sigma_logcov <= 0:
            raise ParameterError("sigma_logcov must be > 0")


@dataclass(frozen=True)
class NoiseDescriptor:
    otsu_threshold: float
    mask_voxel_count: int
    mask_mean_counts: float
    cov: float
    lumpiness: float
    bin: NoiseBin
    embed_scalar: float

    def to_record(self, volume_id=None, origin=None, size=None) -> dict:
        rec = {
            "otsu_threshold": self.otsu_threshold,
            "mask_mean_counts": self.mask_mean_counts,
            "cov": self.cov,
            "lumpiness": self.lumpiness,
            "bin": self.bin.value,
            "embed_scalar": self.embed_scalar,
        }
        if volume_id is not None:
            rec = {"volume_id": volume_id, "origin": list(origin), "size": size, **rec}
        return rec


def otsu_threshold(values, histogram_bins: int = 256) -> float:
    """Histogram-based Otsu threshold.

    Builds a histogram over [min, max] and returns the interior bin edge
    maximizing the between-class variance of the bin indices, ties broken
    toward the lowest edge. Foreground convention: value > threshold.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size < 2:
        raise ParameterError("otsu_threshold needs at least 2 values")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        raise ConstantInputError(f"all values equal {lo}; no threshold exists")
    bins = int(histogram_bins)
    idx = np.minimum(((vals - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    # Integer-exact cumulative moments over bin indices.
    n = vals.size
    csum = np.cumsum(hist)  # counts <= each bin
    msum = np.cumsum(hist * np.arange(bins))  # index-weighted counts
    best_k, best_score = 1, -1.0
    for k in range(1, bins):
        n0 = csum[k - 1]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = msum[k - 1] / n0
        mu1 = (msum[bins - 1] - msum[k - 1]) / n1
        score = n0 * n1 * (mu0 - mu1) * (mu0 - mu1)
        if score > best_score:
            best_score = score
            best_k = k
    return lo + best_k * (hi - lo) / bins


def mask_mean(patch, threshold: float) -> tuple:
    """Mean value and voxel count of the foreground mask (value > threshold)."""
    vals = patch.values if isinstance(patch, Patch) else np.asarray(patch)
    mask = vals > threshold
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError(f"no voxel above threshold {threshold}")
    return float(vals[mask].mean(dtype=np.float64)), count


def cov(mean_counts: float) -> float:
    """Relative Poisson noise of a region with the given mean counts."""
    if mean_counts <= 0:
        raise ParameterError(f"mean counts must be > 0, got {mean_counts}")
    return 1.0 / math.sqrt(mean_counts)


def background_lumpiness(patch, threshold: float) -> float:
    """Coefficient of variation of the background voxels (value <= threshold)."""
    vals = patch.values if isinstance(patch, Patch) else np.asarray(patch)
    bg = vals[vals <= threshold].astype(np.float64)
    if bg.size < 2:
        raise EmptyBackgroundError(f"fewer than 2 voxels at or below threshold {threshold}")
    std = float(bg.std())
    if std == 0.0:
        return 0.0
    return std / (float(bg.mean()) + 1e-6)


def classify_bin(cov_value: float, lumpiness: float, config: BinningConfig) -> NoiseBin:
    """4-way classification; boundary values count as High/Lumpy."""
    high = cov_value >= config.cov_split
    lumpy = lumpiness >= config.lump_split
    if high and not lumpy:
        return NoiseBin.HIGH_NOISE_CLEAN
    if not high and not lumpy:
        return NoiseBin.LOW_NOISE_CLEAN
    if high and lumpy:
        return NoiseBin.HIGH_NOISE_LUMPY
    return NoiseBin.LOW_NOISE_LUMPY


def embed_scalar(cov_value: float, stats: EmbedStats) -> float:
    """Standardized log-COV fed to the embedding layer."""
    if cov_value <= 0:
        raise ParameterError(f"cov must be > 0, got {cov_value}")
    return (math.log(cov_value) - stats.mu_logcov) / stats.sigma_logcov


def fit_embed_stats(covs) -> EmbedStats:
    """Fit standardization stats (sample std, n-1 denominator) on training COVs."""
    logs = np.log(np.asarray(covs, dtype=np.float64))
    if logs.size < 2:
        raise ParameterError("need at least 2 COV values to fit embed stats")
    sigma = float(logs.std(ddof=1))
    if sigma == 0.0:
        raise ParameterError("COV values are all identical; cannot standardize")
    return EmbedStats(mu_logcov=float(logs.mean()), sigma_logcov=sigma)


def describe_patch(patch, config: BinningConfig, stats: EmbedStats) -> NoiseDescriptor:
    """Full per-patch noise characterization on counts-domain values."""
    thr = otsu_threshold(patch.values, config.histogram_bins)
    mean_counts, n_mask = mask_mean(patch, thr)
    c = cov(mean_counts)
    lump = background_lumpiness(patch, thr)
    return NoiseDescriptor(
        otsu_threshold=thr,
        mask_voxel_count=n_mask,
        mask_mean_counts=mean_counts,
        cov=c,
        lumpiness=lump,
        bin=classify_bin(c, lump, config),
        embed_scalar=embed_scalar(c, stats),
    )


def write_descriptor_manifest(path, records) -> None:
    """Newline-delimited JSON, one record per patch."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
