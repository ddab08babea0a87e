"""Synthetic activity phantoms and paired count-level simulation.

A phantom is a noiseless expected-count map (background plus spheres plus
lumpy Gaussian bumps). A full-count Poisson realization is drawn once and
low-count versions are binomially thinned from that same realization, so
pairs share their noise events like paired low/full acquisitions. A
separable Gaussian blur stands in for reconstruction.

All randomness uses the counter-based Philox generator so outputs are
bit-reproducible per seed.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError
from .volume import Domain, Volume, save_volume

FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))  # 2.3548


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


@dataclass(frozen=True)
class Sphere:
    center: tuple  # (cx, cy, cz) voxels
    radius: float  # voxels
    contrast: float  # multiplier on the composed rate inside the sphere


@dataclass(frozen=True)
class LumpyBlobs:
    count: int = 0
    amplitude: float = 0.0  # added expected counts at a bump center
    width: float = 2.0  # Gaussian sigma in voxels

    def __post_init__(self):
        if self.count < 0 or self.amplitude < 0 or self.width <= 0:
            raise ParameterError("lumpy blob parameters must be non-negative (width > 0)")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    voxel_size: tuple = (2.5, 2.5, 2.5)
    background_rate: float = 5.0
    spheres: tuple = ()
    lumpy_blobs: LumpyBlobs = field(default_factory=LumpyBlobs)
    seed: int = 0

    def __post_init__(self):
        if self.background_rate <= 0:
            raise ParameterError("background_rate must be > 0")
        nx, ny, nz = self.dims
        for s in self.spheres:
            if s.contrast <= 0:
                raise ParameterError("sphere contrast must be > 0")
            cx, cy, cz = s.center
            if not (0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz):
                raise ParameterError(f"sphere center {s.center} outside dims {self.dims}")


@dataclass(frozen=True)
class CountSimConfig:
    fractions: tuple = (0.125, 0.25, 1.0)
    psf_fwhm_mm: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ParameterError(f"fractions must lie in (0, 1], got {f}")
        if self.psf_fwhm_mm < 0:
            raise ParameterError("psf_fwhm_mm must be >= 0")


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Noiseless expected-count map lambda(v)."""
    nx, ny, nz = spec.dims
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    lam = np.full((nz, ny, nx), spec.background_rate, dtype=np.float64)
    for s in spec.spheres:
        cx, cy, cz = s.center
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2 <= s.radius**2
        lam[inside] *= s.contrast
    blobs = spec.lumpy_blobs
    if blobs.count > 0 and blobs.amplitude > 0:
        rng = _rng(spec.seed)
        centers = rng.random((blobs.count, 3)) * np.array([nx, ny, nz])
        for cx, cy, cz in centers:
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2
            lam += blobs.amplitude * np.exp(-d2 / (2.0 * blobs.width**2))
    if lam.min() < 0:
        raise ParameterError("composed rate map has negative values")
    return Volume(dims=spec.dims, voxel_size=spec.voxel_size, values=lam.astype(np.float32))


def sample_counts(lam: Volume, seed: int) -> Volume:
    """One independent Poisson draw per voxel."""
    rates = np.asarray(lam.values, dtype=np.float64)
    if rates.min() < 0:
        raise ParameterError("negative Poisson rate")
    counts = _rng(seed).poisson(rates).astype(np.float32)
    return Volume(dims=lam.dims, voxel_size=lam.voxel_size, values=counts, domain=Domain.COUNTS)


def thin_counts(counts: Volume, fraction: float, seed: int) -> Volume:
    """Binomial thinning: keep each count independently with probability f."""
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction}")
    n = np.asarray(counts.values)
    n_int = np.rint(n).astype(np.int64)
    if np.any(n_int < 0) or np.any(np.abs(n - n_int) > 1e-6):
        raise ParameterError("thin_counts requires non-negative integer counts")
    if fraction == 1.0:
        thinned = n_int
    else:
        thinned = _rng(seed).binomial(n_int, fraction)
    return Volume(
        dims=counts.dims,
        voxel_size=counts.voxel_size,
        values=thinned.astype(np.float32),
        domain=Domain.COUNTS,
    )


def _gaussian_taps(sigma_vox: float) -> np.ndarray:
    radius = int(np.floor(3.0 * sigma_vox))
    if radius < 1:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def recon_surrogate(v: Volume, psf_fwhm_mm: float) -> Volume:
    """Separable Gaussian blur standing in for tomographic reconstruction.

    Kernel truncated at 3 sigma and renormalized; reflective boundaries
    keep the total counts conserved. fwhm = 0 is the identity.
    """
    if psf_fwhm_mm < 0:
        raise ParameterError("psf fwhm must be >= 0")
    if psf_fwhm_mm == 0:
        return v
    out = np.asarray(v.values, dtype=np.float64)
    sx, sy, sz = v.voxel_size
    # axis order of the array is (z, y, x)
    for axis, spacing in ((0, sz), (1, sy), (2, sx)):
        taps = _gaussian_taps(psf_fwhm_mm / FWHM_TO_SIGMA / spacing)
        if taps.size > 1:
            out = correlate1d(out, taps, axis=axis, mode="reflect")
    return Volume(
        dims=v.dims,
        voxel_size=v.voxel_size,
        values=out.astype(np.float32),
        domain=v.domain,
        counts_per_suv=v.counts_per_suv,
    )


def make_paired_dataset(spec: PhantomSpec, sim: CountSimConfig) -> dict:
    """Build the paired dataset for one phantom.

    Returns {"ref": blurred noiseless map, "full": blurred full realization,
    fraction: blurred thinned realization for each f < 1}.
    """
    lam = generate_phantom(spec)
    full = sample_counts(lam, sim.seed)
    out = {"ref": recon_surrogate(lam, sim.psf_fwhm_mm)}
    for i, f in enumerate(sim.fractions):
        if f == 1.0:
            vol = full
        else:
            vol = thin_counts(full, f, seed=sim.seed + 1 + i)
        key = "full" if f == 1.0 else f
        out[key] = recon_surrogate(vol, sim.psf_fwhm_mm)
    if "full" not in out:
        out["full"] = recon_surrogate(full, sim.psf_fwhm_mm)
    return out


def fraction_filename(f: float) -> str:
    if f == 1.0:
        return "full.nvol"
    # 0.125 -> f0125.nvol, 0.25 -> f025.nvol
    return "f" + f"{f:g}".replace(".", "") + ".nvol"


def write_dataset_dir(out_dir, spec: PhantomSpec, sim: CountSimConfig, phantom_id: str) -> Path:
    """Write phantom_<id>/{ref,full,f*}.nvol plus manifest.json."""
    d = Path(out_dir) / f"phantom_{phantom_id}"
    d.mkdir(parents=True, exist_ok=True)
    volumes = make_paired_dataset(spec, sim)
    files = {}
    for key, vol in volumes.items():
        if key == "ref":
            name = "ref.nvol"
        elif key == "full":
            name = "full.nvol"
        else:
            name = fraction_filename(key)
        save_volume(vol, d / name)
        files[str(key)] = name
    manifest = {
        "phantom_id": phantom_id,
        "dims": list(spec.dims),
        "voxel_size": list(spec.voxel_size),
        "background_rate": spec.background_rate,
        "spheres": [
            {"center": list(s.center), "radius": s.radius, "contrast": s.contrast} for s in spec.spheres
        ],
        "lumpy_blobs": {
            "count": spec.lumpy_blobs.count,
            "amplitude": spec.lumpy_blobs.amplitude,
            "width": spec.lumpy_blobs.width,
        },
        "phantom_seed": spec.seed,
        "sim_seed": sim.seed,
        "fractions": list(sim.fractions),
        "psf_fwhm_mm": sim.psf_fwhm_mm,
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def default_phantom_spec(seed: int, dims=(64, 64, 64), voxel_size=(2.5, 2.5, 2.5)) -> PhantomSpec:
    """Desk-scale phantom: tiered uptake regions spanning both sides of the
    default COV split, plus lumpy bumps in part of the background."""
    nx, ny, nz = dims
    rng = _rng(seed)
    spheres = [
        # large warm region -> moderate counts
        Sphere(center=(nx * 0.3, ny * 0.5, nz * 0.5), radius=min(dims) * 0.22, contrast=6.0),
        # hot sphere -> high counts, low relative noise
        Sphere(center=(nx * 0.7, ny * 0.35, nz * 0.45), radius=min(dims) * 0.12, contrast=25.0),
    ]
    # a small randomly-placed lesion keeps phantoms distinct across seeds
    jitter = rng.random(3)
    spheres.append(
        Sphere(
            center=(nx * (0.4 + 0.25 * jitter[0]), ny * (0.55 + 0.2 * jitter[1]), nz * (0.6 + 0.2 * jitter[2])),
            radius=min(dims) * 0.06,
            contrast=12.0,
        )
    )
    return PhantomSpec(
        dims=dims,
        voxel_size=voxel_size,
        background_rate=3.0,
        spheres=tuple(spheres),
        lumpy_blobs=LumpyBlobs(count=30, amplitude=4.0, width=2.0),
        seed=seed,
    )
