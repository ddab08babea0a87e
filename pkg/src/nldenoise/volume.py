"""Volume/patch data model, NVOL file I/O, patching and augmentation.

Voxel values are stored as float32 numpy arrays with shape (nz, ny, nx),
so a C-order ravel enumerates voxels x-fastest. That linear order is the
on-disk payload order and the convention every other module relies on.
"""

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CoverageError, FormatError, GeometryError, ParameterError

NVOL_MAGIC = b"NVOL"
NVOL_VERSION = 1
_HEADER = struct.Struct("<4sB3I3fBf")  # magic, version, dims, voxel size, domain, counts_per_suv


class Domain(Enum):
    COUNTS = 0
    SUV = 1


@dataclass(frozen=True)
class Volume:
    """A 3D voxel grid with physical spacing and value-domain metadata."""

    dims: tuple  # (nx, ny, nz)
    voxel_size: tuple  # (sx, sy, sz) in mm
    values: np.ndarray  # float32, shape (nz, ny, nx)
    domain: Domain = Domain.COUNTS
    counts_per_suv: float = 1.0

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise ParameterError(f"dims must be >= 1, got {self.dims}")
        if min(self.voxel_size) <= 0:
            raise ParameterError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.counts_per_suv <= 0:
            raise ParameterError(f"counts_per_suv must be > 0, got {self.counts_per_suv}")
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != (nz, ny, nx):
            raise GeometryError(f"values shape {vals.shape} != (nz, ny, nx) = {(nz, ny, nx)}")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("volume contains non-finite values")
        if self.domain is Domain.COUNTS and vals.min() < 0:
            raise ParameterError("counts-domain volume has negative values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz


@dataclass
class Patch:
    """A cubic sub-volume; values shape (p, p, p), x-fastest like Volume."""

    origin: tuple  # (ox, oy, oz)
    size: int
    values: np.ndarray
    descriptor: Optional[object] = None  # NoiseDescriptor, attached by noisequant

    def __post_init__(self):
        p = self.size
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != (p, p, p):
            raise GeometryError(f"patch values shape {vals.shape} != {(p, p, p)}")
        self.values = vals


def save_volume(v: Volume, path) -> None:
    """Write a Volume in the NVOL format (little-endian, uncompressed)."""
    nx, ny, nz = v.dims
    header = _HEADER.pack(
        NVOL_MAGIC,
        NVOL_VERSION,
        nx,
        ny,
        nz,
        *[float(s) for s in v.voxel_size],
        v.domain.value,
        float(v.counts_per_suv),
    )
    payload = np.ascontiguousarray(v.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Volume:
    """Read an NVOL file, validating header and payload byte-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for NVOL header ({len(raw)} bytes)", offset=len(raw))
    magic, version, nx, ny, nz, sx, sy, sz, dom, cps = _HEADER.unpack_from(raw, 0)
    if magic != NVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != NVOL_VERSION:
        raise FormatError(f"unsupported NVOL version {version}", offset=4)
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise FormatError(
            f"payload length mismatch: dims {nx}x{ny}x{nz} need {expected} bytes, file has {len(raw)}",
            offset=min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError("non-finite voxel value", offset=_HEADER.size + 4 * bad)
    try:
        domain = Domain(dom)
    except ValueError:
        raise FormatError(f"unknown domain code {dom}", offset=21) from None
    return Volume(
        dims=(nx, ny, nz),
        voxel_size=(sx, sy, sz),
        values=values.reshape(nz, ny, nx).copy(),
        domain=domain,
        counts_per_suv=cps,
    )


def _axis_origins(dim: int, p: int, stride: int) -> list:
    return list(range(0, dim - p + 1, stride))


def extract_patches(v: Volume, p: int, stride: int) -> list:
    """Tile the volume with cubic patches at origins {0, stride, 2*stride, ...}."""
    nx, ny, nz = v.dims
    if p > min(nx, ny, nz):
        raise GeometryError(f"patch edge {p} exceeds volume dims {v.dims}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    patches = []
    for oz in _axis_origins(nz, p, stride):
        for oy in _axis_origins(ny, p, stride):
            for ox in _axis_origins(nx, p, stride):
                vals = v.values[oz : oz + p, oy : oy + p, ox : ox + p].copy()
                patches.append(Patch(origin=(ox, oy, oz), size=p, values=vals))
    return patches


def covering_origins(dim: int, p: int, stride: int) -> list:
    """Stride origins with the final origin clamped so the last patch hits the edge."""
    origins = _axis_origins(dim, p, stride)
    if not origins or origins[-1] + p < dim:
        origins.append(dim - p)
    return origins


def extract_patches_covering(v: Volume, p: int, stride: int) -> list:
    """Like extract_patches but clamps trailing origins for full coverage."""
    nx, ny, nz = v.dims
    if p > min(nx, ny, nz):
        raise GeometryError(f"patch edge {p} exceeds volume dims {v.dims}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    patches = []
    for oz in covering_origins(nz, p, stride):
        for oy in covering_origins(ny, p, stride):
            for ox in covering_origins(nx, p, stride):
                vals = v.values[oz : oz + p, oy : oy + p, ox : ox + p].copy()
                patches.append(Patch(origin=(ox, oy, oz), size=p, values=vals))
    return patches


def reassemble(
    patches: list,
    dims: tuple,
    voxel_size=(1.0, 1.0, 1.0),
    domain=Domain.COUNTS,
    counts_per_suv=1.0,
) -> Volume:
    """Average overlapping patch predictions back into a full volume.

    Every voxel must be covered by at least one patch; overlaps are
    resolved by uniform arithmetic averaging.
    """
    nx, ny, nz = dims
    acc = np.zeros((nz, ny, nx), dtype=np.float64)
    cover = np.zeros((nz, ny, nx), dtype=np.int32)
    for patch in patches:
        ox, oy, oz = patch.origin
        p = patch.size
        if ox + p > nx or oy + p > ny or oz + p > nz:
            raise GeometryError(f"patch at {patch.origin} size {p} exceeds dims {dims}")
        acc[oz : oz + p, oy : oy + p, ox : ox + p] += patch.values
        cover[oz : oz + p, oy : oy + p, ox : ox + p] += 1
    if cover.min() == 0:
        flat = int(np.flatnonzero(cover.ravel() == 0)[0])
        ix, iy, iz = flat % nx, (flat // nx) % ny, flat // (nx * ny)
        raise CoverageError(f"voxel ({ix}, {iy}, {iz}) not covered by any patch")
    out = (acc / cover).astype(np.float32)
    return Volume(dims=dims, voxel_size=voxel_size, values=out, domain=domain, counts_per_suv=counts_per_suv)


def suv_normalize(v: Volume, aa_mbq: float, weight_kg: float, sensitivity: float) -> Volume:
    """Convert a counts-domain volume to SUV, keeping the calibration factor.

    SUV = counts / (sensitivity * aa / weight); the product is stored as
    counts_per_suv so the counts domain stays recoverable.
    """
    if v.domain is not Domain.COUNTS:
        raise ParameterError("suv_normalize expects a counts-domain volume")
    if aa_mbq <= 0 or weight_kg <= 0 or sensitivity <= 0:
        raise ParameterError("administered activity, weight and sensitivity must be positive")
    cps = sensitivity * aa_mbq / weight_kg
    return Volume(
        dims=v.dims,
        voxel_size=v.voxel_size,
        values=(v.values / cps).astype(np.float32),
        domain=Domain.SUV,
        counts_per_suv=cps,
    )


def flip_augment(inp: Patch, target: Patch, rng) -> tuple:
    """Randomly reflect both patches along the x and/or y axis (p=0.5 each).

    The same flips are applied to input and target; the attached noise
    descriptor is flip-invariant and carried over unchanged.
    """
    if inp.size != target.size:
        raise GeometryError(f"patch sizes differ: {inp.size} vs {target.size}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.Philox(key=int(rng)))
    flip_x, flip_y = rng.random(2) < 0.5
    a, b = inp.values, target.values
    if flip_x:
        a, b = a[:, :, ::-1], b[:, :, ::-1]
    if flip_y:
        a, b = a[:, ::-1, :], b[:, ::-1, :]
    out_in = Patch(origin=inp.origin, size=inp.size, values=a.copy(), descriptor=inp.descriptor)
    out_tg = Patch(origin=target.origin, size=target.size, values=b.copy(), descriptor=target.descriptor)
    return out_in, out_tg
