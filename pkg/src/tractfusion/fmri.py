"""Voxel-grid BOLD series, cortical masks and the mask-guided denoising chain.

Arrays are indexed ``data[t, x, y, z]``; on disk each frame is stored with
linear index ``x + nx * (y + ny * z)``. A point belongs to the voxel whose
center is nearest along each axis (``origin`` is the center of voxel 0);
a point exactly halfway between two centers goes to the lower voxel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .streamlines import Streamline, endpoints

DEFAULT_FWHM_MM = 6.0
DEFAULT_CUTOFF_HZ = 0.01
DEFAULT_BOXCAR_RADIUS = 1
FALLBACK_RADIUS = 2

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        org = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(vs) != 3 or len(org) != 3:
            raise DataError("grid geometry needs 3 dims, voxel sizes and origin coordinates")
        if min(dims) < 1 or min(vs) <= 0 or not all(map(math.isfinite, vs + org)):
            raise DataError(f"invalid grid geometry dims={dims} voxel_size={vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)

    def voxel_index(self, coords: np.ndarray) -> np.ndarray:
        """Integer voxel indices of points ``(..., 3)`` (may be out of bounds)."""
        rel = (np.asarray(coords, dtype=np.float64) - np.array(self.origin)) / np.array(
            self.voxel_size)
        return np.ceil(rel - 0.5).astype(np.int64)

    def in_bounds(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=-1)

    def center(self, ijk: np.ndarray) -> np.ndarray:
        return np.array(self.origin) + np.asarray(ijk, dtype=np.float64) * np.array(
            self.voxel_size)

    def header(self) -> dict:
        return {"dims": list(self.dims), "voxel_size_mm": list(self.voxel_size),
                "origin_mm": list(self.origin)}


@dataclass
class VoxelGridSeries:
    geometry: GridGeometry
    tr: float
    data: np.ndarray  # (T, nx, ny, nz)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1:] != self.geometry.dims:
            raise DataError(
                f"grid data shape {self.data.shape} does not match dims {self.geometry.dims}")
        if not self.tr > 0:
            raise DataError("tr must be positive")
        if self.frames < 2:
            raise DataError("grid needs at least 2 frames")
        if not np.all(np.isfinite(self.data)):
            raise DataError("grid contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self):
        return self.geometry.dims

    def replace(self, data: np.ndarray, **prov) -> "VoxelGridSeries":
        return VoxelGridSeries(self.geometry, self.tr, data, {**self.provenance, **prov})


@dataclass
class CorticalMask:
    geometry: GridGeometry
    data: np.ndarray  # bool (nx, ny, nz)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.shape != self.geometry.dims:
            raise DataError(f"mask shape {self.data.shape} != dims {self.geometry.dims}")
        if not self.data.any():
            raise DataError("mask has no true voxels")

    @property
    def dims(self):
        return self.geometry.dims


@dataclass(frozen=True)
class EndpointSignalPair:
    streamline_id: int
    sig_a: np.ndarray
    sig_b: np.ndarray


def _check_dims(g: VoxelGridSeries, mask: CorticalMask) -> None:
    if tuple(mask.dims) != tuple(g.dims):
        raise DataError(f"mask dims {mask.dims} do not match grid dims {g.dims}")


# --- masks ----------------------------------------------------------------


def build_mask(bundle: Sequence[Streamline], geometry: GridGeometry,
               dilation_radius: int = 1) -> CorticalMask:
    """Voxels holding any streamline endpoint, dilated by a cube of the given radius."""
    if not bundle:
        raise DataError("build_mask: empty bundle")
    if dilation_radius < 0:
        raise DataError("build_mask: dilation radius must be >= 0")
    pts = np.array([[s.points[0], s.points[-1]] for s in bundle])
    ijk = geometry.voxel_index(pts)
    ok = geometry.in_bounds(ijk).all(axis=1)
    if not ok.all():
        bad = [bundle[i].id for i in np.flatnonzero(~ok)]
        raise DataError(f"endpoints outside grid for streamline ids {bad}")
    seed = np.zeros(geometry.dims, dtype=bool)
    flat = ijk.reshape(-1, 3)
    seed[flat[:, 0], flat[:, 1], flat[:, 2]] = True
    if dilation_radius:
        cube = np.ones((2 * dilation_radius + 1,) * 3, dtype=bool)
        seed = ndimage.binary_dilation(seed, structure=cube)
    return CorticalMask(geometry, seed)


# --- spatial filters ------------------------------------------------------


def _masked_separable(g: VoxelGridSeries, mask: CorticalMask, kernels) -> VoxelGridSeries:
    """Normalized convolution restricted to the mask; out-of-mask voxels unchanged."""
    m = mask.data.astype(np.float64)
    num = g.data * m
    den = m
    for axis, k in enumerate(kernels):
        num = ndimage.correlate1d(num, k, axis=axis + 1, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, k, axis=axis, mode="constant", cval=0.0)
    out = g.data.copy()
    inside = mask.data
    out[:, inside] = num[:, inside] / den[inside]
    return out


def gaussian_kernel_1d(sigma_mm: float, voxel_size: float) -> np.ndarray:
    """Unnormalized Gaussian weights at voxel offsets within 3 sigma."""
    radius = int(math.floor(3.0 * sigma_mm / voxel_size + 1e-9))
    offsets = np.arange(-radius, radius + 1) * voxel_size
    return np.exp(-0.5 * (offsets / sigma_mm) ** 2)


def fwhm_to_sigma(fwhm_mm: float) -> float:
    return fwhm_mm * FWHM_TO_SIGMA


def gaussian_smooth(g: VoxelGridSeries, mask: CorticalMask,
                    fwhm_mm: float = DEFAULT_FWHM_MM) -> VoxelGridSeries:
    """Per-frame separable Gaussian smoothing, renormalized over in-mask voxels."""
    if not fwhm_mm > 0:
        raise DataError("gaussian_smooth: fwhm must be positive")
    _check_dims(g, mask)
    sigma = fwhm_to_sigma(fwhm_mm)
    kernels = [gaussian_kernel_1d(sigma, vs) for vs in g.geometry.voxel_size]
    return g.replace(_masked_separable(g, mask, kernels))


def boxcar(g: VoxelGridSeries, mask: CorticalMask,
           radius: int = DEFAULT_BOXCAR_RADIUS) -> VoxelGridSeries:
    """Per-frame mean over the ``(2r+1)^3`` cube intersected with mask and grid."""
    if radius < 0:
        raise DataError("boxcar: radius must be >= 0")
    _check_dims(g, mask)
    if radius == 0:
        return g.replace(g.data.copy())
    k = np.ones(2 * radius + 1)
    return g.replace(_masked_separable(g, mask, [k, k, k]))


# --- temporal filter ------------------------------------------------------


def drift_regressors(frames: int, tr: float, cutoff_hz: float) -> np.ndarray:
    """Design matrix ``(T, r)``: constant, linear trend, DCT-II cosines up to the cutoff.

    Cosine ``k`` has frequency ``k / (2 T tr)`` and is kept when that is
    ``<= cutoff_hz``.
    """
    nyquist = 1.0 / (2.0 * tr)
    if not 0 < cutoff_hz < nyquist:
        raise DataError(f"highpass: cutoff {cutoff_hz} Hz must be in (0, Nyquist={nyquist} Hz)")
    n_cos = int(math.floor(2.0 * frames * tr * cutoff_hz + 1e-9))
    n = np.arange(frames)
    cols = [np.ones(frames), n - (frames - 1) / 2.0]
    for k in range(1, n_cos + 1):
        cols.append(np.cos(np.pi * k * (n + 0.5) / frames))
    return np.column_stack(cols)


def highpass(g: VoxelGridSeries, mask: CorticalMask,
             cutoff_hz: float = DEFAULT_CUTOFF_HZ) -> VoxelGridSeries:
    """Least-squares removal of the drift regressors from every in-mask series."""
    _check_dims(g, mask)
    X = drift_regressors(g.frames, g.tr, cutoff_hz)
    if g.frames < X.shape[1] + 2:
        raise DataError("series too short")
    q, _ = np.linalg.qr(X)
    out = g.data.copy()
    y = out[:, mask.data]
    out[:, mask.data] = y - q @ (q.T @ y)
    return g.replace(out)


def highpass_series(y: np.ndarray, tr: float, cutoff_hz: float = DEFAULT_CUTOFF_HZ) -> np.ndarray:
    """:func:`highpass` for plain ``(T,)`` or ``(T, n)`` arrays."""
    y = np.asarray(y, dtype=np.float64)
    X = drift_regressors(y.shape[0], tr, cutoff_hz)
    if y.shape[0] < X.shape[1] + 2:
        raise DataError("series too short")
    q, _ = np.linalg.qr(X)
    return y - q @ (q.T @ y)


def denoise(g: VoxelGridSeries, mask: CorticalMask, fwhm_mm: float = DEFAULT_FWHM_MM,
            cutoff_hz: float = DEFAULT_CUTOFF_HZ,
            radius: int = DEFAULT_BOXCAR_RADIUS) -> VoxelGridSeries:
    """Gaussian smoothing, then high-pass, then boxcar averaging, all within the mask."""
    out = boxcar(highpass(gaussian_smooth(g, mask, fwhm_mm), mask, cutoff_hz), mask, radius)
    out.provenance = {**g.provenance, "denoise": {
        "fwhm_mm": float(fwhm_mm), "highpass_hz": float(cutoff_hz), "boxcar_radius": int(radius),
    }}
    return out


# --- endpoint signal mapping ---------------------------------------------


def _fallback_voxel(point: np.ndarray, ijk: np.ndarray, mask: CorticalMask) -> np.ndarray | None:
    geom = mask.geometry
    r = FALLBACK_RADIUS
    rng = np.arange(-r, r + 1)
    # z outermost so equal distances resolve to the lowest linear index
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    cand = ijk + np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)
    cand = cand[geom.in_bounds(cand)]
    if cand.size == 0:
        return None
    cand = cand[mask.data[cand[:, 0], cand[:, 1], cand[:, 2]]]
    if cand.size == 0:
        return None
    d = np.sqrt(((geom.center(cand) - point) ** 2).sum(axis=1))
    return cand[int(np.argmin(d))]


def endpoint_voxels(mask: CorticalMask, points: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Voxel index for each point ``(n, 3)``, using the in-mask fallback search."""
    geom = mask.geometry
    ijk = geom.voxel_index(points)
    inb = geom.in_bounds(ijk)
    if not inb.all():
        bad = sorted({int(ids[i]) for i in np.flatnonzero(~inb)})
        raise DataError(f"endpoint outside grid for streamline ids {bad}")
    inside = mask.data[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    for i in np.flatnonzero(~inside):
        alt = _fallback_voxel(points[i], ijk[i], mask)
        if alt is None:
            raise DataError(f"endpoint outside mask neighborhood for streamline id {ids[i]}")
        ijk[i] = alt
    return ijk


def endpoint_signal_arrays(g: VoxelGridSeries, mask: CorticalMask,
                           bundle: Sequence[Streamline]) -> tuple[np.ndarray, np.ndarray]:
    """Canonical-first and canonical-second endpoint series, each ``(n, T)``."""
    _check_dims(g, mask)
    ends = np.array([endpoints(s).coords for s in bundle]).reshape(-1, 3)
    ids = np.repeat([s.id for s in bundle], 2)
    ijk = endpoint_voxels(mask, ends, ids)
    sig = g.data[:, ijk[:, 0], ijk[:, 1], ijk[:, 2]].T  # (2n, T)
    return sig[0::2].copy(), sig[1::2].copy()


def map_endpoint_signals(g: VoxelGridSeries, bundle: Sequence[Streamline],
                         mask: CorticalMask) -> list[EndpointSignalPair]:
    a, b = endpoint_signal_arrays(g, mask, bundle)
    return [EndpointSignalPair(s.id, a[i], b[i]) for i, s in enumerate(bundle)]


# --- file I/O -------------------------------------------------------------


def raw_path(path) -> Path:
    return Path(path).with_suffix(".raw")


def _read_header(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read header {path}: {exc}") from exc


def _geometry_from_header(h: dict) -> GridGeometry:
    try:
        return GridGeometry(h["dims"], h["voxel_size_mm"], h["origin_mm"])
    except KeyError as exc:
        raise DataError(f"grid header missing {exc}") from exc


def write_grid(path, g: VoxelGridSeries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {**g.geometry.header(), "tr_s": g.tr, "frames": g.frames,
              "raw": raw_path(path).name}
    if g.provenance:
        header["provenance"] = g.provenance
    frames = g.data.transpose(0, 3, 2, 1).astype("<f4")
    raw_path(path).write_bytes(frames.tobytes())
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_grid(path) -> VoxelGridSeries:
    path = Path(path)
    h = _read_header(path)
    geom = _geometry_from_header(h)
    nx, ny, nz = geom.dims
    t = int(h["frames"])
    raw = np.frombuffer((path.parent / h.get("raw", raw_path(path).name)).read_bytes(), "<f4")
    if raw.size != t * nx * ny * nz:
        raise DataError(f"{path}: raw size {raw.size} != frames*voxels {t * nx * ny * nz}")
    data = raw.reshape(t, nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float64)
    return VoxelGridSeries(geom, float(h["tr_s"]), data, h.get("provenance", {}))


def write_mask(path, mask: CorticalMask) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {**mask.geometry.header(), "dtype": "u8", "raw": raw_path(path).name}
    raw_path(path).write_bytes(mask.data.transpose(2, 1, 0).astype(np.uint8).tobytes())
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_mask(path) -> CorticalMask:
    path = Path(path)
    h = _read_header(path)
    geom = _geometry_from_header(h)
    nx, ny, nz = geom.dims
    raw = np.frombuffer((path.parent / h.get("raw", raw_path(path).name)).read_bytes(), np.uint8)
    if raw.size != nx * ny * nz:
        raise DataError(f"{path}: mask raw size {raw.size} != {nx * ny * nz}")
    if np.any(raw > 1):
        raise DataError(f"{path}: mask values must be 0 or 1")
    return CorticalMask(geom, raw.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool))
