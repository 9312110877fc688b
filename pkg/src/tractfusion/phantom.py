"""Synthetic CST-like bundles with paired voxel-grid BOLD signals.

Streamlines run from a small inferior "brainstem" box to one of four
superior cortical patches laid out along x in the order leg, trunk, hand,
face. ``geometric_overlap`` slides the trunk and hand patches toward each
other; where they overlap, voxel ownership alternates in square cells
(``interleave_pattern="checker"``) or in stripes along y, ``interleave_block``
voxels wide, with an odd number of y stripes so both classes keep the same
mean endpoint. Each owned patch voxel carries its class's
sinusoid; all voxels carry white noise and a per-voxel linear drift.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .fmri import GridGeometry, VoxelGridSeries, build_mask
from .streamlines import N_CLASSES, Streamline

LEG, TRUNK, FACE, HAND = range(4)
# slot along x for each class index
_SLOT = {LEG: 0, TRUNK: 1, HAND: 2, FACE: 3}
# activation frequency as a fraction of Nyquist, per class index
FREQ_FRACTION = (0.15, 0.30, 0.45, 0.60)
INTERLEAVE_PATTERNS = ("stripes", "checker")


def _counts(n) -> tuple[int, int, int, int]:
    if isinstance(n, int):
        n = (n,) * N_CLASSES
    n = tuple(int(v) for v in n)
    if len(n) != N_CLASSES:
        raise DataError("n_per_class needs 4 entries")
    return n


def _triple(v) -> tuple[float, float, float]:
    if isinstance(v, (int, float)):
        return (float(v),) * 3
    return tuple(float(x) for x in v)


@dataclass
class PhantomSpec:
    n_per_class: tuple[int, int, int, int] = (500, 500, 500, 500)
    dims: tuple[int, int, int] = (24, 24, 24)
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 2.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tr: float = 0.72
    frames: int = 64
    geometric_overlap: float = 0.0
    activation_snr: float = 10.0
    drift_amplitude: float = 1.0
    rng_seed: int = 0
    interleave_block: int = 2
    interleave_pattern: str = "checker"
    highpass_hz: float = 0.01
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.n_per_class = _counts(self.n_per_class)
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = _triple(self.voxel_size)
        self.origin = _triple(self.origin)
        if min(self.n_per_class) < 1:
            raise DataError("every class needs at least one streamline")
        if self.frames < 32:
            raise DataError("phantom needs at least 32 frames")
        if not 0.0 <= self.geometric_overlap <= 1.0:
            raise DataError("geometric_overlap must be in [0, 1]")
        if not self.activation_snr > 0:
            raise DataError("activation_snr must be > 0 (use inf for noiseless)")
        if self.interleave_block < 1:
            raise DataError("interleave_block must be >= 1")
        if self.interleave_pattern not in INTERLEAVE_PATTERNS:
            raise DataError(f"interleave_pattern must be one of {INTERLEAVE_PATTERNS}")
        nyquist = 1.0 / (2.0 * self.tr)
        if FREQ_FRACTION[0] * nyquist <= self.highpass_hz:
            raise DataError("activation frequencies would not survive the high-pass cutoff")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.voxel_size, self.origin)

    def frequencies(self) -> np.ndarray:
        nyquist = 1.0 / (2.0 * self.tr)
        return np.array(FREQ_FRACTION) * nyquist

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("n_per_class", "dims", "voxel_size", "origin"):
            d[k] = list(d[k])
        if math.isinf(self.activation_snr):
            d["activation_snr"] = "inf"
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown phantom spec fields: {sorted(unknown)}")
        snr = d.get("activation_snr", 10.0)
        d["activation_snr"] = math.inf if snr is None else float(snr)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class PatchLayout:
    """Voxel-space patch boxes; x ranges are ``[start, start + width)`` on voxel centers."""

    x_start: dict
    width: int
    y_range: tuple[int, int]
    z_range: tuple[int, int]
    stem_lo: np.ndarray
    stem_hi: np.ndarray


def layout(spec: PhantomSpec) -> PatchLayout:
    nx, ny, nz = spec.dims
    width = (nx - 2 - 3) // 4
    b = spec.interleave_block
    n_stripes = (ny - 4) // b
    if n_stripes % 2 == 0:
        n_stripes -= 1
    if width < 2 or n_stripes < 1 or nz < 10:
        raise DataError(f"grid {spec.dims} too small to host four disjoint patches")
    y0 = (ny - n_stripes * b) // 2
    starts = {c: 1.0 + _SLOT[c] * (width + 1) for c in range(N_CLASSES)}
    mid = 0.5 * (starts[TRUNK] + starts[HAND])
    t = spec.geometric_overlap
    starts[TRUNK] = starts[TRUNK] + t * (mid - starts[TRUNK])
    starts[HAND] = starts[HAND] - t * (starts[HAND] - mid)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    stem_lo = np.array([cx - 2.0, cy - 2.0, 1.0])
    stem_hi = np.array([cx + 2.0, cy + 2.0, 3.0])
    return PatchLayout(starts, width, (y0, y0 + n_stripes * b), (nz - 4, nz - 2),
                       stem_lo, stem_hi)


def ownership(spec: PhantomSpec, lay: PatchLayout) -> np.ndarray:
    """Class index owning each voxel (``-1`` for none), shape ``dims``."""
    nx, ny, nz = spec.dims
    own = np.full(spec.dims, -1, dtype=np.int64)
    xs = np.arange(nx)
    y_lo, y_hi = lay.y_range
    z_lo, z_hi = lay.z_range
    inside = {}
    for c in range(N_CLASSES):
        s = lay.x_start[c]
        inside[c] = (xs >= s) & (xs < s + lay.width)
    b = spec.interleave_block
    stripe = (np.arange(ny) - y_lo) // b
    for x in range(nx):
        owners = [c for c in range(N_CLASSES) if inside[c][x]]
        for y in range(y_lo, y_hi):
            if not owners:
                continue
            if len(owners) == 1:
                c = owners[0]
            elif set(owners) == {TRUNK, HAND}:
                cell = stripe[y]
                if spec.interleave_pattern == "checker":
                    cell += int(x - np.ceil(lay.x_start[TRUNK])) // b
                c = TRUNK if cell % 2 == 0 else HAND
            else:
                raise DataError("patches other than trunk/hand overlap")
            own[x, y, z_lo:z_hi] = c
    return own


def _curve(rng: np.random.Generator, start: np.ndarray, end: np.ndarray,
           center_x: float) -> np.ndarray:
    """Quadratic Bezier through a control point pulled toward the midline."""
    m = int(rng.integers(30, 61))
    t = np.linspace(0.0, 1.0, m) ** 1.2
    ctrl = 0.5 * (start + end)
    ctrl[0] = center_x + 0.3 * (end[0] - center_x)
    ctrl = ctrl + rng.normal(0.0, 1.0, size=3)
    t = t[:, None]
    pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * end
    pts[0], pts[-1] = start, end
    return pts


def generate(spec: PhantomSpec):
    """Build ``(bundle, grid, mask)`` for ``spec``; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    geom = spec.geometry
    lay = layout(spec)
    own = ownership(spec, lay)
    vs = np.array(geom.voxel_size)
    origin = np.array(geom.origin)
    center_x = origin[0] + vs[0] * (spec.dims[0] - 1) / 2.0

    labels = np.concatenate([np.full(n, c) for c, n in enumerate(spec.n_per_class)])
    labels = labels[rng.permutation(labels.size)]
    owned = {c: np.argwhere(own == c) for c in range(N_CLASSES)}
    for c, vox in owned.items():
        if vox.size == 0:
            raise DataError(f"class {c} owns no voxels; grid too small")

    bundle = []
    for sid, c in enumerate(labels):
        vox = owned[c][rng.integers(len(owned[c]))]
        end = origin + (vox + rng.uniform(-0.45, 0.45, size=3)) * vs
        start = origin + rng.uniform(lay.stem_lo, lay.stem_hi) * vs
        pts = _curve(rng, start, end, center_x)
        if rng.random() < 0.5:
            pts = pts[::-1]
        bundle.append(Streamline(sid, pts, int(c)))

    t = spec.frames
    n = np.arange(t)
    noise_sd = 0.0 if math.isinf(spec.activation_snr) else 1.0 / spec.activation_snr
    data = np.zeros((t,) + spec.dims)
    if noise_sd > 0:
        data += rng.normal(0.0, noise_sd, size=data.shape)
    if spec.drift_amplitude:
        slope = rng.uniform(-1.0, 1.0, size=spec.dims)
        ramp = 2.0 * n / (t - 1) - 1.0
        data += spec.drift_amplitude * ramp[:, None, None, None] * slope[None]
    freqs = spec.frequencies()
    for c in range(N_CLASSES):
        wave = np.sin(2.0 * np.pi * freqs[c] * n * spec.tr)
        data[:, own == c] += wave[:, None]

    grid = VoxelGridSeries(geom, spec.tr, data, {"phantom": spec.to_json()})
    mask = build_mask(bundle, geom, 1)
    return bundle, grid, mask


def endpoint_class_means(bundle) -> dict[int, np.ndarray]:
    """Mean cortical (superior) endpoint per class, in mm."""
    out: dict[int, list] = {}
    for s in bundle:
        top = s.points[0] if s.points[0][2] > s.points[-1][2] else s.points[-1]
        out.setdefault(s.label, []).append(top)
    return {c: np.mean(v, axis=0) for c, v in out.items()}

