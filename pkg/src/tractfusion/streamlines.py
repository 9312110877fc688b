"""Streamline model and geometry: resampling, distances, neighbors, endpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

N_CLASSES = 4
CLASS_NAMES = ("leg", "trunk", "face", "hand")
DEFAULT_POINTS = 25
DEFAULT_NEIGHBORS = 20


@dataclass(frozen=True, eq=False)
class Streamline:
    id: int
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"streamline {self.id}: points must be (P, 3), got {pts.shape}")
        if pts.shape[0] < 2:
            raise DataError(f"streamline {self.id}: needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"streamline {self.id}: non-finite coordinate")
        if self.label is not None and not (0 <= int(self.label) < N_CLASSES):
            raise DataError(f"streamline {self.id}: label {self.label} out of range")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "id", int(self.id))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return self.points.shape[0]

    def reversed(self) -> "Streamline":
        return Streamline(self.id, self.points[::-1], self.label)

    def with_points(self, points) -> "Streamline":
        return Streamline(self.id, points, self.label)


@dataclass(frozen=True)
class NeighborSet:
    target_id: int
    neighbor_ids: tuple[int, ...]
    distances: tuple[float, ...]


@dataclass(frozen=True)
class EndpointPair:
    coords: np.ndarray  # (6,) first endpoint xyz, second endpoint xyz
    canonical_flipped: bool


def resample(s: Streamline, n_points: int = DEFAULT_POINTS) -> Streamline:
    """Resample to ``n_points`` equally spaced by piecewise-linear arc length.

    The first and last input points are kept exactly.
    """
    if n_points < 2:
        raise DataError("resample: need at least 2 output points")
    pts = s.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    pts, seg = pts[keep], seg[seg > 0]
    if seg.size == 0:
        raise DataError(f"streamline {s.id}: zero-length streamline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], n_points)
    out = np.column_stack([np.interp(targets, cum, pts[:, a]) for a in range(3)])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return s.with_points(out)


def arc_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def _mdf_to_many(a: np.ndarray, others: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct and flipped mean point distances from ``a`` (P,3) to ``others`` (n,P,3)."""
    p = a.shape[0]
    direct = np.sqrt(((others - a) ** 2).sum(axis=-1)).sum(axis=-1) / p
    flipped = np.sqrt(((others - a[::-1]) ** 2).sum(axis=-1)).sum(axis=-1) / p
    return direct, flipped


def streamline_distance(a: Streamline, b: Streamline) -> float:
    """Minimum average direct-flip distance (mm) between equal-length streamlines."""
    if len(a) != len(b):
        raise DataError("point-count mismatch")
    direct, flipped = _mdf_to_many(a.points, b.points[None])
    return float(min(direct[0], flipped[0]))


def knn_arrays(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact k-NN over a stacked bundle ``(n, P, 3)``.

    Returns ``(index, distance, flipped)`` arrays of shape ``(n, k)``; rows are
    sorted by ascending distance with ties broken by lower index, and
    ``flipped`` marks neighbors that align with the target when reversed.
    """
    n = points.shape[0]
    if n <= k:
        raise DataError(f"insufficient streamlines: {n} for k={k}")
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    flip = np.empty((n, k), dtype=bool)
    for i in range(n):
        direct, flipped = _mdf_to_many(points[i], points)
        d = np.minimum(direct, flipped)
        d[i] = np.inf
        order = np.argsort(d, kind="stable")[:k]
        idx[i] = order
        dist[i] = d[order]
        flip[i] = flipped[order] < direct[order]
    return idx, dist, flip


def stack_points(bundle: Sequence[Streamline]) -> np.ndarray:
    sizes = {len(s) for s in bundle}
    if len(sizes) != 1:
        raise DataError("point-count mismatch")
    return np.stack([s.points for s in bundle])


def knn(bundle: Sequence[Streamline], k: int = DEFAULT_NEIGHBORS) -> list[NeighborSet]:
    if len(bundle) <= k:
        raise DataError(f"insufficient streamlines: {len(bundle)} for k={k}")
    idx, dist, _ = knn_arrays(stack_points(bundle), k)
    ids = [s.id for s in bundle]
    return [
        NeighborSet(s.id, tuple(ids[j] for j in idx[i]), tuple(float(x) for x in dist[i]))
        for i, s in enumerate(bundle)
    ]


def _precedes(a: np.ndarray, b: np.ndarray) -> bool | None:
    """``a`` before ``b`` in (z, y, x) lexicographic order; None when equal."""
    for axis in (2, 1, 0):
        if a[axis] != b[axis]:
            return bool(a[axis] < b[axis])
    return None


def _needs_flip(points: np.ndarray) -> bool:
    """Compare endpoints, then walk inward if they coincide (closed loops)."""
    p = points.shape[0]
    for i in range(p // 2):
        order = _precedes(points[i], points[p - 1 - i])
        if order is not None:
            return not order
    return False


def endpoints(s: Streamline) -> EndpointPair:
    """Endpoints in canonical order: smaller z first, ties by y then x."""
    flipped = _needs_flip(s.points)
    first, last = (s.points[-1], s.points[0]) if flipped else (s.points[0], s.points[-1])
    return EndpointPair(np.concatenate([first, last]), flipped)


def canonicalize(s: Streamline) -> Streamline:
    """Orient ``s`` so that its first point is the canonical-first endpoint."""
    return s.reversed() if endpoints(s).canonical_flipped else s


@dataclass(frozen=True)
class NormTransform:
    center: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) / self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + self.center

    def to_json(self) -> dict:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_json(cls, d: dict) -> "NormTransform":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]))


def fit_normalization(points: np.ndarray) -> NormTransform:
    """Centroid of all points and max point norm after centering."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise DataError("normalize: empty bundle")
    center = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    if not scale > 0:
        raise DataError("normalize: zero scale (all points identical)")
    return NormTransform(center, scale)


def normalize_bundle(bundle: Sequence[Streamline]):
    """Map a bundle into the unit ball. Returns ``(bundle', center, scale)``."""
    if not bundle:
        raise DataError("normalize: empty bundle")
    tf = fit_normalization(np.concatenate([s.points for s in bundle]))
    out = [s.with_points(tf.apply(s.points)) for s in bundle]
    return out, tf.center, tf.scale


# --- JSON Lines I/O -------------------------------------------------------


def _reject_constant(name):
    raise DataError(f"non-finite value {name} in streamline file")


def read_streamlines(path) -> list[Streamline]:
    out = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
                s = Streamline(obj["id"], obj["points"], obj.get("label"))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if s.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {s.id}")
            seen.add(s.id)
            out.append(s)
    return out


def write_streamlines(path, bundle: Iterable[Streamline]) -> None:
    with open(path, "w") as fh:
        for s in bundle:
            rec = {"id": s.id, "points": s.points.tolist(), "label": s.label}
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


def labels_of(bundle: Sequence[Streamline]) -> np.ndarray:
    if any(s.label is None for s in bundle):
        raise DataError("bundle has unlabeled streamlines")
    return np.array([s.label for s in bundle], dtype=np.int64)

