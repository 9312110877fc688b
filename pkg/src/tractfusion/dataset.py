"""Dataset directories and model-ready feature arrays.

A dataset directory holds ``streamlines.jsonl``, ``grid.json`` (+ ``.raw``),
``mask.json`` (+ ``.raw``) and optionally ``provenance.json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .fmri import (
    CorticalMask,
    VoxelGridSeries,
    denoise,
    endpoint_signal_arrays,
    read_grid,
    read_mask,
    write_grid,
    write_mask,
)
from .streamlines import (
    DEFAULT_NEIGHBORS,
    DEFAULT_POINTS,
    NormTransform,
    Streamline,
    canonicalize,
    knn_arrays,
    read_streamlines,
    resample,
    write_streamlines,
)

STREAMLINES = "streamlines.jsonl"
GRID = "grid.json"
MASK = "mask.json"
PROVENANCE = "provenance.json"


@dataclass
class RawDataset:
    bundle: list[Streamline]
    grid: VoxelGridSeries
    mask: CorticalMask | None


def write_dataset(out_dir, bundle, grid, mask, provenance: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_streamlines(out / STREAMLINES, bundle)
    write_grid(out / GRID, grid)
    write_mask(out / MASK, mask)
    paths = [out / STREAMLINES, out / GRID, out / GRID.replace(".json", ".raw"),
             out / MASK, out / MASK.replace(".json", ".raw")]
    if provenance is not None:
        (out / PROVENANCE).write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
        paths.append(out / PROVENANCE)
    return paths


def load_dataset(data_dir) -> RawDataset:
    d = Path(data_dir)
    if not (d / STREAMLINES).exists():
        raise DataError(f"{d}: missing {STREAMLINES}")
    bundle = read_streamlines(d / STREAMLINES)
    grid = read_grid(d / GRID) if (d / GRID).exists() else None
    if grid is None:
        raise DataError(f"{d}: missing {GRID}")
    mask = read_mask(d / MASK) if (d / MASK).exists() else None
    return RawDataset(bundle, grid, mask)


def dataset_hash(data_dir) -> str:
    """SHA-256 over the dataset's data files in a fixed order."""
    d = Path(data_dir)
    h = hashlib.sha256()
    for name in (STREAMLINES, GRID, "grid.raw", MASK, "mask.raw"):
        p = d / name
        if p.exists():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def zscore_rows(x: np.ndarray) -> np.ndarray:
    """Per-row z-score; rows with zero spread map to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    sd = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    scale = np.maximum(np.abs(mean), 1.0)
    flat = sd <= 1e-12 * scale
    out = np.where(flat, 0.0, centered / np.where(flat, 1.0, sd))
    return out


@dataclass
class Features:
    """Per-streamline arrays in dataset order; geometry in mm, canonical orientation."""

    ids: np.ndarray
    labels: np.ndarray | None
    points: np.ndarray        # (N, P, 3)
    neighbor_idx: np.ndarray  # (N, K)
    neighbor_flip: np.ndarray  # (N, K)
    endpoints: np.ndarray     # (N, 6)
    sig_a: np.ndarray         # (N, T) z-scored
    sig_b: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    @property
    def n_points(self):
        return self.points.shape[1]

    @property
    def k(self):
        return self.neighbor_idx.shape[1]

    @property
    def frames(self):
        return self.sig_a.shape[1]

    def backbone_inputs(self, idx, tf: NormTransform, with_neighbors: bool = True) -> dict:
        target = tf.apply(self.points[idx])
        if not with_neighbors:
            return {"target": target}
        nb = self.points[self.neighbor_idx[idx]]  # (n, K, P, 3)
        flip = self.neighbor_flip[idx]
        nb = np.where(flip[:, :, None, None], nb[:, :, ::-1, :], nb)
        return {"target": target, "neighbors": tf.apply(nb)}

    def aux_inputs(self, idx, tf: NormTransform) -> dict:
        e = self.endpoints[idx]
        coords = np.concatenate([tf.apply(e[:, :3]), tf.apply(e[:, 3:])], axis=1)
        return {"coords": coords, "sig_a": self.sig_a[idx], "sig_b": self.sig_b[idx]}

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset has unlabeled streamlines")
        return self.labels


def prepare_features(bundle: Sequence[Streamline], grid: VoxelGridSeries,
                     mask: CorticalMask | None, *, n_points: int = DEFAULT_POINTS,
                     k: int = DEFAULT_NEIGHBORS, denoise_grid: bool | None = None) -> Features:
    """Canonicalize, resample, find neighbors and map endpoint signals.

    ``denoise_grid=None`` denoises unless the grid's provenance says it was
    already denoised. A missing mask means the whole grid is treated as in-mask.
    """
    if not bundle:
        raise DataError("empty bundle")
    canon = [resample(canonicalize(s), n_points) for s in bundle]
    points = np.stack([s.points for s in canon])
    nb_idx, _, nb_flip = knn_arrays(points, k)
    if mask is None:
        mask = CorticalMask(grid.geometry, np.ones(grid.dims, dtype=bool))
    if denoise_grid is None:
        denoise_grid = "denoise" not in grid.provenance
    if denoise_grid:
        grid = denoise(grid, mask)
    sig_a, sig_b = endpoint_signal_arrays(grid, mask, canon)
    labels = None
    if all(s.label is not None for s in bundle):
        labels = np.array([s.label for s in bundle], dtype=np.int64)
    ends = np.concatenate([points[:, 0], points[:, -1]], axis=1)
    return Features(
        ids=np.array([s.id for s in bundle], dtype=np.int64),
        labels=labels,
        points=points,
        neighbor_idx=nb_idx,
        neighbor_flip=nb_flip,
        endpoints=ends,
        sig_a=zscore_rows(sig_a),
        sig_b=zscore_rows(sig_b),
    )


def load_features(data_dir, **kw) -> Features:
    raw = load_dataset(data_dir)
    return prepare_features(raw.bundle, raw.grid, raw.mask, **kw)
