"""Checkpoint files: a JSON manifest plus a sibling little-endian f64 blob.

Blob layout: every group's parameters in manifest order, then every group's
Adam first moments, then every group's second moments. Within a group the
tensors follow the manifest's tensor list, each C-order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .params import ParamStore

FORMAT = "tractfusion-checkpoint/1"


def blob_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".bin") if path.suffix != ".bin" else path.with_suffix(".bin.bin")


def save_checkpoint(path, store: ParamStore, kind: str, meta: dict | None = None) -> None:
    path = Path(path)
    groups = []
    for g in store:
        groups.append({
            "name": g.name,
            "frozen": g.frozen,
            "tensors": [{"name": p.name, "shape": list(p.shape)} for p in g],
        })
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "step": store.step,
        "groups": groups,
        "meta": meta or {},
        "blob": blob_path(path).name,
    }
    parts = []
    for which in ("value", "m", "v"):
        for g in store:
            for p in g:
                parts.append(getattr(p, which).ravel())
    blob = np.concatenate(parts).astype("<f8") if parts else np.zeros(0, "<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path(path).write_bytes(blob.tobytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"{path}: not a checkpoint manifest")
    return manifest


def read_blob(path, manifest: dict | None = None) -> np.ndarray:
    path = Path(path)
    manifest = manifest or read_manifest(path)
    raw = (path.parent / manifest["blob"]).read_bytes()
    return np.frombuffer(raw, dtype="<f8")


def load_into(path, store: ParamStore, kind: str | None = None) -> dict:
    """Load values, moments, freeze flags and step count into a built ``store``.

    The store must already hold groups/tensors with matching names and shapes
    (the model constructor builds them). Returns the manifest.
    """
    manifest = read_manifest(path)
    if kind is not None and manifest["kind"] != kind:
        raise DataError(f"checkpoint kind {manifest['kind']!r}, expected {kind!r}")
    blob = read_blob(path, manifest)
    expected = []
    for gm in manifest["groups"]:
        if gm["name"] not in store:
            raise DataError(f"checkpoint group {gm['name']!r} not present in model")
        g = store[gm["name"]]
        names = [t["name"] for t in gm["tensors"]]
        if names != list(g.params):
            raise DataError(f"group {g.name}: tensor list mismatch")
        for t in gm["tensors"]:
            if tuple(t["shape"]) != g.params[t["name"]].shape:
                raise DataError(f"{g.name}/{t['name']}: shape mismatch")
        expected.append(g)
    total = sum(g.size for g in expected)
    if blob.size != 3 * total:
        raise DataError(f"checkpoint blob has {blob.size} values, expected {3 * total}")
    offset = 0
    for which in ("value", "m", "v"):
        for g in expected:
            g.load_flat(blob[offset : offset + g.size], which)
            offset += g.size
    for gm in manifest["groups"]:
        store[gm["name"]].frozen = bool(gm["frozen"])
    store.step = int(manifest["step"])
    return manifest


def group_bytes(path, group: str) -> bytes:
    """Raw parameter bytes of one group as stored in a checkpoint blob."""
    manifest = read_manifest(path)
    blob = read_blob(path, manifest)
    offset = 0
    for gm in manifest["groups"]:
        size = sum(int(np.prod(t["shape"])) for t in gm["tensors"])
        if gm["name"] == group:
            return blob[offset : offset + size].tobytes()
        offset += size
    raise KeyError(group)
