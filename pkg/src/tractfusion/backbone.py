"""Geometric stream: neighbor-aware point encoder or plain PointNet, plus a 4-way head."""

from __future__ import annotations

import numpy as np

from .autonet import AffineMax, ParamStore, mlp
from .errors import ShapeError
from .streamlines import N_CLASSES

KINDS = ("tractcloud", "pointnet")
GLOBAL_DIM = 1024
PAIR_WIDTHS = (6, 64, 128)
POINT_WIDTHS = {"tractcloud": (128, 256, GLOBAL_DIM), "pointnet": (3, 64, 128, GLOBAL_DIM)}
HEAD_WIDTHS = (GLOBAL_DIM, 512, 256, N_CLASSES)


def pairwise_features(target: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """``(B, K, P, 6)`` array whose entry ``[b, k, i]`` is ``target[b, i] ++ neighbors[b, k, i]``."""
    if target.ndim != 3 or target.shape[-1] != 3:
        raise ShapeError(f"pairwise_features: target shape {target.shape}, expected (B, P, 3)")
    if neighbors.ndim != 4 or neighbors.shape[0] != target.shape[0] \
            or neighbors.shape[2:] != target.shape[1:]:
        raise ShapeError(
            f"pairwise_features: neighbors shape {neighbors.shape} vs target {target.shape}")
    rep = np.broadcast_to(target[:, None], neighbors.shape)
    return np.concatenate([rep, neighbors], axis=-1)


class Backbone:
    """Streamline classifier producing a 1024-D global feature and 4 logits.

    ``tractcloud``: shared MLP 6-64-128 over (target point, neighbor point)
    pairs, max over neighbors, point MLP 128-256-1024, max over points.
    ``pointnet``: point MLP 3-64-128-1024 on the target alone, max over points.
    Both end in the classifier 1024-512-256-4.
    """

    def __init__(self, kind: str = "tractcloud", rng: np.random.Generator | None = None,
                 store: ParamStore | None = None, group: str = "backbone"):
        if kind not in KINDS:
            raise ValueError(f"unknown backbone kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.store = store if store is not None else ParamStore()
        self.group_name = group
        g = self.store.group(group)
        if kind == "tractcloud":
            self.pair = mlp(g, "pair", PAIR_WIDTHS[:-1], rng)
            self.pool_neighbors = AffineMax(g, "pair.1", *PAIR_WIDTHS[-2:], rng)
            self.pair.layers[0].needs_input_grad = False
        widths = POINT_WIDTHS[kind]
        self.point = mlp(g, "point", widths[:-1], rng)
        self.pool_points = AffineMax(g, f"point.{len(widths) - 2}", *widths[-2:], rng)
        if kind == "pointnet":
            self.point.layers[0].needs_input_grad = False
        self.head = mlp(g, "head", HEAD_WIDTHS, rng, final_relu=False)

    @property
    def uses_neighbors(self) -> bool:
        return self.kind == "tractcloud"

    def encode(self, target: np.ndarray, neighbors: np.ndarray | None = None):
        """Return ``(global_feature (B, 1024), logits (B, 4))``."""
        target = np.asarray(target, dtype=np.float64)
        if target.ndim != 3 or target.shape[-1] != 3:
            raise ShapeError(f"backbone: target shape {target.shape}, expected (B, P, 3)")
        if self.kind == "tractcloud":
            if neighbors is None:
                raise ShapeError("backbone(tractcloud): neighbors required")
            pairs = pairwise_features(target, np.asarray(neighbors, np.float64))
            b, k, p, _ = pairs.shape
            # (B, P, K, 6) so the neighbor axis is the pooled one after flattening
            h = self.pair.forward(pairs.transpose(0, 2, 1, 3).reshape(b * p, k, 6))
            h = self.pool_neighbors.forward(h).reshape(b, p, -1)  # (B, P, 128)
        else:
            h = target
        g = self.pool_points.forward(self.point.forward(h))  # (B, 1024)
        return g, self.head.forward(g)

    def forward(self, target, neighbors=None) -> np.ndarray:
        return self.encode(target, neighbors)[1]

    def backward(self, dlogits: np.ndarray, dglobal: np.ndarray | None = None) -> None:
        dg = self.head.backward(dlogits)
        if dglobal is not None:
            dg = dg + dglobal
        dh = self.point.backward(self.pool_points.backward(dg))
        if self.kind == "tractcloud":
            b, p, c = dh.shape
            self.pair.backward(self.pool_neighbors.backward(dh.reshape(b * p, c)))

    def predict_batched(self, inputs_fn, n: int, chunk: int = 256):
        """Run :meth:`encode` over ``range(n)`` in fixed-size chunks.

        ``inputs_fn(idx)`` returns the keyword inputs for sample indices ``idx``.
        """
        gs, ls = [], []
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            g, logits = self.encode(**inputs_fn(idx))
            gs.append(g)
            ls.append(logits)
        return np.concatenate(gs), np.concatenate(ls)
