"""Functional stream: endpoint coordinate encoder, 1-D CNN signal encoder, integrator."""

from __future__ import annotations

import numpy as np

from .autonet import Affine, Conv1d, MaxPool, ParamStore, ReLU, Sequential, mlp
from .errors import ShapeError
from .streamlines import N_CLASSES

VARIANTS = ("full", "endpoint_only", "fmri_only")
MIN_FRAMES = 32
GEOM_WIDTHS = (6, 64, 128)
FUNC_DIM = 128  # per endpoint; two endpoints -> 256
INTEGRATOR_WIDTHS = (128 + 2 * FUNC_DIM, 256, 128)


def signal_encoder(group, name: str, rng: np.random.Generator) -> Sequential:
    """conv(1->32, k7, s2) - ReLU - conv(32->64, k5, s2) - ReLU - max over time - affine 64->128."""
    return Sequential([
        Conv1d(group, f"{name}.conv0", 1, 32, 7, rng, stride=2),
        ReLU(),
        Conv1d(group, f"{name}.conv1", 32, 64, 5, rng, stride=2),
        ReLU(),
        MaxPool(axis=2, name=f"{name}.pool"),
        Affine(group, f"{name}.proj", 64, FUNC_DIM, rng),
    ], name=name)


class Auxiliary:
    """Endpoint pathway producing 4 logits (or its feature, for concat fusion).

    ``full``: integrate(geom 128, func 256) -> 128 -> head.
    ``endpoint_only``: geom 128 -> head. ``fmri_only``: func 256 -> head.
    With ``tied=True`` both endpoint series go through one encoder.
    """

    def __init__(self, variant: str = "full", rng: np.random.Generator | None = None,
                 store: ParamStore | None = None, group: str = "auxiliary",
                 tied: bool = True, head: bool = True):
        if variant not in VARIANTS:
            raise ValueError(f"unknown auxiliary variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.tied = tied
        self.store = store if store is not None else ParamStore()
        g = self.store.group(group)
        self.uses_geom = variant in ("full", "endpoint_only")
        self.uses_func = variant in ("full", "fmri_only")
        if self.uses_geom:
            self.geom = mlp(g, "geom", GEOM_WIDTHS, rng)
        if self.uses_func:
            self.func_a = signal_encoder(g, "func", rng)
            self.func_b = self.func_a if tied else signal_encoder(g, "func_b", rng)
        if variant == "full":
            self.integrate = mlp(g, "integrate", INTEGRATOR_WIDTHS, rng)
        self.feature_dim = {"full": 128, "endpoint_only": 128, "fmri_only": 2 * FUNC_DIM}[variant]
        self.head = Affine(g, "head", self.feature_dim, N_CLASSES, rng) if head else None
        self._n = 0

    # encoders -------------------------------------------------------------

    def encode_geom(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 6:
            raise ShapeError(f"endpoint_geom_encode: coords shape {coords.shape}, expected (B, 6)")
        return self.geom.forward(coords)

    def encode_func(self, sig_a: np.ndarray, sig_b: np.ndarray) -> np.ndarray:
        sig_a = np.asarray(sig_a, dtype=np.float64)
        sig_b = np.asarray(sig_b, dtype=np.float64)
        if sig_a.ndim != 2 or sig_a.shape != sig_b.shape:
            raise ShapeError(f"endpoint_func_encode: series shapes {sig_a.shape}, {sig_b.shape}")
        if sig_a.shape[1] < MIN_FRAMES:
            raise ShapeError(
                f"endpoint_func_encode: {sig_a.shape[1]} frames, need >= {MIN_FRAMES}")
        n = sig_a.shape[0]
        self._n = n
        if self.tied:
            both = np.concatenate([sig_a, sig_b])[:, None, :]
            f = self.func_a.forward(both)
            return np.concatenate([f[:n], f[n:]], axis=1)
        return np.concatenate([self.func_a.forward(sig_a[:, None, :]),
                               self.func_b.forward(sig_b[:, None, :])], axis=1)

    def _backward_func(self, dfunc: np.ndarray) -> None:
        da, db = dfunc[:, :FUNC_DIM], dfunc[:, FUNC_DIM:]
        if self.tied:
            self.func_a.backward(np.concatenate([da, db]))
        else:
            self.func_a.backward(da)
            self.func_b.backward(db)

    # full pathway ---------------------------------------------------------

    def features(self, coords=None, sig_a=None, sig_b=None) -> np.ndarray:
        if self.variant == "endpoint_only":
            return self.encode_geom(coords)
        if self.variant == "fmri_only":
            return self.encode_func(sig_a, sig_b)
        geom = self.encode_geom(coords)
        func = self.encode_func(sig_a, sig_b)
        return self.integrate.forward(np.concatenate([geom, func], axis=1))

    def backward_features(self, dfeat: np.ndarray) -> None:
        if self.variant == "endpoint_only":
            self.geom.backward(dfeat)
        elif self.variant == "fmri_only":
            self._backward_func(dfeat)
        else:
            d = self.integrate.backward(dfeat)
            self.geom.backward(d[:, :128])
            self._backward_func(d[:, 128:])

    def forward(self, coords=None, sig_a=None, sig_b=None) -> np.ndarray:
        if self.head is None:
            raise RuntimeError("auxiliary built without a logit head")
        return self.head.forward(self.features(coords, sig_a, sig_b))

    def backward(self, dlogits: np.ndarray) -> None:
        self.backward_features(self.head.backward(dlogits))
