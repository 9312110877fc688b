"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import softmax_xent
from .params import ParamStore

# Denominator floor: gradients below this magnitude are compared absolutely.
# Central differences at eps=1e-5 in f64 carry ~1e-10 absolute noise.
REL_FLOOR = 1e-6
# Relative tolerance of the kink probes; a coordinate with a ReLU or max
# switch inside [x - eps, x + eps] is skipped.
KINK_TOL = 1e-3


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                 coords=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``coords`` selects flat indices; the result is aligned with it (or with
    ``x.ravel()`` when ``coords`` is None).
    """
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(coords.size)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return out


def kink_free(f: Callable[[], float], x: np.ndarray, i: int, eps: float) -> bool:
    """True when ``f`` looks smooth over ``[x_i - eps, x_i + eps]``.

    Two symptoms of a ReLU or max switch: central differences at ``eps`` and
    ``eps / 2`` disagree, or the gap between one-sided slopes fails to halve
    with the step (smooth functions give ``eps * f''``, a kink its slope jump).
    """
    flat = x.reshape(-1)
    orig = flat[i]
    f0 = f()
    vals = {}
    for h in (eps, -eps, eps / 2, -eps / 2):
        flat[i] = orig + h
        vals[h] = f()
    flat[i] = orig
    c1 = (vals[eps] - vals[-eps]) / (2 * eps)
    c2 = (vals[eps / 2] - vals[-eps / 2]) / eps
    d1 = (vals[eps] - 2 * f0 + vals[-eps]) / eps
    d2 = (vals[eps / 2] - 2 * f0 + vals[-eps / 2]) / (eps / 2)
    scale = max(abs(c1), abs(c2), REL_FLOOR)
    if abs(c1 - c2) > KINK_TOL * scale:
        return False
    return not (abs(d2) > KINK_TOL * scale and abs(d2) > 0.75 * abs(d1))


def gradcheck(objective: Callable[[bool], float], store: ParamStore, *,
              rng: np.random.Generator, coords_per_group: int = 50,
              eps: float = 1e-5, stats: dict | None = None) -> float:
    """Max relative error between analytic and numeric parameter gradients.

    ``objective(True)`` must zero the gradients, run forward and backward and
    return the loss; ``objective(False)`` only returns the loss. At least
    ``coords_per_group`` coordinates are sampled per group (all of them when
    the group is smaller), frozen or not. Coordinates that straddle a kink
    are excluded; ``stats`` (if given) receives ``checked`` and ``skipped``
    counts.
    """
    objective(True)
    analytic = {g.name: g.flat_grad() for g in store}
    worst = 0.0
    checked = skipped = 0
    f = lambda: objective(False)  # noqa: E731
    for g in store:
        sizes = [p.size for p in g]
        total = sum(sizes)
        if total == 0:
            continue
        picks = np.arange(total) if total <= coords_per_group else np.sort(
            rng.choice(total, size=coords_per_group, replace=False))
        bounds = np.cumsum([0] + sizes)
        params = list(g)
        for flat_i in picks:
            j = int(np.searchsorted(bounds, flat_i, side="right") - 1)
            local = int(flat_i - bounds[j])
            num = numeric_grad(f, params[j].value, eps, [local])[0]
            err = float(relative_error(analytic[g.name][flat_i], num))
            # only suspicious coordinates pay for the extra probe
            if err > 1e-5 and not kink_free(f, params[j].value, local, eps):
                skipped += 1
                continue
            checked += 1
            worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


def model_gradcheck(model, batch: dict, labels: np.ndarray, class_weights=None, *,
                    rng: np.random.Generator, coords_per_group: int = 50,
                    eps: float = 1e-5, stats: dict | None = None) -> float:
    """:func:`gradcheck` on weighted cross-entropy of ``model.forward(**batch)``.

    ``model`` needs ``store``, ``forward(**batch) -> logits`` and
    ``backward(dlogits)``.
    """

    def objective(with_grad: bool) -> float:
        logits = model.forward(**batch)
        loss, dlogits = softmax_xent(logits, labels, class_weights)
        if with_grad:
            model.store.zero_grad()
            model.backward(dlogits)
        return loss

    return gradcheck(objective, model.store, rng=rng,
                     coords_per_group=coords_per_group, eps=eps, stats=stats)
