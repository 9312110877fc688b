"""Layers with hand-written backward passes.

Every layer caches what it needs from its most recent ``forward`` call and
``backward(dy)`` returns the gradient with respect to that call's input,
accumulating parameter gradients into the owning :class:`Param` objects.
Affine-type layers act on the last axis so the same object serves as a
point-wise ("shared") MLP over any number of leading axes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError
from ._kernels import max_argmax, route_backward
from .params import ParamGroup


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Affine(Layer):
    """``y = x @ W + b`` over the last axis of ``x``."""

    def __init__(self, group: ParamGroup, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.W = group.add(f"{name}.W", glorot_uniform(rng, n_in, n_out, (n_in, n_out)))
        self.b = group.add(f"{name}.b", np.zeros(n_out))
        self._x = None
        # first layer on raw data: the input gradient is never used
        self.needs_input_grad = True

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: expected last axis {self.n_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        # one 2-D GEMM; stacked matmul over leading axes is much slower
        x2 = x.reshape(-1, self.n_in)
        self._x = x2
        y = x2 @ self.W.value
        y += self.b.value
        return y.reshape(lead + (self.n_out,))

    def backward(self, dy):
        lead = dy.shape[:-1]
        dy2 = dy.reshape(-1, self.n_out)
        self.W.grad += self._x.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        if not self.needs_input_grad:
            return None
        return (dy2 @ self.W.value.T).reshape(lead + (self.n_in,))


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool(Layer):
    """Max over one axis (the axis is removed). Ties route to the first index."""

    def __init__(self, axis: int, name: str = "maxpool"):
        self.axis = axis
        self.name = name
        self._idx = None
        self._shape = None

    def forward(self, x):
        if not -x.ndim <= self.axis < x.ndim:
            raise ShapeError(f"{self.name}: axis {self.axis} out of range for shape {x.shape}")
        self._shape = x.shape
        self._idx = np.argmax(x, axis=self.axis)
        idx = np.expand_dims(self._idx, self.axis)
        return np.take_along_axis(x, idx, axis=self.axis).squeeze(self.axis)

    def backward(self, dy):
        dx = np.zeros(self._shape)
        np.put_along_axis(dx, np.expand_dims(self._idx, self.axis),
                          np.expand_dims(dy, self.axis), axis=self.axis)
        return dx


class Conv1d(Layer):
    """1-D convolution (cross-correlation) on ``(batch, channels, time)`` input.

    Weights have shape ``(out_channels, in_channels, kernel)``; padding is
    symmetric zero padding of ``padding`` frames on each side.
    """

    def __init__(self, group: ParamGroup, name: str, in_channels: int, out_channels: int,
                 kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        if kernel < 1 or stride < 1 or padding < 0:
            raise ValueError(f"{name}: invalid kernel/stride/padding")
        self.name = name
        self.c_in, self.c_out = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in, fan_out = in_channels * kernel, out_channels * kernel
        self.W = group.add(f"{name}.W", glorot_uniform(
            rng, fan_in, fan_out, (out_channels, in_channels, kernel)))
        self.b = group.add(f"{name}.b", np.zeros(out_channels))
        self._cols = None
        self._in_shape = None

    def output_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(
                f"{self.name}: expected (batch, {self.c_in}, time), got shape {x.shape}")
        t_out = self.output_length(x.shape[2])
        if t_out < 1:
            raise ShapeError(f"{self.name}: input length {x.shape[2]} shorter than kernel")
        self._in_shape = x.shape
        if self.padding:
            x = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding)))
        # (B, C_in, T_out, k) -> (B, T_out, C_in * k)
        win = sliding_window_view(x, self.kernel, axis=2)[:, :, ::self.stride, :]
        cols = win.transpose(0, 2, 1, 3).reshape(x.shape[0], t_out, self.c_in * self.kernel)
        self._cols = cols
        w2 = self.W.value.reshape(self.c_out, -1)
        y = cols @ w2.T + self.b.value
        return y.transpose(0, 2, 1)

    def backward(self, dy):
        batch, _, t_in = self._in_shape
        t_out = dy.shape[2]
        dy_t = dy.transpose(0, 2, 1)  # (B, T_out, C_out)
        w2 = self.W.value.reshape(self.c_out, -1)
        cols2 = self._cols.reshape(-1, self.c_in * self.kernel)
        dy2 = dy_t.reshape(-1, self.c_out)
        self.W.grad += (dy2.T @ cols2).reshape(self.W.shape)
        self.b.grad += dy2.sum(axis=0)
        dcols = (dy_t @ w2).reshape(batch, t_out, self.c_in, self.kernel)
        dxp = np.zeros((batch, self.c_in, t_in + 2 * self.padding))
        span = self.stride * (t_out - 1) + 1
        for j in range(self.kernel):
            dxp[:, :, j : j + span : self.stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        if self.padding:
            dxp = dxp[:, :, self.padding : self.padding + t_in]
        return dxp


class AffineMax(Layer):
    """Affine over the last axis, max over axis 1, then ReLU: ``(G, M, i) -> (G, o)``.

    Equal to ``MaxPool(1)`` applied after ``Affine`` + ``ReLU`` (ReLU and max
    commute), but the backward pass only touches the winning rows, so the
    weight gradient costs ``G*o*i`` instead of ``G*M*o*i``.
    """

    def __init__(self, group: ParamGroup, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.W = group.add(f"{name}.W", glorot_uniform(rng, n_in, n_out, (n_in, n_out)))
        self.b = group.add(f"{name}.b", np.zeros(n_out))
        self._x = self._idx = self._active = None

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: expected (G, M, {self.n_in}), got shape {x.shape}")
        g, m, _ = x.shape
        z = (x.reshape(-1, self.n_in) @ self.W.value).reshape(g, m, self.n_out)
        zmax, idx = max_argmax(z)  # ties go to the first index
        zmax += self.b.value
        self._x, self._idx = x, idx
        self._active = zmax > 0
        return zmax * self._active

    def backward(self, dy):
        x = np.ascontiguousarray(self._x)
        dz = np.ascontiguousarray(dy * self._active)  # (G, o)
        dwt = np.zeros((self.n_out, self.n_in))
        dx = np.zeros_like(x)
        route_backward(x, self._idx, dz, np.ascontiguousarray(self.W.value.T), dwt, dx)
        self.W.grad += dwt.T
        self.b.grad += dz.sum(axis=0)
        return dx


class Sequential(Layer):
    def __init__(self, layers, name: str = "seq"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def mlp(group: ParamGroup, name: str, widths, rng: np.random.Generator,
        final_relu: bool = True) -> Sequential:
    """Stack of :class:`Affine` layers with ReLU between them.

    ``widths`` lists every layer size including input, e.g. ``(6, 64, 128)``.
    """
    layers: list[Layer] = []
    n = len(widths) - 1
    for i in range(n):
        layers.append(Affine(group, f"{name}.{i}", widths[i], widths[i + 1], rng))
        if i < n - 1 or final_relu:
            layers.append(ReLU())
    return Sequential(layers, name=name)


# Shared point-wise MLP is the same object: Affine acts on the last axis.
shared_mlp = mlp


def softmax_xent(logits: np.ndarray, labels: np.ndarray, class_weights=None):
    """Class-weighted softmax cross-entropy, averaged over the batch.

    Returns ``(loss, dloss/dlogits)``. The per-sample terms are multiplied by
    the weight of the true class and divided by the batch size (not by the
    weight sum), so scaling every weight scales the loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if np.any((labels < 0) | (labels >= c)):
        raise ValueError("softmax_xent: label out of range")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax_xent: non-finite logits")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,) or np.any(w <= 0):
        raise ValueError("softmax_xent: class weights must be positive, one per class")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    ws = w[labels]
    loss = float(np.sum(ws * -logp[rows, labels]) / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= (ws / n)[:, None]
    return loss, grad
