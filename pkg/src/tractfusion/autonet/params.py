"""Named parameter groups with gradients, Adam moments and freeze flags."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np


class Param:
    """A single tensor plus its gradient and Adam moment buffers."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


class ParamGroup:
    """An ordered collection of tensors that is frozen or trained as a unit."""

    def __init__(self, name: str, frozen: bool = False):
        self.name = name
        self.frozen = frozen
        self.params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter {self.name}/{name}")
        p = Param(name, value)
        self.params[name] = p
        return p

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    @property
    def size(self) -> int:
        return sum(p.size for p in self)

    def flat(self) -> np.ndarray:
        """Concatenated parameter values (a copy), in insertion order."""
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.value.ravel() for p in self])

    def flat_grad(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.grad.ravel() for p in self])

    def load_flat(self, values: np.ndarray, which: str = "value") -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.size:
            raise ValueError(
                f"group {self.name}: expected {self.size} values, got {values.size}"
            )
        offset = 0
        for p in self:
            chunk = values[offset : offset + p.size].reshape(p.shape)
            getattr(p, which)[...] = chunk
            offset += p.size


class ParamStore:
    """Ordered mapping of group name to :class:`ParamGroup`.

    The optimizer step counter lives here so it is checkpointed alongside
    the moments.
    """

    def __init__(self):
        self.groups: OrderedDict[str, ParamGroup] = OrderedDict()
        self.step = 0

    def group(self, name: str, frozen: bool = False) -> ParamGroup:
        """Return the group called ``name``, creating it if needed."""
        if name not in self.groups:
            self.groups[name] = ParamGroup(name, frozen)
        return self.groups[name]

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def __iter__(self):
        return iter(self.groups.values())

    def freeze(self, name: str, frozen: bool = True) -> None:
        self.groups[name].frozen = frozen

    def zero_grad(self) -> None:
        for g in self:
            for p in g:
                p.grad.fill(0.0)

    def trainable(self):
        for g in self:
            if not g.frozen:
                yield from g
