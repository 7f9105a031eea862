"""Named parameter storage.

A :class:`WeightTree` maps dotted names to arrays (or Variables during
training) and always iterates in lexicographic order. Layers read their
parameters through a :class:`Scope`, a prefix view onto the tree.
"""
from __future__ import annotations

from collections.abc import Mapping, MutableMapping

import numpy as np


class WeightTree(MutableMapping):
    def __init__(self, items=None):
        self._d: dict[str, object] = {}
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, k):
        return self._d[k]

    def __setitem__(self, k, v):
        if not isinstance(k, str) or not k:
            raise KeyError(f"weight names must be non-empty strings, got {k!r}")
        self._d[k] = v

    def __delitem__(self, k):
        del self._d[k]

    def __iter__(self):
        return iter(sorted(self._d))

    def __len__(self):
        return len(self._d)

    def __repr__(self):
        return f"WeightTree({len(self)} tensors)"

    def scope(self, prefix: str = "") -> "Scope":
        return Scope(self, prefix)

    def update_prefixed(self, prefix: str, items: Mapping) -> None:
        for k, v in items.items():
            self[f"{prefix}.{k}" if prefix else k] = v

    def map(self, fn) -> "WeightTree":
        return WeightTree({k: fn(k, v) for k, v in self.items()})

    def num_params(self) -> int:
        return int(sum(np.size(getattr(v, "value", v)) for v in self._d.values()))

    def equal(self, other: "WeightTree") -> bool:
        """Bitwise equality of names, shapes, dtypes and contents."""
        if list(self) != list(other):
            return False
        for k in self:
            a, b = np.asarray(self[k]), np.asarray(other[k])
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


class Scope(Mapping):
    """Read-only prefix view: ``scope["conv.weight"]`` reads ``prefix.conv.weight``."""

    def __init__(self, tree: Mapping, prefix: str = ""):
        self.tree = tree
        self.prefix = prefix

    def _key(self, k: str) -> str:
        return f"{self.prefix}.{k}" if self.prefix else k

    def __getitem__(self, k):
        return self.tree[self._key(k)]

    def __contains__(self, k):
        return self._key(k) in self.tree

    def __iter__(self):
        p = self.prefix + "." if self.prefix else ""
        return (k[len(p):] for k in self.tree if k.startswith(p))

    def __len__(self):
        return sum(1 for _ in self)

    def sub(self, name: str) -> "Scope":
        return Scope(self.tree, self._key(name))

    def get(self, k, default=None):
        return self[k] if k in self else default


def as_scope(w) -> Scope:
    """Accept a Scope, WeightTree or plain dict of relative names."""
    if isinstance(w, Scope):
        return w
    if isinstance(w, WeightTree):
        return w.scope()
    return Scope(dict(w))
