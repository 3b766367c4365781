from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

KINDS = ("conv", "dense", "bias", "bn-scale", "bn-shift")


@dataclass
class Param:
    name: str
    kind: str
    value: np.ndarray
    trainable: bool = True


class ParamSet:
    """Ordered, uniquely named model tensors with a trainable/frozen flag each.

    The order is the network's topological order and is what gets serialized.
    """

    def __init__(self, params: list[Param] | None = None):
        self._params: dict[str, Param] = {}
        for p in params or []:
            self.add(p)

    def add(self, p: Param) -> None:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        if p.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {p.kind!r}")
        self._params[p.name] = p

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        p = self._params[name]
        if value.shape != p.value.shape:
            raise ValueError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].trainable = flag

    def count(self) -> int:
        return int(sum(p.value.size for p in self))

    def nbytes_f32(self) -> int:
        return 4 * self.count()

    def copy(self) -> "ParamSet":
        return ParamSet([Param(p.name, p.kind, p.value.copy(), p.trainable) for p in self])

    def astype(self, dtype) -> "ParamSet":
        return ParamSet([Param(p.name, p.kind, p.value.astype(dtype), p.trainable) for p in self])

    def with_values(self, values: dict[str, np.ndarray]) -> "ParamSet":
        """Copy with selected tensors replaced."""
        out = self.copy()
        for name, v in values.items():
            out[name] = np.asarray(v, dtype=out[name].dtype)
        return out

    def same_layout(self, other: "ParamSet") -> str | None:
        """Describe the first layout mismatch against ``other``, or None."""
        a, b = self.names(), other.names()
        for i, (na, nb) in enumerate(zip(a, b)):
            if na != nb:
                return f"entry {i}: name {na!r} vs {nb!r}"
            if self[na].shape != other[nb].shape:
                return f"{na}: shape {self[na].shape} vs {other[nb].shape}"
        if len(a) != len(b):
            return f"tensor count {len(a)} vs {len(b)}"
        return None

    def equal(self, other: "ParamSet") -> bool:
        return self.same_layout(other) is None and all(
            self.param(n).trainable == other.param(n).trainable
            and self[n].dtype == other[n].dtype
            and np.array_equal(self[n], other[n])
            for n in self.names()
        )

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.count()} values)"
