"""A model is a frozen-able backbone followed by a trainable head, sharing one ParamSet."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, Sequential, ShapeError
from .params import Param, ParamSet


@dataclass(frozen=True)
class MatchUnit:
    """Hidden units that may be permuted without changing the function.

    ``producer`` holds one unit per row (axis 0); every ``travelers`` tensor is
    indexed by the same units on axis 0; every ``consumers`` tensor reads the
    units on axis 1.
    """

    producer: str
    travelers: tuple[str, ...] = ()
    consumers: tuple[str, ...] = ()

    def names(self) -> tuple[str, ...]:
        return (self.producer,) + self.travelers


@dataclass
class Model:
    name: str
    backbone: Sequential
    head: Sequential
    params: ParamSet
    input_shape: tuple[int, ...]
    num_classes: int
    match_units: list[MatchUnit] = field(default_factory=list)
    head_names: frozenset = frozenset()
    _head_only: bool = field(default=False, repr=False, compare=False)

    @property
    def backbone_frozen(self) -> bool:
        return not any(self.params.param(n).trainable for n in self.params.names() if n not in self.head_names)

    def with_params(self, params: ParamSet) -> "Model":
        """Same graph bound to another ParamSet (graph caches are not shared safely across threads)."""
        err = self.params.same_layout(params)
        if err:
            raise ShapeError(f"parameter layout mismatch: {err}")
        return Model(self.name, self.backbone, self.head, params, self.input_shape, self.num_classes,
                     self.match_units, self.head_names)

    def embedding_shape(self) -> tuple[int, ...]:
        return self.backbone.out_shape((1,) + tuple(self.input_shape))[1:]

    def depth(self) -> int:
        return self.backbone.depth() + self.head.depth()

    def param_count(self) -> int:
        return self.params.count()

    def peak_activation_elems(self, batch: int = 1) -> int:
        shape, peak_b = self.backbone.trace((batch,) + tuple(self.input_shape))
        _, peak_h = self.head.trace(shape)
        return max(peak_b, peak_h)

    def weighted_layer_names(self) -> list[str]:
        return [l.name for part in (self.backbone, self.head) for l in part.walk() if l.weighted]


def init_params(layers: Sequential, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """He-uniform weights, zero biases and shifts, unit scales."""
    ps = ParamSet()
    for name, kind, shape, fan_in in layers.param_specs():
        if kind in ("conv", "dense"):
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif kind == "bn-scale":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        ps.add(Param(name, kind, value.astype(dtype)))
    return ps


def _check_input(model: Model, batch: np.ndarray) -> None:
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"{model.name}: input shape {tuple(batch.shape[1:])} does not match "
                         f"model input {tuple(model.input_shape)}")


def embed(model: Model, batch: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Backbone output without caching, evaluated in chunks."""
    _check_input(model, batch)
    P = _values(model.params)
    outs = [model.backbone.forward(P, batch[i:i + chunk], cache=False) for i in range(0, len(batch), chunk)]
    if not outs:
        return np.zeros((0,) + model.embedding_shape(), dtype=batch.dtype)
    return np.concatenate(outs)


def _values(params: ParamSet) -> dict[str, np.ndarray]:
    return {p.name: p.value for p in params}


def forward(model: Model, batch: np.ndarray, cache: bool = True) -> np.ndarray:
    _check_input(model, batch)
    P = _values(model.params)
    h = model.backbone.forward(P, batch, cache=cache and not model.backbone_frozen)
    model._head_only = cache and model.backbone_frozen
    return model.head.forward(P, h, cache)


def forward_head(model: Model, features: np.ndarray, cache: bool = True) -> np.ndarray:
    model._head_only = True
    return model.head.forward(_values(model.params), features, cache)


def backward(model: Model, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor; frozen tensors get none."""
    P = _values(model.params)
    wanted = set(model.params.trainable_names())
    grads: dict[str, np.ndarray] = {}
    dy = model.head.backward(P, upstream, grads, wanted)
    if not model._head_only:
        model.backbone.backward(P, dy, grads, wanted)
    return grads


def predict_logits(model: Model, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    P = _values(model.params)
    outs = []
    for i in range(0, len(batch), chunk):
        x = batch[i:i + chunk]
        _check_input(model, x)
        outs.append(model.head.forward(P, model.backbone.forward(P, x, cache=False), cache=False))
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))
