"""Central finite-difference checks of layer gradients in 64-bit."""

from __future__ import annotations

import numpy as np

from .layers import Layer


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def init_layer_params(layer: Layer, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random float64 values for every tensor the layer owns (scales near 1, shifts near 0)."""
    P = {}
    for name, kind, shape, fan_in in layer.param_specs():
        if kind == "bn-scale":
            P[name] = rng.uniform(0.5, 1.5, shape)
        else:
            P[name] = rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), shape)
    return P


def gradcheck(layer: Layer, x: np.ndarray, P: dict[str, np.ndarray], rng: np.random.Generator,
              h: float = 1e-5) -> dict[str, float]:
    """Relative error of analytic vs. central-difference gradients, per tensor and for the input.

    The scalar probed is ``sum(R * layer(x))`` for a fixed random ``R``.
    """
    x = np.asarray(x, dtype=np.float64)
    P = {k: np.asarray(v, dtype=np.float64) for k, v in P.items()}
    out = layer.forward(P, x, cache=True)
    R = rng.normal(size=out.shape)
    grads: dict[str, np.ndarray] = {}
    dx = layer.backward(P, R, grads, set(P))

    def objective() -> float:
        return float(np.sum(R * layer.forward(P, x, cache=False)))

    def numeric(arr: np.ndarray) -> np.ndarray:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        return g

    errors = {name: relative_error(grads.get(name, np.zeros_like(v)), numeric(v)) for name, v in P.items()}
    errors["input"] = relative_error(dx, numeric(x))
    return errors
