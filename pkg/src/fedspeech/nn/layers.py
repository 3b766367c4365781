"""Layer set for the NCHW numpy engine.

Every layer reads its tensors from a name -> array mapping at call time, so a
single layer graph can be evaluated against any ParamSet with the same
layout. Forward passes cache what backward needs on the layer instance; a
graph is therefore single-writer.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = Mapping[str, np.ndarray]


class MissingCacheError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Layer:
    name = ""
    weighted = False

    def param_specs(self) -> list[tuple[str, str, tuple, int]]:
        """(name, kind, shape, fan_in) for each owned tensor."""
        return []

    def forward(self, P: Params, x: np.ndarray, cache: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, P: Params, dy: np.ndarray, grads: dict, wanted) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def depth(self) -> int:
        return 1 if self.weighted else 0

    def trace(self, shape: tuple) -> tuple[tuple, int]:
        out = self.out_shape(shape)
        return out, math.prod(shape) + math.prod(out)

    def children(self) -> list["Layer"]:
        return []

    def walk(self):
        yield self
        for c in self.children():
            yield from c.walk()

    def _take_cache(self):
        c = getattr(self, "_cache", None)
        if c is None:
            raise MissingCacheError(f"{self.name or type(self).__name__}: backward called without a cached forward")
        self._cache = None
        return c


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


class Conv2d(Layer):
    """2-D convolution; ``groups`` is 1 or equal to the channel count (depthwise)."""

    weighted = True

    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 groups: int = 1, bias: bool = True):
        if groups not in (1, cin) or (groups == cin and cout != cin and groups != 1):
            raise ValueError(f"{name}: only dense or depthwise (cout == cin) convolutions are supported")
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.stride, self.pad, self.groups, self.bias = stride, pad, groups, bias
        self._cache = None

    @property
    def depthwise(self) -> bool:
        return self.groups > 1

    def param_specs(self):
        cg = self.cin // self.groups
        specs = [(self.name + ".w", "conv", (self.cout, cg, self.k, self.k), cg * self.k * self.k)]
        if self.bias:
            specs.append((self.name + ".b", "bias", (self.cout,), cg * self.k * self.k))
        return specs

    def out_shape(self, shape):
        b, c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {c}")
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {self.k}")
        return (b, self.cout, ho, wo)

    def forward(self, P, x, cache=True):
        b, _, ho, wo = self.out_shape(x.shape)
        W = P[self.name + ".w"]
        k, s = self.k, self.stride
        xp = _pad(x, self.pad)
        if self.depthwise:
            y = np.zeros((b, self.cout, ho, wo), dtype=np.result_type(x, W))
            for i in range(k):
                for j in range(k):
                    y += xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] * W[:, 0, i, j][None, :, None, None]
            cols = xp
        else:
            if k == 1 and s == 1:
                cols = xp.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.cin)
            else:
                win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
                cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, self.cin * k * k)
            y = (cols @ W.reshape(self.cout, -1).T).reshape(b, ho, wo, self.cout).transpose(0, 3, 1, 2)
        if self.bias:
            y = y + P[self.name + ".b"][None, :, None, None]
        if cache:
            self._cache = (x.shape, cols)
        return np.ascontiguousarray(y)

    def backward(self, P, dy, grads, wanted):
        in_shape, cols = self._take_cache()
        b, c, h, w = in_shape
        W = P[self.name + ".w"]
        k, s, p = self.k, self.stride, self.pad
        _, _, ho, wo = dy.shape
        wname = self.name + ".w"
        if self.bias and self.name + ".b" in wanted:
            grads[self.name + ".b"] = dy.sum(axis=(0, 2, 3))
        if self.depthwise:
            xp = cols
            dxp = np.zeros_like(xp)
            dW = np.zeros_like(W) if wname in wanted else None
            for i in range(k):
                for j in range(k):
                    sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                    if dW is not None:
                        dW[:, 0, i, j] = np.einsum("bchw,bchw->c", dy, xp[sl])
                    dxp[sl] += dy * W[:, 0, i, j][None, :, None, None]
            if dW is not None:
                grads[wname] = dW
        else:
            dym = dy.transpose(0, 2, 3, 1).reshape(-1, self.cout)
            if wname in wanted:
                grads[wname] = (dym.T @ cols).reshape(W.shape)
            dcols = dym @ W.reshape(self.cout, -1)
            if k == 1 and s == 1:
                dxp = dcols.reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(b, ho, wo, c, k, k)
                dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dxp)


class Dense(Layer):
    weighted = True

    def __init__(self, name: str, fin: int, fout: int, bias: bool = True):
        self.name, self.fin, self.fout, self.bias = name, fin, fout, bias
        self._cache = None

    def param_specs(self):
        specs = [(self.name + ".w", "dense", (self.fout, self.fin), self.fin)]
        if self.bias:
            specs.append((self.name + ".b", "bias", (self.fout,), self.fin))
        return specs

    def out_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.fin:
            raise ShapeError(f"{self.name}: expected (B, {self.fin}) input, got {tuple(shape)}")
        return (shape[0], self.fout)

    def forward(self, P, x, cache=True):
        self.out_shape(x.shape)
        y = x @ P[self.name + ".w"].T
        if self.bias:
            y = y + P[self.name + ".b"]
        if cache:
            self._cache = x
        return y

    def backward(self, P, dy, grads, wanted):
        x = self._take_cache()
        if self.name + ".w" in wanted:
            grads[self.name + ".w"] = dy.T @ x
        if self.bias and self.name + ".b" in wanted:
            grads[self.name + ".b"] = dy.sum(axis=0)
        return dy @ P[self.name + ".w"]


class Affine(Layer):
    """Per-channel scale and shift: batch norm with its statistics folded in."""

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels
        self._cache = None

    def param_specs(self):
        return [(self.name + ".scale", "bn-scale", (self.channels,), 1),
                (self.name + ".shift", "bn-shift", (self.channels,), 1)]

    def out_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[1]}")
        return tuple(shape)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, P, x, cache=True):
        self.out_shape(x.shape)
        if cache:
            self._cache = x
        return x * self._bcast(P[self.name + ".scale"], x.ndim) + self._bcast(P[self.name + ".shift"], x.ndim)

    def backward(self, P, dy, grads, wanted):
        x = self._take_cache()
        axes = (0,) + tuple(range(2, dy.ndim))
        if self.name + ".scale" in wanted:
            grads[self.name + ".scale"] = (dy * x).sum(axis=axes)
        if self.name + ".shift" in wanted:
            grads[self.name + ".shift"] = dy.sum(axis=axes)
        return dy * self._bcast(P[self.name + ".scale"], dy.ndim)


class ReLU(Layer):
    def __init__(self, cap: float | None = None, name: str = ""):
        self.cap, self.name = cap, name
        self._cache = None

    def out_shape(self, shape):
        return tuple(shape)

    def trace(self, shape):
        # applied in place
        return tuple(shape), math.prod(shape)

    def forward(self, P, x, cache=True):
        if self.cap is None:
            mask = x > 0
            y = x * mask
        else:
            mask = (x > 0) & (x < self.cap)
            y = np.clip(x, 0, self.cap)
        if cache:
            self._cache = mask
        return y

    def backward(self, P, dy, grads, wanted):
        return dy * self._take_cache()


class AvgPool2d(Layer):
    """Non-overlapping mean pooling; ``kw=None`` pools the full width."""

    def __init__(self, kh: int, kw: int | None = None, name: str = ""):
        self.kh, self.kw, self.name = kh, kw, name
        self._cache = None

    def _k(self, shape):
        kw = shape[3] if self.kw is None else self.kw
        if shape[2] % self.kh or shape[3] % kw:
            raise ShapeError(f"pool {self.kh}x{kw} does not divide input {shape[2]}x{shape[3]}")
        return self.kh, kw

    def out_shape(self, shape):
        kh, kw = self._k(shape)
        return (shape[0], shape[1], shape[2] // kh, shape[3] // kw)

    def forward(self, P, x, cache=True):
        b, c, h, w = x.shape
        kh, kw = self._k(x.shape)
        if cache:
            self._cache = x.shape
        return x.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def backward(self, P, dy, grads, wanted):
        shape = self._take_cache()
        kh, kw = self._k(shape)
        g = dy / (kh * kw)
        return np.repeat(np.repeat(g, kh, axis=2), kw, axis=3)


class Flatten(Layer):
    def __init__(self, name: str = ""):
        self.name = name
        self._cache = None

    def out_shape(self, shape):
        return (shape[0], math.prod(shape[1:]))

    def trace(self, shape):
        return self.out_shape(shape), math.prod(shape)

    def forward(self, P, x, cache=True):
        if cache:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, P, dy, grads, wanted):
        return dy.reshape(self._take_cache())


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = ""):
        self.layers, self.name = list(layers), name

    def children(self):
        return self.layers

    def param_specs(self):
        return [s for l in self.layers for s in l.param_specs()]

    def out_shape(self, shape):
        for l in self.layers:
            shape = l.out_shape(shape)
        return shape

    def trace(self, shape):
        peak = 0
        for l in self.layers:
            shape, p = l.trace(shape)
            peak = max(peak, p)
        return shape, peak

    def depth(self):
        return sum(l.depth() for l in self.layers)

    def forward(self, P, x, cache=True):
        for l in self.layers:
            x = l.forward(P, x, cache)
        return x

    def backward(self, P, dy, grads, wanted):
        for l in reversed(self.layers):
            dy = l.backward(P, dy, grads, wanted)
        return dy


class Residual(Layer):
    """``body(x) + shortcut(x)``, identity shortcut when none is given."""

    def __init__(self, body: Layer, shortcut: Layer | None = None, name: str = ""):
        self.body, self.shortcut, self.name = body, shortcut, name

    def children(self):
        return [self.body] + ([self.shortcut] if self.shortcut else [])

    def param_specs(self):
        return [s for c in self.children() for s in c.param_specs()]

    def out_shape(self, shape):
        out = self.body.out_shape(shape)
        sc = self.shortcut.out_shape(shape) if self.shortcut else tuple(shape)
        if tuple(out) != tuple(sc):
            raise ShapeError(f"{self.name}: residual branches disagree {out} vs {sc}")
        return out

    def trace(self, shape):
        n_in = math.prod(shape)
        out, body_peak = self.body.trace(shape)
        peak = body_peak + n_in
        if self.shortcut:
            _, sc_peak = self.shortcut.trace(shape)
            peak = max(peak, sc_peak + math.prod(out))
        return out, peak

    def depth(self):
        return max(self.body.depth(), self.shortcut.depth() if self.shortcut else 0)

    def forward(self, P, x, cache=True):
        y = self.body.forward(P, x, cache)
        return y + (self.shortcut.forward(P, x, cache) if self.shortcut else x)

    def backward(self, P, dy, grads, wanted):
        dx = self.body.backward(P, dy, grads, wanted)
        return dx + (self.shortcut.backward(P, dy, grads, wanted) if self.shortcut else dy)


class Concat(Layer):
    """Parallel branches joined along the channel axis."""

    def __init__(self, branches: list[Layer], name: str = ""):
        self.branches, self.name = list(branches), name
        self._cache = None

    def children(self):
        return self.branches

    def param_specs(self):
        return [s for b in self.branches for s in b.param_specs()]

    def out_shape(self, shape):
        outs = [b.out_shape(shape) for b in self.branches]
        if len({(o[0],) + tuple(o[2:]) for o in outs}) != 1:
            raise ShapeError(f"{self.name}: branch spatial shapes differ {outs}")
        return (outs[0][0], sum(o[1] for o in outs)) + tuple(outs[0][2:])

    def trace(self, shape):
        n_in = math.prod(shape)
        held, peak = 0, 0
        for b in self.branches:
            out, p = b.trace(shape)
            peak = max(peak, n_in + held + p)
            held += math.prod(out)
        return self.out_shape(shape), max(peak, n_in + 2 * held)

    def depth(self):
        return max(b.depth() for b in self.branches)

    def forward(self, P, x, cache=True):
        outs = [b.forward(P, x, cache) for b in self.branches]
        if cache:
            self._cache = [o.shape[1] for o in outs]
        return np.concatenate(outs, axis=1)

    def backward(self, P, dy, grads, wanted):
        widths = self._take_cache()
        dx = None
        start = 0
        for b, c in zip(self.branches, widths):
            g = b.backward(P, dy[:, start:start + c], grads, wanted)
            dx = g if dx is None else dx + g
            start += c
        return dx
