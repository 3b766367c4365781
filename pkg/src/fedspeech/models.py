"""Three desk-scale CNN families (residual, multi-branch, depthwise-separable)
with a frozen backbone and a two-layer trainable head.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FRAME_SIZE, FeatureFrame, window_to_pixels
from .nn.layers import Affine, AvgPool2d, Concat, Conv2d, Dense, Flatten, Layer, ReLU, Residual, Sequential
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.network import MatchUnit, Model, embed, init_params, predict_logits
from .nn.params import ParamSet

ARCH_NAMES = ("rn18-lite", "gn-lite", "mnv2-lite")
FREEZE_BACKBONE = "freeze_backbone"
FULL_FINETUNE = "full_finetune"


class ArchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem: int
    widths: tuple[int, ...]
    hidden: int
    num_classes: int = 2
    param_budget: int = 0
    budget_tolerance: float = 0.2
    input_size: int = FRAME_SIZE

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw.pop(f.name)
            if f.name == "name":
                kw[f.name] = v
            elif f.name == "widths":
                kw[f.name] = tuple(int(x) for x in v.split(",") if x.strip())
            elif f.name == "budget_tolerance":
                kw[f.name] = float(v)
            else:
                kw[f.name] = int(v)
        if raw:
            raise ArchConfigError(f"unknown architecture keys: {sorted(raw)}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "ArchSpec":
        return cls.from_text(Path(path).read_text())


# Widths target roughly 1/50 of the 11.7M / 7M / 3.4M parameter counts.
DEFAULT_SPECS = {
    "rn18-lite": ArchSpec("rn18-lite", stem=8, widths=(16, 32, 48, 52), hidden=64, param_budget=234_000),
    "gn-lite": ArchSpec("gn-lite", stem=12, widths=(48, 80, 96), hidden=48, param_budget=140_000),
    "mnv2-lite": ArchSpec("mnv2-lite", stem=8, widths=(12, 16, 24, 32, 48, 64, 80), hidden=32,
                          param_budget=68_000),
}


def default_spec(name: str, **overrides) -> ArchSpec:
    if name not in DEFAULT_SPECS:
        raise ArchConfigError(f"unknown architecture {name!r}; choose from {ARCH_NAMES}")
    spec = DEFAULT_SPECS[name]
    if overrides:
        spec = ArchSpec(**{**{f.name: getattr(spec, f.name) for f in fields(spec)}, **overrides})
    return spec


# ---------------------------------------------------------------------------
# Graph construction

def _conv_bn(name, cin, cout, k, stride=1, groups=1, relu: float | bool = True) -> list[Layer]:
    layers: list[Layer] = [Conv2d(name, cin, cout, k, stride, k // 2, groups=groups, bias=False),
                           Affine(name + "_bn", cout)]
    if relu is not False:
        layers.append(ReLU(None if relu is True else relu))
    return layers


def _stem(spec: ArchSpec, extra: bool = False) -> tuple[list[Layer], list[MatchUnit], int]:
    # 224 -> 56 patchify, then 56 -> 28 pooling
    layers = [Conv2d("stem", 1, spec.stem, 4, 4, 0, bias=False), Affine("stem_bn", spec.stem), ReLU()]
    units = []
    c = spec.stem
    if extra:
        layers += _conv_bn("stem2", c, c, 1) + _conv_bn("stem3", c, 2 * c, 3)
        units.append(MatchUnit("stem2.w", ("stem2_bn.scale", "stem2_bn.shift"), ("stem3.w",)))
        c = 2 * c
    layers.append(AvgPool2d(2, 2))
    return layers, units, c


def _resnet(spec: ArchSpec):
    if len(spec.widths) != 4:
        raise ArchConfigError("rn18-lite needs four stage widths")
    layers, units, c = _stem(spec)
    strides = (1, 2, 2, 1)
    for s, (w, stride) in enumerate(zip(spec.widths, strides)):
        for b in range(2):
            st = stride if b == 0 else 1
            p = f"s{s}b{b}"
            body = Sequential(_conv_bn(p + "c1", c, w, 3, st) + _conv_bn(p + "c2", w, w, 3, relu=False))
            short = None
            if st != 1 or c != w:
                short = Sequential([Conv2d(p + "sc", c, w, 1, st, 0, bias=False), Affine(p + "sc_bn", w)])
            layers += [Residual(body, short, name=p), ReLU()]
            units.append(MatchUnit(p + "c1.w", (p + "c1_bn.scale", p + "c1_bn.shift"), (p + "c2.w",)))
            c = w
    return layers, units, c


def _inception(p: str, cin: int, w: int) -> tuple[Layer, list[MatchUnit], int]:
    # four branches: 1x1 | 1x1->3x3 | 1x1->5x5 | 1x1, output 4 * (w // 4) channels
    q = w // 4
    r = max(q // 2, 4)
    branches = [
        Sequential(_conv_bn(p + "a", cin, q, 1)),
        Sequential(_conv_bn(p + "b1", cin, r, 1) + _conv_bn(p + "b2", r, q, 3)),
        Sequential(_conv_bn(p + "c1", cin, r, 1) + _conv_bn(p + "c2", r, q, 5)),
        Sequential(_conv_bn(p + "d", cin, q, 1)),
    ]
    units = [MatchUnit(p + "b1.w", (p + "b1_bn.scale", p + "b1_bn.shift"), (p + "b2.w",)),
             MatchUnit(p + "c1.w", (p + "c1_bn.scale", p + "c1_bn.shift"), (p + "c2.w",))]
    return Concat(branches, name=p), units, 4 * q


def _googlenet(spec: ArchSpec):
    if len(spec.widths) != 3:
        raise ArchConfigError("gn-lite needs three stage widths")
    layers, units, c = _stem(spec, extra=True)
    blocks_per_stage = (2, 5, 2)
    for s, (w, n) in enumerate(zip(spec.widths, blocks_per_stage)):
        if s > 0:
            layers.append(AvgPool2d(2, 2))
        for b in range(n):
            block, u, c = _inception(f"i{s}{b}", c, w)
            layers.append(block)
            units += u
    return layers, units, c


def _mobilenet(spec: ArchSpec):
    if len(spec.widths) != 7:
        raise ArchConfigError("mnv2-lite needs seven widths (six blocks + final 1x1)")
    layers, units, c = _stem(spec)
    strides = (1, 2, 1, 2, 1, 1)
    expand = 4
    for b, (w, stride) in enumerate(zip(spec.widths[:6], strides)):
        p = f"ir{b}"
        e = c * expand
        body = Sequential(_conv_bn(p + "x", c, e, 1, relu=6.0) + _conv_bn(p + "d", e, e, 3, stride, groups=e, relu=6.0)
                          + _conv_bn(p + "p", e, w, 1, relu=False))
        layers.append(Residual(body, name=p) if stride == 1 and c == w else body)
        units.append(MatchUnit(p + "x.w", (p + "x_bn.scale", p + "x_bn.shift", p + "d.w",
                                           p + "d_bn.scale", p + "d_bn.shift"), (p + "p.w",)))
        c = w
    layers += _conv_bn("final", c, spec.widths[6], 1, relu=6.0)
    return layers, units, spec.widths[6]


_BUILDERS = {"rn18-lite": _resnet, "gn-lite": _googlenet, "mnv2-lite": _mobilenet}


def build_graph(spec: ArchSpec):
    if spec.name not in _BUILDERS:
        raise ArchConfigError(f"unknown architecture {spec.name!r}")
    if spec.input_size % 56:
        raise ArchConfigError("input size must be a multiple of 56")
    layers, units, c = _BUILDERS[spec.name](spec)
    # keep the frequency axis, average over time
    layers += [AvgPool2d(1, None), Affine("embed_norm", c), Flatten()]
    backbone = Sequential(layers, name="backbone")
    feat = backbone.out_shape((1, 1, spec.input_size, spec.input_size))[1]
    head = Sequential([Dense("fc1", feat, spec.hidden), ReLU(), Dense("fc2", spec.hidden, spec.num_classes)],
                      name="head")
    units.append(MatchUnit("fc1.w", ("fc1.b",), ("fc2.w",)))
    return backbone, head, units


def calibration_frames(n: int, rng: np.random.Generator, size: int = FRAME_SIZE, rate: int = 16000) -> np.ndarray:
    """Random multi-tone plus noise frames used to fold activation statistics into the affine layers."""
    t = np.arange(rate) / rate
    out = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        x = rng.normal(0, 0.01 * rng.uniform(0.2, 1.0), rate)
        for _ in range(int(rng.integers(1, 6))):
            x += rng.uniform(0.05, 0.3) * np.sin(2 * np.pi * rng.uniform(80, 7500) * t + rng.uniform(0, 6.3))
        out[i, 0] = window_to_pixels(x)
    return out


def _calibrate(backbone: Sequential, params, batch: np.ndarray, only: Sequence[Affine] | None = None) -> None:
    """Set every affine layer so its output is zero-mean, unit-variance per channel on ``batch``."""
    affines = [l for l in backbone.walk() if isinstance(l, Affine)] if only is None else list(only)
    for target in affines:
        captured = {}
        original = target.forward

        def hook(P, x, cache=True, _orig=original):
            captured["x"] = x
            return _orig(P, x, cache)

        target.forward = hook
        try:
            P = {p.name: p.value for p in params}
            backbone.forward(P, batch, cache=False)
        finally:
            del target.forward
        x = captured["x"].astype(np.float64)
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes)
        sd = np.sqrt(x.var(axis=axes) + 1e-5)
        dtype = params[target.name + ".scale"].dtype
        params[target.name + ".scale"] = (1.0 / sd).astype(dtype)
        params[target.name + ".shift"] = (-mean / sd).astype(dtype)


def build_model(spec: ArchSpec, seed: int = 0, calibrate: int = 16, check_budget: bool = True) -> Model:
    """Seeded construction; backbone frozen, head trainable."""
    backbone, head, units = build_graph(spec)
    rng = np.random.default_rng(seed)
    params = init_params(Sequential([backbone, head]), rng)
    head_names = frozenset(n for n, *_ in head.param_specs())
    model = Model(spec.name, backbone, head, params, (1, spec.input_size, spec.input_size), spec.num_classes,
                  units, head_names)
    if check_budget and spec.param_budget:
        n = params.count()
        lo, hi = spec.param_budget * (1 - spec.budget_tolerance), spec.param_budget * (1 + spec.budget_tolerance)
        if not lo <= n <= hi:
            raise ArchConfigError(f"{spec.name}: {n} parameters outside budget [{lo:.0f}, {hi:.0f}]")
    if calibrate:
        _calibrate(backbone, params, calibration_frames(calibrate, rng, spec.input_size))
    set_transfer_mode(model, FREEZE_BACKBONE)
    return model


def set_transfer_mode(model: Model, mode: str) -> Model:
    if mode not in (FREEZE_BACKBONE, FULL_FINETUNE):
        raise ValueError(f"unknown transfer mode {mode!r}")
    for name in model.params.names():
        model.params.set_trainable(name, mode == FULL_FINETUNE or name in model.head_names)
    return model


def clone_model(model: Model) -> Model:
    """Independent copy (graph and tensors) safe to train elsewhere."""
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# Backbone pretraining

@dataclass(frozen=True)
class PretrainConfig:
    n_frames: int = 800
    epochs: int = 4
    lr: float = 0.003
    batch_size: int = 16


def pretrain_backbone(model: Model, cfg: PretrainConfig = PretrainConfig(), seed: int = 0) -> list[float]:
    """Fine-tune the whole backbone on the band-localization pretext task, then freeze it.

    A throwaway linear head is attached for the pretext labels. The embedding
    normalization is re-fitted on pretext frames afterwards so the transfer head sees
    standardized features. Returns the per-epoch pretext training loss.
    """
    from .synth import PRETEXT_BANDS, pretext_frames
    from .training import TrainConfig, train_epoch

    rng = np.random.default_rng([seed, 0x5EED])
    n_cls = len(PRETEXT_BANDS)
    head = Sequential([Dense("pretext_fc", int(np.prod(model.embedding_shape())), n_cls)], name="pretext")
    head_params = init_params(head, rng)
    joint = ParamSet([p for p in model.params if p.name not in model.head_names] + list(head_params))
    for name in joint.names():
        joint.set_trainable(name, not name.startswith("embed_norm"))
    pm = Model(model.name + "-pretext", model.backbone, head, joint, model.input_shape, n_cls, [],
               frozenset(head_params.names()))
    x, y = pretext_frames(cfg.n_frames, rng)
    tcfg = TrainConfig(base_lr=cfg.lr, batch_size=cfg.batch_size, step=10 ** 9)
    opt = tcfg.new_state()
    losses = []
    for epoch in range(cfg.epochs):
        opt.epoch = epoch
        losses.append(train_epoch(pm, x, y, opt, tcfg, rng, head_only=False))
    for p in joint:
        if p.name in model.params:
            model.params[p.name] = p.value
    norm = [l for l in model.backbone.walk() if isinstance(l, Affine) and l.name == "embed_norm"]
    _calibrate(model.backbone, model.params, x[:64], only=norm)
    set_transfer_mode(model, FREEZE_BACKBONE)
    return losses


def pretrained_model(spec: ArchSpec, seed: int = 0, cache_dir: str | Path | None = None,
                     cfg: PretrainConfig = PretrainConfig()) -> Model:
    """``build_model`` + ``pretrain_backbone``, memoized as a checkpoint under ``cache_dir``."""
    model = build_model(spec, seed)
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(f"{spec.to_text()}|{seed}|{cfg}".encode()).hexdigest()[:16]
        path = Path(cache_dir) / f"{spec.name}-{key}.fvx"
        if path.exists():
            params, _ = load_checkpoint(path.read_bytes(), expect=model.params)
            model.params = params
            set_transfer_mode(model, FREEZE_BACKBONE)
            return model
    pretrain_backbone(model, cfg, seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(save_checkpoint(model.params))
        tmp.replace(path)
    return model


# ---------------------------------------------------------------------------
# Clip prediction

@dataclass(frozen=True)
class ClipPrediction:
    votes: tuple[int, ...]
    counts: tuple[int, ...]
    label: int
    tie_rule: str = "lowest-class"


def majority_vote(votes: Sequence[int], num_classes: int = 2) -> ClipPrediction:
    if len(votes) == 0:
        raise ValueError("cannot vote over zero frames")
    counts = np.bincount(np.asarray(votes, dtype=np.int64), minlength=num_classes)
    # argmax returns the first maximum, i.e. ties go to the lower class index
    return ClipPrediction(tuple(int(v) for v in votes), tuple(int(c) for c in counts), int(np.argmax(counts)))


def frame_votes_from_logits(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)


def predict_clip(model: Model, frames: Sequence[FeatureFrame] | np.ndarray) -> ClipPrediction:
    if len(frames) == 0:
        raise ValueError("predict_clip needs at least one frame")
    if isinstance(frames, np.ndarray):
        batch = frames if frames.ndim == 4 else frames[:, None]
    else:
        batch = np.stack([f.pixels for f in frames])[:, None].astype(np.float32)
    logits = predict_logits(model, batch)
    return majority_vote(frame_votes_from_logits(logits), model.num_classes)


def model_summary(model: Model) -> dict:
    return {
        "name": model.name,
        "params": model.param_count(),
        "depth": model.depth(),
        "trainable": sum(model.params[n].size for n in model.params.trainable_names()),
        "embedding": int(np.prod(model.embedding_shape())),
    }
