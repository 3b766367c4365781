"""Per-frame inference latency, analytic memory, and the two-stage screening cascade."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .models import ClipPrediction, predict_clip
from .nn.network import Model, forward

BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class BenchResult:
    model: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    param_bytes: int
    peak_activation_bytes: int
    frames: int
    reps: int

    @property
    def memory_bytes(self) -> int:
        return self.param_bytes + self.peak_activation_bytes

    @property
    def throughput_fps(self) -> float:
        """Frames per second; reported as the stand-in for energy per frame."""
        return 1000.0 / self.mean_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory_bytes"] = self.memory_bytes
        d["throughput_fps"] = self.throughput_fps
        return d


def param_bytes(model: Model) -> int:
    return sum(int(np.prod(p.value.shape)) for p in model.params) * BYTES_PER_PARAM


def bench_inference(model: Model, frames: np.ndarray, warmup: int = 2, reps: int = 1) -> BenchResult:
    """Time single-frame forward passes over ``frames`` (N, H, W) or (N, 1, H, W).

    ``reps`` passes are made over the frame set after ``warmup`` untimed
    passes on the first frame. Memory is analytic: parameters plus the peak
    live activation footprint of one batch-1 pass, both as float32.
    """
    if len(frames) == 0:
        raise ValueError("bench_inference needs at least one frame")
    if warmup < 1 or reps < 1:
        raise ValueError("warmup and reps must be >= 1")
    batch = frames if frames.ndim == 4 else frames[:, None]
    batch = batch.astype(np.float32, copy=False)
    for _ in range(warmup):
        forward(model, batch[:1], cache=False)
    times = []
    for _ in range(reps):
        for i in range(len(batch)):
            t0 = time.perf_counter()
            forward(model, batch[i:i + 1], cache=False)
            times.append((time.perf_counter() - t0) * 1000.0)
    ms = np.asarray(times)
    return BenchResult(model.name, float(ms.mean()), float(np.median(ms)), float(np.percentile(ms, 95)),
                       param_bytes(model), model.peak_activation_elems(1) * BYTES_PER_PARAM, len(batch), reps)


def latency_scaling(model: Model, frames: np.ndarray, counts: Sequence[int]) -> tuple[np.ndarray, float]:
    """Total loop time per frame count and the R^2 of a linear fit through them."""
    batch = frames if frames.ndim == 4 else frames[:, None]
    forward(model, batch[:1], cache=False)
    totals = []
    for n in counts:
        t0 = time.perf_counter()
        for i in range(n):
            forward(model, batch[i % len(batch)][None], cache=False)
        totals.append(time.perf_counter() - t0)
    x = np.asarray(counts, dtype=np.float64)
    y = np.asarray(totals)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return y, r2


def write_bench_report(results: Sequence[BenchResult], path: str | Path, machine: str = "") -> None:
    doc = {"machine_relative": True, "machine": machine, "energy": "not measured; throughput_fps is the proxy",
           "models": [r.to_dict() for r in results]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Cascade

Voter = Union[Model, Callable[[np.ndarray], ClipPrediction]]


def _vote(voter: Voter, frames: np.ndarray) -> ClipPrediction:
    if isinstance(voter, Model):
        return predict_clip(voter, frames)
    return voter(frames)


@dataclass(frozen=True)
class CascadeDecision:
    depression: bool
    severity: str | None
    votes: dict

    def __post_init__(self):
        if (self.severity is not None) != self.depression:
            raise ValueError("severity is reported exactly when depression is detected")


def cascade_infer(combined_model: Voter, gender_model: Voter, severity_model: Voter,
                  frames: np.ndarray) -> CascadeDecision:
    """Stage 1: combined and gender-specific majority votes must both say depressed.
    Stage 2, only then: severity majority vote (1 = high)."""
    if len(frames) == 0:
        raise ValueError("cascade needs at least one frame")
    combined = _vote(combined_model, frames)
    gender = _vote(gender_model, frames)
    votes = {"combined": list(combined.counts), "gender": list(gender.counts)}
    if not (combined.label == 1 and gender.label == 1):
        return CascadeDecision(False, None, votes)
    severity = _vote(severity_model, frames)
    votes["severity"] = list(severity.counts)
    return CascadeDecision(True, "high" if severity.label == 1 else "low", votes)
