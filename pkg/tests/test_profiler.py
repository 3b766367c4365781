import json

import numpy as np
import pytest

from fedspeech.models import ClipPrediction, majority_vote
from fedspeech.nn.layers import Dense, Flatten, Sequential
from fedspeech.nn.network import Model, init_params
from fedspeech.profiler import (BYTES_PER_PARAM, CascadeDecision, bench_inference, cascade_infer, latency_scaling,
                                param_bytes, write_bench_report)


def _dense_model(n_in, n_out, bias=True):
    head = Sequential([Dense("fc", n_in, n_out, bias=bias)])
    return Model("dense", Sequential([Flatten()]), head, init_params(head, np.random.default_rng(0)), (1, 1, n_in),
                 n_out)


def test_param_bytes_times_four_law(models):
    m = _dense_model(100, 680, bias=False)
    assert m.param_count() == 68_000 and param_bytes(m) == 272_000
    for model in models.values():
        assert param_bytes(model) == sum(int(np.prod(p.value.shape)) for p in model.params) * BYTES_PER_PARAM
    assert param_bytes(models["mnv2-lite"]) < param_bytes(models["rn18-lite"])


def test_bench_order_statistics(models, small_corpus, tmp_path):
    frames = small_corpus.features.pixels[:6]
    r = bench_inference(models["mnv2-lite"], frames, warmup=1, reps=2)
    assert r.frames == 6 and r.reps == 2
    assert r.p95_ms >= r.median_ms > 0 and r.mean_ms > 0
    assert r.peak_activation_bytes > 0 and r.memory_bytes == r.param_bytes + r.peak_activation_bytes
    assert r.throughput_fps == pytest.approx(1000.0 / r.mean_ms)
    write_bench_report([r], tmp_path / "bench.json")
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert doc["models"][0]["param_bytes"] == r.param_bytes and doc["machine_relative"] is True


def test_bench_rejects_bad_arguments(models):
    with pytest.raises(ValueError):
        bench_inference(models["mnv2-lite"], np.zeros((0, 224, 224), np.float32))
    with pytest.raises(ValueError):
        bench_inference(models["mnv2-lite"], np.zeros((1, 224, 224), np.float32), warmup=0)


def test_latency_scales_linearly(rng):
    m = _dense_model(4096, 512)
    frames = rng.normal(size=(16, 1, 1, 4096)).astype(np.float32)
    totals, r2 = latency_scaling(m, frames, [10, 100, 250, 500, 1000])
    assert len(totals) == 5 and r2 > 0.95


class _Counter:
    def __init__(self, label):
        self.label, self.calls = label, 0

    def __call__(self, frames):
        self.calls += 1
        return majority_vote([self.label] * len(frames))


def test_cascade_positive_path():
    sev = _Counter(1)
    d = cascade_infer(_Counter(1), _Counter(1), sev, np.zeros((3, 1, 4, 4)))
    assert d.depression and d.severity == "high" and sev.calls == 1
    assert d.votes["severity"] == [0, 3]


def test_cascade_negative_never_consults_severity():
    for a, b in ((1, 0), (0, 1), (0, 0)):
        sev = _Counter(1)
        d = cascade_infer(_Counter(a), _Counter(b), sev, np.zeros((3, 1, 4, 4)))
        assert not d.depression and d.severity is None and sev.calls == 0


def test_cascade_with_models_is_order_invariant(models, small_corpus, rng):
    frames = small_corpus.features.pixels[:9][:, None]
    m = models["mnv2-lite"]
    a = cascade_infer(m, m, m, frames)
    b = cascade_infer(m, m, m, frames[rng.permutation(9)])
    assert (a.depression, a.severity) == (b.depression, b.severity)
    with pytest.raises(ValueError):
        cascade_infer(m, m, m, frames[:0])


def test_cascade_decision_invariant():
    with pytest.raises(ValueError):
        CascadeDecision(False, "high", {})
    with pytest.raises(ValueError):
        CascadeDecision(True, None, {})
