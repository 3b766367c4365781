import hashlib

import numpy as np
import pytest

from fedspeech.audio import read_manifest
from fedspeech.synth import (PRETEXT_BANDS, SynthCorpusSpec, oracle_accuracy, pretext_frames, stump_accuracy,
                             synth_corpus)
from fedspeech.training import EarlyStopping, TrainConfig, early_stop, evaluate_loss, fit

from conftest import SMALL_SPEC


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- synthetic corpus ----------------------------------------------------

def test_default_spec_shape():
    spec = SynthCorpusSpec()
    assert (spec.n_subjects, spec.n_depressed, spec.n_male, spec.n_high) == (50, 25, 25, 22)
    with pytest.raises(ValueError):
        SynthCorpusSpec(n_depressed=10, n_high=11)


def test_small_corpus_balance(small_corpus_dir):
    rows = read_manifest(small_corpus_dir / "manifest.csv")
    assert len(rows) == 10
    assert sum(r.phq8 >= 5 for r in rows) == 5
    assert sum(r.phq8 >= 10 for r in rows) == 3
    assert sum(r.gender == "M" for r in rows) == 5
    for g in "MF":
        dep = [r.phq8 >= 5 for r in rows if r.gender == g]
        assert abs(2 * sum(dep) - len(dep)) <= 1


def test_synth_is_byte_deterministic(small_corpus_dir, tmp_path):
    synth_corpus(SMALL_SPEC, tmp_path)
    assert _tree_digest(tmp_path) == _tree_digest(small_corpus_dir)


def test_small_corpus_oracle_separates(small_corpus_dir):
    assert oracle_accuracy(small_corpus_dir / "manifest.csv", spec=SMALL_SPEC) >= 0.9


@pytest.mark.slow
def test_default_corpus_balance_and_oracle(tmp_path):
    manifest = synth_corpus(SynthCorpusSpec(), tmp_path)
    rows = read_manifest(manifest)
    assert len(rows) == 50
    assert sum(r.phq8 >= 5 for r in rows) == 25 and sum(r.gender == "M" for r in rows) == 25
    assert sum(r.phq8 >= 10 for r in rows) == 22
    assert oracle_accuracy(manifest) >= 0.9
    assert oracle_accuracy(manifest, threshold=10) >= 0.9


def test_stump_accuracy_examples():
    assert stump_accuracy([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == (1.0, 0.2)
    assert stump_accuracy([1, 1], [0, 1])[0] == 0.5


def test_pretext_frames(rng):
    x, y = pretext_frames(6, rng)
    assert x.shape == (6, 1, 224, 224) and x.dtype == np.float32
    assert set(y.tolist()) <= set(range(len(PRETEXT_BANDS)))


# -- dataset -------------------------------------------------------------

def test_featurized_corpus(small_corpus):
    fs = small_corpus.features
    assert fs.pixels.shape[1:] == (224, 224) and len(fs.pixels) == len(fs.subject_ids)
    assert set(fs.subject_ids) == set(small_corpus.subjects)
    for s, phq in zip(fs.subject_ids, fs.labels):
        assert small_corpus.subjects[s].phq8 == phq
    assert small_corpus.stats.windows == len(fs.pixels)


# -- early stopping and fitting ------------------------------------------

def test_early_stop_examples():
    assert early_stop([1.0, 1.0, 1.0, 1.0], patience=3) == (True, 0)
    assert early_stop([1.0, 1.0, 1.0], patience=3) == (False, 0)
    assert early_stop([1.0, 0.9, 0.95, 0.94, 0.93], patience=3, min_delta=0) == (True, 1)
    assert early_stop([1.0, 0.9, 0.95, 0.94], patience=3, min_delta=0) == (False, 1)


def test_early_stop_never_fires_on_strict_decrease():
    h = list(np.linspace(1.0, 0.1, 25))
    for e in range(1, 26):
        assert early_stop(h[:e], patience=1, min_delta=1e-4) == (False, e - 1)
    with pytest.raises(ValueError):
        early_stop([], 3)


def test_early_stop_min_delta():
    assert early_stop([1.0, 0.99995, 0.9999], patience=2, min_delta=1e-4) == (True, 0)


def test_fit_restores_best_epoch(models, small_embedded):
    x, y, _ = small_embedded
    model = models["mnv2-lite"].with_params(models["mnv2-lite"].params.copy())
    res = fit(model, x[::2], y[::2], x[1::2], y[1::2], TrainConfig(batch_size=16),
              EarlyStopping(patience=2, max_epochs=6), seed=1)
    assert res.epochs_run <= 6 and len(res.val_losses) == res.epochs_run
    assert res.val_losses[res.best_epoch] <= min(res.val_losses) + 1e-4
    best = evaluate_loss(model, x[1::2], y[1::2], head_only=True)
    assert best == pytest.approx(res.val_losses[res.best_epoch], rel=1e-5)
    assert res.val_losses[-1] < res.val_losses[0] or res.early_stopped


def test_fit_is_deterministic(models, small_embedded):
    x, y, _ = small_embedded
    runs = []
    for _ in range(2):
        m = models["mnv2-lite"].with_params(models["mnv2-lite"].params.copy())
        runs.append(fit(m, x[::2], y[::2], x[1::2], y[1::2], stopping=EarlyStopping(max_epochs=3), seed=9))
    assert runs[0].params.equal(runs[1].params) and runs[0].val_losses == runs[1].val_losses
