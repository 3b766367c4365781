import numpy as np
import pytest

from fedspeech.dataset import featurize_manifest
from fedspeech.models import ARCH_NAMES, build_model, default_spec
from fedspeech.synth import SynthCorpusSpec, synth_corpus

SMALL_SPEC = SynthCorpusSpec(n_subjects=10, n_depressed=5, n_high=3, n_male=5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    synth_corpus(SMALL_SPEC, root)
    return root


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return featurize_manifest(small_corpus_dir / "manifest.csv")


@pytest.fixture(scope="session")
def models():
    return {a: build_model(default_spec(a), seed=7) for a in ARCH_NAMES}


@pytest.fixture(scope="session")
def small_embedded(models, small_corpus):
    """mnv2-lite embeddings of the small corpus with depression labels."""
    from fedspeech.nn.network import embed

    fs = small_corpus.features
    x = embed(models["mnv2-lite"], fs.pixels[:, None])
    y = (fs.labels >= 5).astype(np.int64)
    return x, y, list(fs.subject_ids)


ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
