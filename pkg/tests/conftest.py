import numpy as np
import pytest

from cofkey.audio_io import load_audio
from cofkey.data import SynthSpec, synthesize_corpus
from cofkey.frontend import AudioClip, CqtParams, compute_cqt

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cqt_params():
    return CqtParams()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Eight short tracks for fast pipeline tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(n_tracks=8, duration=6.0, seed=5)
    manifest = synthesize_corpus(spec, out)
    return out, manifest


@pytest.fixture(scope="session")
def holdout240(tmp_path_factory):
    """The 240-track held-out evaluation corpus used by the acceptance gates."""
    out = tmp_path_factory.mktemp("holdout240")
    spec = SynthSpec(n_tracks=240, duration=10.0, seed=777, split="test")
    manifest = synthesize_corpus(spec, out)
    return out, manifest


@pytest.fixture(scope="session")
def holdout240_cqts(holdout240, cqt_params):
    root, manifest = holdout240
    cqts = []
    for e in manifest.entries:
        samples, sr = load_audio(root / e.path, target_sr=cqt_params.sample_rate)
        cqts.append(compute_cqt(AudioClip(samples, sr), cqt_params))
    return cqts
