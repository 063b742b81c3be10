import numpy as np
import pytest

from anchoralign.embedding_io import TokenSequence
from anchoralign.relrep import AnchorSet


def random_sequence(rng, T, D, sample_id=0, grid=None):
    return TokenSequence(rng.standard_normal((T, D)), grid, sample_id)


def random_batch(rng, B, D, max_tokens=6):
    return [random_sequence(rng, int(rng.integers(1, max_tokens + 1)), D, i) for i in range(B)]


def random_anchors(rng, K, D, modality=0):
    return AnchorSet(rng.standard_normal((K, D)), modality)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
