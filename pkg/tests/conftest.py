import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sinktrack import CANONICAL_CONFIG, CANONICAL_SEED, ModelConfig, make_toy_model
from sinktrack.model import LayerWeights, ModelWeights

GOLDEN = Path(__file__).parent / "golden"

ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def canonical():
    return make_toy_model(CANONICAL_CONFIG, CANONICAL_SEED)


@pytest.fixture(scope="session")
def twelve_layer():
    cfg = ModelConfig(n_layers=12, d_model=16, n_heads=2, d_ff=32, vocab_size=32)
    return make_toy_model(cfg, 7)


def identity_model(d=4, n_heads=2, n_layers=1, vocab=8, d_ff=8):
    """Identity attention projections, zero FFN, unit LayerNorm."""
    cfg = ModelConfig(n_layers=n_layers, d_model=d, n_heads=n_heads, d_ff=d_ff, vocab_size=vocab)
    rng = np.random.default_rng(0)
    eye = np.eye(d, dtype=np.float32)
    layers = [
        LayerWeights(
            wq=eye, wk=eye, wv=eye, wo=eye,
            w1=np.zeros((d, d_ff), np.float32), b1=np.zeros(d_ff, np.float32),
            w2=np.zeros((d_ff, d), np.float32), b2=np.zeros(d, np.float32),
            ln1_gain=np.ones(d, np.float32), ln1_bias=np.zeros(d, np.float32),
            ln2_gain=np.ones(d, np.float32), ln2_bias=np.zeros(d, np.float32),
        )
        for _ in range(n_layers)
    ]
    emb = rng.standard_normal((vocab, d)).astype(np.float32)
    unemb = rng.standard_normal((d, vocab)).astype(np.float32)
    return ModelWeights(cfg, emb, unemb, tuple(layers))


def random_config(rng, max_layers=6):
    n_heads = int(rng.integers(1, 5))
    d_head = int(rng.choice([2, 4, 8]))
    return ModelConfig(
        n_layers=int(rng.integers(1, max_layers + 1)),
        d_model=n_heads * d_head,
        n_heads=n_heads,
        d_ff=int(rng.choice([8, 16, 32])),
        vocab_size=int(rng.integers(8, 48)),
        max_seq=32,
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    status = "PASS" if report.passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:>2}: {title} ({report.duration:.2f}s)"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
