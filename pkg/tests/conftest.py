import numpy as np
import pytest

from attnres.full import PseudoQuery

ACCEPTANCE_LINES: list[str] = []


def random_stack(L: int, d: int, seed: int, zero_queries: bool = False):
    rng = np.random.default_rng(seed)
    Ws = [rng.uniform(-1, 1, (d, d)) / np.sqrt(d) for _ in range(L)]
    bs = [rng.normal(0, 0.3, d) for _ in range(L)]
    layers = [lambda x, W=W, b=b: np.tanh(W @ x + b) for W, b in zip(Ws, bs)]
    if zero_queries:
        queries = [PseudoQuery.zeros(d) for _ in range(L + 1)]
    else:
        queries = [PseudoQuery(rng.normal(size=d), 1 + rng.uniform(-0.3, 0.3, d)) for _ in range(L + 1)]
    return layers, rng.normal(size=d), queries


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
