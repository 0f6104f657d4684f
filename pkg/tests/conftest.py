import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lowrank_ggn.net import Batch, FeedForwardNet, Layer  # noqa: E402


def random_problem(seed, sizes=(4, 6, 3), activations=("tanh", "identity"),
                   loss="cross_entropy", n=5, bias=True):
    """Random network and batch; biases are randomized too."""
    rng = np.random.default_rng(seed)
    net = FeedForwardNet.init(list(sizes), list(activations), seed=seed, bias=bias)
    if bias:
        net = FeedForwardNet([
            Layer(l.weight, 0.3 * rng.standard_normal(l.out_dim), l.activation)
            for l in net.layers
        ])
    x = rng.standard_normal((n, sizes[0]))
    if loss == "cross_entropy":
        y = rng.integers(0, sizes[-1], n)
    else:
        y = rng.standard_normal((n, sizes[-1]))
    return net, Batch(x, y)


@pytest.fixture
def scalar_problem():
    """f = theta * x with theta = 3, x = 1, y = 0 and square loss."""
    net = FeedForwardNet([Layer([[3.0]], None, "identity")])
    return net, Batch([[1.0]], [[0.0]]), "square"


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
