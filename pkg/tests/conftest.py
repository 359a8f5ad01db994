import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from factorvid import numerics as nx  # noqa: E402
from factorvid.model import EVABlockWeights, LGUWeights  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


def t64(arr, requires_grad=False):
    return nx.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def random_block(rng, T, M, dtype=np.float64):
    def m(n):
        return nx.Tensor((rng.standard_normal((n, n)) / np.sqrt(n)).astype(dtype))

    def v(n):
        return nx.Tensor((rng.standard_normal(n) * 0.5 + 1.0).astype(dtype))

    def o(n):
        return nx.Tensor((rng.standard_normal(n) * 0.3).astype(dtype))

    return EVABlockWeights(v(M), o(M), LGUWeights(m(M), m(M), m(M), m(M)),
                           v(T), o(T), LGUWeights(m(T), m(T), m(T), m(T)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
