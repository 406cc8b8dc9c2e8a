import numpy as np
import pytest

from patternstd.hmm import GranularityConfig, PatternSet


def random_pattern_set(rng, m, n, l=1, dim=2, spread=1.0):
    weights = rng.dirichlet(np.ones(l), size=(n, m))
    means = rng.normal(0.0, spread, size=(n, m, l, dim))
    variances = rng.uniform(0.3, 1.5, size=(n, m, l, dim))
    self_loop = rng.uniform(0.2, 0.8, size=(n, m))
    return PatternSet(GranularityConfig(m, n, l), weights, means, variances, self_loop,
                      np.full(dim, 1e-3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
