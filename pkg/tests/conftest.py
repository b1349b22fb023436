import numpy as np
import pytest

from dmh.data import SyntheticSpec, Trial, generate_synthetic


def correlated_trials(strengths, n_trials=3, length=400, seed=0, names=None):
    """Trials whose column m has correlation roughly ``strengths[m]`` with power."""
    rng = np.random.default_rng(seed)
    strengths = np.asarray(strengths, dtype=float)
    names = names or tuple(f"f{m}" for m in range(len(strengths)))
    out = []
    for k in range(n_trials):
        base = rng.standard_normal(length)
        noise = rng.standard_normal((length, len(strengths)))
        feats = strengths * base[:, None] + np.sqrt(1 - strengths**2) * noise
        out.append(Trial(feats, 50.0 + 5.0 * base, names, f"corr_{k}"))
    return out


# 4 weak, 5 middling, 6 strong columns: the 4/5/6 layout of a 15-feature vehicle dataset
BMW_LIKE_STRENGTHS = [0.0] * 4 + [0.12] * 5 + [0.8] * 6


@pytest.fixture
def bmw_like():
    return correlated_trials(BMW_LIKE_STRENGTHS, n_trials=3, length=3000, seed=7)


@pytest.fixture
def small_synthetic():
    return generate_synthetic(SyntheticSpec(n_trials=3, length=80, n_informative=3, n_noise=3, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# filled by tests/test_acceptance.py, echoed after the run so the lines survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
