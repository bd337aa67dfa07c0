import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qmhmm.data import LongitudinalDataset, QMHMMParams, Subject  # noqa: E402
from qmhmm.mal import QuantileSpec  # noqa: E402


def random_dataset(rng, N=4, T_max=4, p=2, k=2, ragged=True, z_cols=(0,), w_intercept=True):
    subjects = []
    for i in range(N):
        T = int(rng.integers(1, T_max + 1)) if ragged else T_max
        x = rng.normal(size=(T, k))
        y = rng.normal(size=(T, p)) * 2
        subjects.append(Subject(f"s{i}", y, x))
    return LongitudinalDataset(subjects, z_cols=z_cols, w_intercept=w_intercept)


def random_corr(rng, p):
    a = rng.normal(size=(p, p + 2))
    s = a @ a.T
    sd = np.sqrt(np.diag(s))
    return s / sd[:, None] / sd[None, :]


def random_params(rng, ds, G, M, tau):
    spec = QuantileSpec(tau)
    p = spec.p
    Q = rng.dirichlet(np.ones(M) * 2, size=M)
    return QMHMMParams(
        beta=rng.normal(size=(ds.k, p)), b=rng.normal(size=(G, ds.k_z, p)),
        pi=rng.dirichlet(np.ones(G) * 2), alpha=rng.normal(size=(M, ds.k_w, p)),
        q=rng.dirichlet(np.ones(M) * 2), Q=Q, d=rng.uniform(0.5, 2.0, size=p),
        psi=random_corr(rng, p), spec=spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one verdict line per acceptance criterion, shown after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
