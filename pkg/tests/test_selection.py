from types import SimpleNamespace

import numpy as np
import pytest

import qmhmm.selection as selection
from qmhmm.criteria import aic, bic, n_free_params
from qmhmm.em import FitConfig, FitFailure
from qmhmm.selection import GRID_COLUMNS, grid_search, read_grid_csv
from qmhmm.data import LongitudinalDataset, Subject
from qmhmm.mal import MALParams, QuantileSpec, mal_sample
from qmhmm.simulation import TRUE_ALPHA, TRUE_BETA, ScenarioConfig, generate_dataset


@pytest.mark.parametrize("G,M,expected", [(3, 5, 69), (5, 4, 64), (5, 3, 55)])
def test_free_parameter_counts(G, M, expected):
    assert n_free_params(p=2, k=12, k_z=1, k_w=1, G=G, M=M) == expected


def test_count_formula_terms():
    assert n_free_params(1, 0, 0, 0, 1, 1) == 1
    assert n_free_params(3, 2, 1, 2, 4, 3) == 6 + 18 + 12 + 3 + 2 + 6 + 3 + 3


@pytest.mark.parametrize("args", [(0, 1, 1, 1, 1, 1), (2, 1, 1, 1, 0, 1), (2, 1, 1, 1, 1, 0), (2, -1, 0, 0, 1, 1)])
def test_count_rejects_bad_dimensions(args):
    with pytest.raises(ValueError):
        n_free_params(*args)


def test_criteria():
    assert bic(-100.0, 10, 50) == pytest.approx(200 + 10 * np.log(50))
    assert aic(-100.0, 10) == 220.0


@pytest.fixture(scope="module")
def small_data():
    cfg = ScenarioConfig(N=40, T=4)
    return generate_dataset(cfg, 0)[0], cfg.spec


def test_single_cell(small_data, tmp_path):
    ds, spec = small_data
    grid = grid_search(ds, spec, [2], [2], FitConfig(n_starts=2))
    assert grid.best_bic == grid.best_aic == (2, 2)
    res = grid.best
    assert res.bic == -2 * res.loglik + np.log(ds.N) * res.n_free_params
    assert res.aic == -2 * res.loglik + 2 * res.n_free_params
    grid.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == ",".join(GRID_COLUMNS) and len(lines) == 2
    rows = read_grid_csv(tmp_path / "g.csv")
    assert rows == grid.rows()


def test_cells_are_independent(small_data):
    ds, spec = small_data
    config = FitConfig(n_starts=2)
    alone = grid_search(ds, spec, [2], [2], config).get(2, 2)
    grid = grid_search(ds, spec, [1, 2], [1, 2], config)
    np.testing.assert_array_equal(grid.get(2, 2).params.to_vector(), alone.params.to_vector())
    assert len(grid.entries) == 4
    best = min((r for _, _, r in grid.entries if r.retained), key=lambda r: r.bic)
    assert grid.get(*grid.best_bic) is best


def _fake(bic_value, aic_value, retained=True):
    return SimpleNamespace(bic=bic_value, aic=aic_value, retained=retained)


def test_ties_prefer_smaller_m_then_g():
    entries = [(3, 1, _fake(10.0, 5.0)), (1, 2, _fake(10.0, 5.0)), (2, 1, _fake(10.0, 5.0))]
    assert selection._argmin(entries, "bic") == ((2, 1), True)


def test_unretained_cells_are_skipped_unless_all_are():
    entries = [(1, 1, _fake(50.0, 40.0)), (2, 2, _fake(10.0, 5.0, retained=False)), (3, 3, None)]
    assert selection._argmin(entries, "bic") == ((1, 1), True)
    entries = [(1, 1, _fake(50.0, 40.0, False)), (2, 2, _fake(10.0, 5.0, False))]
    assert selection._argmin(entries, "bic") == ((2, 2), False)


def test_errors(small_data, monkeypatch):
    ds, spec = small_data
    with pytest.raises(ValueError):
        grid_search(ds, spec, [], [1])

    def boom(*a, **k):
        raise FitFailure("nope")

    monkeypatch.setattr(selection, "fit", boom)
    with pytest.raises(FitFailure):
        grid_search(ds, spec, [1, 2], [1])


def _single_state_panel(rep, N=60, T=5):
    # generated from the model family itself: MAL errors, two slope clusters, no switching
    spec = QuantileSpec([0.5, 0.5])
    rng = np.random.default_rng(rep)
    x = np.stack([rng.standard_normal((N, T)), rng.binomial(1, 0.5, (N, T))], -1).astype(float)
    b = np.array([[1.0, 0.5], [-1.0, -0.5]])[rng.integers(0, 2, N)]
    eps = mal_sample(MALParams([0, 0], [0.5, 0.5], [[1, 0.3], [0.3, 1]]), spec, N * T, seed=100 + rep)
    y = x @ TRUE_BETA + x[..., :1] * b[:, None, :] + TRUE_ALPHA[0] + eps.reshape(N, T, 2)
    subjects = [Subject(f"s{i}", y[i], x[i]) for i in range(N)]
    return LongitudinalDataset(subjects, z_cols=[0], w_intercept=True), spec


def test_single_regime_data_prefers_fewest_states():
    picks = []
    for rep in range(3):
        ds, spec = _single_state_panel(rep)
        grid = grid_search(ds, spec, [2], [1, 2], FitConfig(n_starts=2))
        picks.append(grid.best_bic[1])
    assert picks.count(1) >= 2
