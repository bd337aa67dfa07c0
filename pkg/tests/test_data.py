import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dataset, random_params
from qmhmm.data import (DataFormatError, LongitudinalDataset, QMHMMParams, Subject, center, location,
                        locations, read_long_csv, validate, write_long_csv)
from qmhmm.mal import QuantileSpec
from qmhmm.simulation import TRUE_ALPHA, TRUE_BETA


def _valid(rng, G=2, M=3, k=2):
    ds = random_dataset(rng, N=3, T_max=3, k=k)
    return ds, center(random_params(rng, ds, G, M, [0.3, 0.6]), ds)


class TestDataset:
    def test_dimensions(self, rng):
        ds = random_dataset(rng, N=5, T_max=4, p=2, k=3)
        assert (ds.N, ds.p, ds.k, ds.k_z, ds.k_w) == (5, 2, 3, 1, 1)
        assert ds.n_obs == ds.lengths.sum()
        pan = ds.panel
        assert pan.y.shape == (5, ds.lengths.max(), 2)
        assert pan.mask.sum() == ds.n_obs
        assert np.all(pan.w[~pan.mask] == 0)

    def test_design_intercept_first(self):
        ds = LongitudinalDataset([Subject("a", [[1.0]], [[2.0, 3.0]])], z_cols=[1], w_cols=[0],
                                 w_intercept=True)
        np.testing.assert_array_equal(ds.design_w(np.array([2.0, 3.0])), [1.0, 2.0])
        np.testing.assert_array_equal(ds.design_z(np.array([2.0, 3.0])), [3.0])
        assert ds.w_names() == ["(intercept)", "x1"]

    def test_one_dimensional_response(self):
        s = Subject("a", [1.0, 2.0, 3.0], [[1.0], [1.0], [1.0]])
        assert s.y.shape == (3, 1) and s.T == 3

    @pytest.mark.parametrize("bad", ["empty", "dims", "nan", "column", "intercept"])
    def test_rejects_invalid(self, bad):
        good = Subject("a", np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            if bad == "empty":
                LongitudinalDataset([])
            elif bad == "dims":
                LongitudinalDataset([good, Subject("b", np.ones((2, 3)), np.ones((2, 2)))])
            elif bad == "nan":
                LongitudinalDataset([Subject("b", [[np.nan, 1.0]], [[1.0, 2.0]])])
            elif bad == "column":
                LongitudinalDataset([good], z_cols=[5])
            else:
                LongitudinalDataset([Subject("b", [[1.0, 1.0]], [[0.5, 2.0]])], z_intercept=True)

    def test_subset_keeps_whole_subjects(self, rng):
        ds = random_dataset(rng, N=4, T_max=5)
        sub = ds.subset([2, 2, 0])
        assert [s.id for s in sub.subjects] == ["s2", "s2", "s0"]
        np.testing.assert_array_equal(sub.subjects[0].y, ds.subjects[2].y)
        assert sub.z_cols == ds.z_cols and sub.w_intercept == ds.w_intercept


class TestLocation:
    def test_zero_parameters(self, rng):
        ds = random_dataset(rng)
        params = random_params(rng, ds, 2, 2, [0.5, 0.5])
        params.beta[:] = 0
        params.b[:] = 0
        params.alpha[:] = 0
        assert np.all(location(params, ds, 0, 0, 1, 1) == 0)

    def test_intercept_only(self):
        ds = LongitudinalDataset([Subject("a", [[0.0, 0.0]], [[1.0]])])
        params = QMHMMParams(beta=[[1.5, -2.0]], b=np.zeros((1, 0, 2)), pi=[1], alpha=np.zeros((1, 0, 2)),
                             q=[1], Q=[[1]], d=[1, 1], psi=np.eye(2), spec=QuantileSpec([0.5, 0.5]))
        np.testing.assert_allclose(location(params, ds, 0, 0, 0, 0), [1.5, -2.0])

    def test_benchmark_design(self):
        x = np.array([0.7, 1.0])
        ds = LongitudinalDataset([Subject("a", [[0.0, 0.0]], [x])], z_cols=[0], w_intercept=True)
        b = np.array([[[0.3, -0.1]], [[-0.3, 0.1]]])
        params = QMHMMParams(beta=TRUE_BETA, b=b, pi=[0.5, 0.5], alpha=TRUE_ALPHA[:, None, :],
                             q=[0.7, 0.3], Q=[[0.8, 0.2], [0.2, 0.8]], d=[1, 1], psi=np.eye(2),
                             spec=QuantileSpec([0.5, 0.5]))
        expect = x @ TRUE_BETA + x[0] * b[0, 0] + TRUE_ALPHA[0]
        np.testing.assert_allclose(location(params, ds, 0, 0, 0, 0), expect)

    def test_vectorized_matches_scalar(self, rng):
        ds, params = _valid(rng)
        full = locations(params, ds.panel)
        for i, s in enumerate(ds.subjects):
            for t in range(s.T):
                for j in range(params.M):
                    for g in range(params.G):
                        np.testing.assert_allclose(full[i, t, j, g], location(params, ds, i, t, g, j))

    def test_index_errors(self, rng):
        ds, params = _valid(rng)
        for args in [(9, 0, 0, 0), (0, 99, 0, 0), (0, 0, 5, 0), (0, 0, 0, 7)]:
            with pytest.raises(IndexError):
                location(params, ds, *args)


class TestCentering:
    def test_center_preserves_locations(self, rng):
        ds = random_dataset(rng, N=4, T_max=3, k=3)
        params = random_params(rng, ds, 3, 2, [0.4, 0.6])
        centred = center(params, ds)
        assert validate(centred) == []
        np.testing.assert_allclose(locations(centred, ds.panel), locations(params, ds.panel), atol=1e-12)

    def test_random_intercept_goes_to_states(self, rng):
        subj = [Subject(f"s{i}", rng.normal(size=(3, 2)), rng.normal(size=(3, 1))) for i in range(3)]
        ds = LongitudinalDataset(subj, z_intercept=True, w_intercept=True)
        params = random_params(rng, ds, 2, 2, [0.5, 0.5])
        centred = center(params, ds)
        assert validate(centred) == []
        np.testing.assert_allclose(locations(centred, ds.panel), locations(params, ds.panel), atol=1e-12)


class TestValidate:
    def test_valid(self, rng):
        assert validate(_valid(rng)[1]) == []

    def test_transition_row(self, rng):
        _, params = _valid(rng)
        params.Q[1] *= 0.9
        problems = validate(params)
        assert len(problems) == 1 and problems[0].startswith("Q row 2")

    def test_centering(self, rng):
        _, params = _valid(rng)
        params.b[0] += 1.0
        problems = validate(params)
        assert len(problems) == 1 and "centering" in problems[0]

    def test_psi_and_scales(self, rng):
        _, params = _valid(rng)
        params.psi = np.array([[1.0, 1.5], [1.5, 1.0]])
        params.d = np.array([1.0, -1.0])
        text = " ".join(validate(params))
        assert "positive definite" in text and "d:" in text

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=3, max_size=3))
    def test_total(self, vals):
        params = QMHMMParams(beta=[[vals[0], 1.0]], b=[[[vals[1], 0.0]]], pi=[vals[2]], alpha=[[[0.0, 0.0]]],
                             q=[1.0], Q=[[1.0]], d=[1.0, 1.0], psi=np.eye(2), spec=QuantileSpec([0.5, 0.5]))
        assert isinstance(validate(params), list)

    def test_total_on_garbage(self, rng):
        _, params = _valid(rng)
        params.Q = np.ones((5,))
        params.psi = "nonsense"
        assert validate(params)


class TestSerialization:
    def test_json_round_trip(self, rng, tmp_path):
        _, params = _valid(rng)
        params.to_json(tmp_path / "p.json")
        back = QMHMMParams.from_json(tmp_path / "p.json")
        for f in ("beta", "b", "pi", "alpha", "q", "Q", "d", "psi"):
            np.testing.assert_array_equal(getattr(back, f), getattr(params, f))
        assert back.spec == params.spec

    def test_json_round_trip_without_random_effects(self, tmp_path):
        params = QMHMMParams(beta=[[1.0]], b=np.zeros((1, 0, 1)), pi=[1], alpha=np.zeros((1, 0, 1)),
                             q=[1], Q=[[1]], d=[2], psi=[[1]], spec=QuantileSpec(0.3))
        params.to_json(tmp_path / "p.json")
        back = QMHMMParams.from_json(tmp_path / "p.json")
        assert back.b.shape == (1, 0, 1) and back.alpha.shape == (1, 0, 1)

    def test_vector_round_trip(self, rng):
        _, params = _valid(rng)
        vec = params.to_vector()
        np.testing.assert_array_equal(params.from_vector(vec).to_vector(), vec)
        assert len(params.vector_names()) == vec.size
        with pytest.raises(ValueError):
            params.from_vector(vec[:-1])

    def test_csv_round_trip(self, rng, tmp_path):
        ds = random_dataset(rng, N=4, T_max=4, k=2)
        write_long_csv(ds, tmp_path / "d.csv")
        back = read_long_csv(tmp_path / "d.csv", "id", "time", ["y1", "y2"], ["x1", "x2"],
                             z_cols=["x1"], w_intercept=True)
        assert [s.id for s in back.subjects] == [s.id for s in ds.subjects]
        for a, b in zip(back.subjects, ds.subjects):
            np.testing.assert_array_equal(a.y, b.y)
            np.testing.assert_array_equal(a.x, b.x)
        assert back.z_cols == ds.z_cols and back.w_intercept

    def test_csv_sorts_time_and_adds_intercept(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("id,time,y1,x\nb,2,5,0.5\na,1,1,0.1\nb,1,4,0.4\n")
        ds = read_long_csv(f, "id", "time", ["y1"], ["x"], x_intercept=True)
        assert [s.id for s in ds.subjects] == ["b", "a"]
        np.testing.assert_array_equal(ds.subjects[0].y[:, 0], [4, 5])
        np.testing.assert_array_equal(ds.subjects[0].x, [[1, 0.4], [1, 0.5]])
        assert ds.x_names == ["(intercept)", "x"]

    def test_csv_missing_column(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("id,time,y1\na,1,2\n")
        with pytest.raises(DataFormatError, match="'x1'"):
            read_long_csv(f, "id", "time", ["y1"], ["x1"])

    def test_csv_bad_value_reports_line(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("id,time,y1,x1\na,1,2,3\na,2,oops,3\n")
        with pytest.raises(DataFormatError, match="line 3"):
            read_long_csv(f, "id", "time", ["y1"], ["x1"])

    def test_csv_design_columns_must_be_covariates(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("id,time,y1,x1\na,1,2,3\n")
        with pytest.raises(DataFormatError, match="x9"):
            read_long_csv(f, "id", "time", ["y1"], ["x1"], z_cols=["x9"])
