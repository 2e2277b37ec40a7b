import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmt_equiv.errors import ModelError
from rmt_equiv.model import (ColumnLaw, DataModel, SampleMatrix, derive_seed, load_model,
                             model_from_dict, model_to_dict, sample, sample_bounded,
                             save_model, validate_model)

from oracles import random_psd


def iso(p, v, n, eps=0.25, **kw):
    return DataModel.shared(ColumnLaw.isotropic(p, v), n, epsilon=eps, **kw)


# -- ColumnLaw ------------------------------------------------------------------------

def test_second_moment_is_cov_plus_outer_mean():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal(5)
    C = random_psd(rng, 5)
    law = ColumnLaw(mu, C)
    assert np.max(np.abs(law.second_moment - (C + np.outer(mu, mu)))) <= 1e-12


def test_law_rejects_bad_shape():
    with pytest.raises(ModelError):
        ColumnLaw(np.zeros(3), np.eye(2))


def test_law_check_rejects_asymmetric_and_indefinite():
    C = np.eye(3)
    C[0, 1] = 0.1
    with pytest.raises(ModelError, match="symmetric"):
        ColumnLaw(np.zeros(3), C).check()
    with pytest.raises(ModelError, match="indefinite"):
        ColumnLaw(np.zeros(2), np.diag([1.0, -0.1])).check()


def test_law_tolerates_tiny_negative_eigenvalue():
    C = np.diag([1.0, -1e-14])
    law = ColumnLaw(np.zeros(2), C)
    law.check()
    assert np.all(np.isfinite(law.sqrt_cov))


# -- validate_model ---------------------------------------------------------------------

def test_validate_isotropic_passes_with_top_eigenvalue():
    rep = validate_model(iso(10, 0.25, 20))
    assert rep.passed
    assert rep.top_eigenvalue == pytest.approx(0.25, abs=1e-12)


def test_identity_covariance_fails_spectral_margin():
    model = iso(10, 1.0, 20, check=False)
    rep = validate_model(model)
    assert not rep.spectral_ok
    with pytest.raises(ModelError) as exc:
        iso(10, 1.0, 20)
    assert exc.value.field == "epsilon"


def test_two_group_top_eigenvalue_is_average():
    model = DataModel.from_groups([(10, ColumnLaw.isotropic(6, 0.2)),
                                   (10, ColumnLaw.isotropic(6, 0.4))], epsilon=0.25)
    assert validate_model(model).top_eigenvalue == pytest.approx(0.3, abs=1e-12)


def test_validate_names_offending_column():
    good = ColumnLaw.isotropic(2, 0.1)
    bad = ColumnLaw(np.zeros(2), np.diag([0.1, -0.1]))
    with pytest.raises(ModelError) as exc:
        DataModel.from_laws([good, good, bad, good], epsilon=0.25)
    assert exc.value.column == 2


def test_trace_floor():
    with pytest.raises(ModelError) as exc:
        iso(4, 1e-9, 8)
    assert exc.value.field == "laws"


@pytest.mark.parametrize("eps", [0.0, -0.1, 0.6])
def test_epsilon_range(eps):
    with pytest.raises(ModelError) as exc:
        iso(4, 0.1, 8, eps=eps)
    assert exc.value.field == "epsilon"


def test_unknown_generator():
    with pytest.raises(ModelError):
        iso(4, 0.1, 8, generator="cauchy")


def test_group_bookkeeping():
    a, b = ColumnLaw.isotropic(3, 0.1), ColumnLaw.isotropic(3, 0.2)
    model = DataModel.from_groups([(2, a), (3, b)], epsilon=0.25)
    assert model.n == 5
    assert list(model.assignment) == [0, 0, 1, 1, 1]
    assert list(model.counts) == [2, 3]
    assert model.law(4) is b
    assert model.first_column(1) == 2


# -- sampling ---------------------------------------------------------------------------

def test_zero_covariance_gives_means():
    mu = np.array([0.1, -0.2, 0.3])
    model = DataModel.shared(ColumnLaw(mu, np.zeros((3, 3))), 4, epsilon=0.25, check=False)
    X = sample(model, 5).data
    assert np.array_equal(X, np.tile(mu[:, None], (1, 4)))


@pytest.mark.parametrize("gen", ["gaussian", "lipschitz_of_gaussian", "bounded_independent"])
def test_sample_is_deterministic(gen):
    model = iso(6, 0.2, 9, generator=gen)
    a, b = sample(model, 123).data, sample(model, 123).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(model, 124).data)


def test_column_streams_do_not_depend_on_n():
    # column i depends only on (seed, i)
    small = sample(iso(4, 0.2, 3), 7).data
    large = sample(iso(4, 0.2, 8), 7).data
    assert np.array_equal(small, large[:, :3])


def test_sample_mean_is_zero_for_centered_gaussian():
    model = DataModel.shared(ColumnLaw.isotropic(2, 1.0), 3, epsilon=0.25, check=False)
    acc = np.zeros((2, 3))
    T = 100_000
    for s in range(T):
        acc += sample(model, s).data
    assert np.max(np.abs(acc / T)) <= 3 * 10 ** -2.5


def test_empirical_second_moment_converges():
    rng = np.random.default_rng(1)
    p, T = 8, 10_000
    mu = 0.1 * rng.standard_normal(p)
    C = random_psd(rng, p, 0.2)
    model = DataModel.shared(ColumnLaw(mu, C), T, epsilon=0.25)
    X = sample(model, 3).data
    err = np.linalg.norm(X @ X.T / T - model.laws[0].second_moment, 2)
    assert err <= 5 * np.sqrt(p / T)


def test_lipschitz_generator_applies_tanh():
    model = DataModel.shared(ColumnLaw.isotropic(3, 0.2, np.ones(3)), 4, epsilon=0.25,
                             generator="lipschitz_of_gaussian", check=False)
    X = sample(model, 0).data
    assert np.all(np.abs(X - 1.0) < 1.0)


def test_sample_bounded_moments():
    E = sample_bounded(1000, 1000, 4).data
    assert abs(E.mean()) <= 0.01
    assert abs(E.var() - 1.0) <= 0.02
    assert np.max(np.abs(E)) <= np.sqrt(3.0)


def test_sample_bounded_rejects_empty():
    with pytest.raises(ValueError):
        sample_bounded(0, 3, 1)


def test_sample_matrix_shape_checked():
    model = iso(3, 0.1, 4)
    with pytest.raises(ValueError):
        SampleMatrix(np.zeros((3, 5)), 0, model)


def test_derive_seed_distinct_and_stable():
    seeds = {derive_seed(1, i) for i in range(100)}
    assert len(seeds) == 100
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


# -- model files -------------------------------------------------------------------------

def test_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    laws = [ColumnLaw(0.1 * rng.standard_normal(3), random_psd(rng, 3, 0.1)) for _ in range(2)]
    model = DataModel.from_groups([(3, laws[0]), (2, laws[1])], epsilon=0.2, generator="lipschitz_of_gaussian")
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    assert back.n == 5 and back.epsilon == 0.2 and back.generator == model.generator
    assert list(back.assignment) == list(model.assignment)
    for a, b in zip(model.laws, back.laws):
        assert np.array_equal(a.cov, b.cov) and np.array_equal(a.mean, b.mean)
    assert model_to_dict(back) == model_to_dict(model)


def test_variance_shorthand_and_default_mean():
    model = model_from_dict({"p": 3, "n": 4, "epsilon": 0.25, "shared_law": {"variance": 0.1}})
    assert np.array_equal(model.laws[0].cov, 0.1 * np.eye(3))
    assert np.array_equal(model.laws[0].mean, np.zeros(3))


def test_per_column_laws():
    d = {"p": 2, "epsilon": 0.25,
         "laws": [{"variance": 0.1}, {"mean": [0.1, 0], "cov": [[0.1, 0], [0, 0.2]]}]}
    model = model_from_dict(d)
    assert model.n == 2 and len(model.laws) == 2


@pytest.mark.parametrize("d,field", [
    ({"n": 4, "epsilon": 0.25, "shared_law": {"variance": 0.1}}, "p"),
    ({"p": 3, "n": 4, "shared_law": {"variance": 0.1}}, "epsilon"),
    ({"p": 3, "n": 4, "epsilon": 0.9, "shared_law": {"variance": 0.1}}, "epsilon"),
    ({"p": 3, "n": 4, "epsilon": 0.25}, "laws"),
    ({"p": 3, "epsilon": 0.25, "shared_law": {"variance": 0.1}}, "n"),
    ({"p": 3, "n": 4, "epsilon": 0.25, "shared_law": {"mean": [0, 0, 0]}}, "shared_law.cov"),
    ({"p": 3, "n": 4, "epsilon": 0.25, "shared_law": {"variance": 0.1, "mean": [0, 0]}},
     "shared_law.mean"),
    ({"p": 2, "n": 5, "epsilon": 0.25, "groups": [{"count": 2, "law": {"variance": 0.1}}]}, "n"),
    ({"p": 2, "epsilon": 0.25, "groups": [{"count": 2}]}, "groups[0]"),
])
def test_model_file_errors_name_field(d, field):
    with pytest.raises(ModelError) as exc:
        model_from_dict(d)
    assert exc.value.field == field


def test_json_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "p": 3,\n "n": 4\n "epsilon": 0.25\n}')
    with pytest.raises(ModelError, match="line 4"):
        load_model(path)


# -- properties --------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 6), n=st.integers(1, 6), seed=st.integers(0, 2**64 - 1))
def test_sample_pure_function_of_model_and_seed(p, n, seed):
    model = iso(p, 0.1, n)
    a = sample(model, seed)
    b = sample(model, seed)
    assert a.data.shape == (p, n)
    assert np.array_equal(a.data, b.data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 6))
def test_second_moment_invariant(seed, p):
    rng = np.random.default_rng(seed)
    law = ColumnLaw(rng.standard_normal(p), random_psd(rng, p))
    law.check()
    assert np.max(np.abs(law.second_moment - law.cov - np.outer(law.mean, law.mean))) <= 1e-12
    R = law.sqrt_cov
    assert np.allclose(R @ R, law.cov, atol=1e-10)


def test_model_file_is_json(tmp_path):
    model = iso(2, 0.1, 3)
    path = tmp_path / "m.json"
    save_model(model, path)
    json.loads(path.read_text())
