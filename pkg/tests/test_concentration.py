import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmt_equiv.concentration import (ObservableSamples, convex_concentration_experiment,
                                     fit_tail_exponent, frobenius_rate_experiment,
                                     hanson_wright_experiment, observable_diameter,
                                     two_group_family)
from rmt_equiv.errors import EstimationError
from rmt_equiv.model import ColumnLaw, DataModel, derive_seed, sample
from rmt_equiv.resolvent import ResolventQuery, deterministic_equivalent, resolvent_weighted


# -- observable diameter ---------------------------------------------------------------

def test_diameter_of_standard_normal():
    v = np.random.default_rng(0).standard_normal(100_000)
    assert observable_diameter(v) == pytest.approx(1.0, abs=0.02)


def test_diameter_scales_exactly():
    v = np.random.default_rng(1).standard_normal(1001)
    assert observable_diameter(2 * v) == 2 * observable_diameter(v)
    # non-dyadic factors agree up to the rounding of the final product
    assert observable_diameter(3 * v) == pytest.approx(3 * observable_diameter(v), rel=4e-16)


def test_diameter_errors():
    with pytest.raises(EstimationError):
        observable_diameter(np.ones(500))
    with pytest.raises(ValueError):
        observable_diameter(np.arange(99.0))


def test_observable_samples_wrapper():
    s = ObservableSamples(np.random.default_rng(2).standard_normal(400), meta="x", seed=2)
    assert observable_diameter(s) == observable_diameter(s.values)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.sampled_from([-1024.0, -3.0, 0.5, 8.0, 2048.0]))
def test_diameter_shift_invariant(seed, shift):
    # dyadic shifts of dyadic-grid samples are exact in floating point
    v = np.round(np.random.default_rng(seed).standard_normal(301) * 2**20) / 2**20
    assert observable_diameter(v + shift) == observable_diameter(v)


# -- tail exponent --------------------------------------------------------------------

def test_laplace_tail_exponent():
    v = np.random.default_rng(3).laplace(size=100_000)
    fit = fit_tail_exponent(v)
    assert 0.8 <= fit.q_hat <= 1.3
    assert fit.sigma_hat > 0 and 0 <= fit.r2 <= 1


def test_tail_fit_grid_within_probability_window():
    v = np.random.default_rng(4).laplace(size=20_000)
    fit = fit_tail_exponent(v)
    assert np.all(fit.tail_prob <= 0.2) and np.all(fit.tail_prob >= 10 / v.size)
    assert np.all(np.diff(fit.t_grid) > 0)


def test_tail_fit_rejects_jitter_and_small_samples():
    rng = np.random.default_rng(5)
    jitter = 1e-9 * rng.choice([-1.0, 1.0], size=20_000)
    with pytest.raises(EstimationError):
        fit_tail_exponent(jitter)
    with pytest.raises(ValueError):
        fit_tail_exponent(rng.standard_normal(9_999))


def test_tail_fit_shift_invariant():
    v = np.round(np.random.default_rng(6).laplace(size=10_000) * 2**20) / 2**20
    a, b = fit_tail_exponent(v), fit_tail_exponent(v + 64.0)
    assert a.q_hat == b.q_hat and a.sigma_hat == b.sigma_hat


# -- Frobenius rate ----------------------------------------------------------------------

def test_rate_single_trial_reproduces_direct_distance():
    family = two_group_family()
    table = frobenius_rate_experiment(family, -1.0, [(40, 20)], 1, 7)
    model = family(40, 20)
    X = sample(model, derive_seed(7, 0, 0)).data
    tq = deterministic_equivalent(ResolventQuery(-1.0, model)).tilde_q
    direct = np.linalg.norm(resolvent_weighted(X, np.ones(40), -1.0) - tq)
    row = table.rows[0]
    assert row.error == pytest.approx(direct, rel=1e-12)
    assert row.rate == pytest.approx(np.sqrt(np.log(40) / 40))
    assert row.kept == 1


def test_rate_experiment_is_deterministic_and_thread_independent():
    family = two_group_family()
    a = frobenius_rate_experiment(family, -1.0, [(40, 20), (80, 40)], 8, 3, threads=1)
    b = frobenius_rate_experiment(family, -1.0, [(40, 20), (80, 40)], 8, 3, threads=4)
    assert [r.error for r in a.rows] == [r.error for r in b.rows]
    assert np.isfinite(a.slope)


def test_rate_experiment_stabilises_across_seeds():
    family = two_group_family()
    a = frobenius_rate_experiment(family, -1.0, [(100, 50)], 200, 1, threads=4).rows[0].error
    b = frobenius_rate_experiment(family, -1.0, [(100, 50)], 200, 2, threads=4).rows[0].error
    assert abs(a - b) / max(a, b) <= 0.2


def test_rate_experiment_all_discarded():
    def family(n, p):
        law = ColumnLaw.isotropic(p, 2.0)
        return DataModel.shared(law, n, epsilon=0.25, check=False)
    with pytest.raises(EstimationError):
        frobenius_rate_experiment(family, -1.0, [(20, 10)], 2, 0)


def test_rate_experiment_input_checks():
    with pytest.raises(ValueError):
        frobenius_rate_experiment(two_group_family(), -1.0, [(40, 20)], 0, 0)
    with pytest.raises(ValueError):
        frobenius_rate_experiment(two_group_family(), -1.0, [(40, 20), (40, 20)], 1, 0)


# -- Hanson-Wright ------------------------------------------------------------------------

def test_hanson_wright_identity_variance():
    p = 30
    row, = hanson_wright_experiment(p, [np.eye(p)], 100_000, 1)
    assert row.std == pytest.approx(np.sqrt(p), rel=0.05)


def test_hanson_wright_zero_matrix():
    row, = hanson_wright_experiment(5, [np.zeros((5, 5))], 1000, 1)
    assert row.std == 0.0 and row.frobenius == 0.0


def test_hanson_wright_ratio_stable_across_decades():
    p = 40
    e0 = np.zeros((p, p))
    e0[0, 0] = 1.0
    mats = [e0, np.eye(p) / np.sqrt(p), 10 * np.eye(p) / np.sqrt(p), 0.1 * e0]
    rows = hanson_wright_experiment(p, mats, 50_000, 2)
    ratios = [r.ratio for r in rows]
    assert max(ratios) / min(ratios) <= 3
    assert rows[0].std / rows[1].std <= 3


def test_hanson_wright_shape_check():
    with pytest.raises(ValueError):
        hanson_wright_experiment(3, [np.eye(4)], 10, 0)


# -- convex concentration --------------------------------------------------------------------

def test_convex_zero_matrix_gives_zero_std():
    row, = convex_concentration_experiment([20], 10, 0, A=lambda p: np.zeros((p, p)))
    assert row.std == 0.0


def test_convex_reproducible_and_thread_independent():
    a = convex_concentration_experiment([20, 40], 20, 5)
    b = convex_concentration_experiment([20, 40], 20, 5, threads=3)
    assert [(r.std, r.mean) for r in a] == [(r.std, r.mean) for r in b]


def test_convex_scaling_small():
    rows = convex_concentration_experiment([25, 100], 200, 6, threads=4)
    assert rows[1].std / rows[0].std <= 0.5
    assert not any(r.flagged for r in rows)


def test_convex_flags_event_failures():
    row, = convex_concentration_experiment([20], 40, 0, scale=0.5, epsilon=0.3)
    assert row.event_failure_rate > 0.1 and row.flagged
    row, = convex_concentration_experiment([20], 40, 0, scale=0.5, epsilon=0.25)
    assert not row.flagged
    with pytest.raises(EstimationError):
        convex_concentration_experiment([20], 5, 0, scale=1.0, epsilon=0.5)
