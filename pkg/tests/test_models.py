import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from pathsmooth.errors import ConfigurationError
from pathsmooth.models import (
    LgmParams,
    ObservationRecord,
    StoVolParams,
    make_finite_hmm,
    make_lgm,
    make_stovol,
    normal_logpdf,
    simulate,
    stovol_log_observation,
)
from pathsmooth.rng import stream


def _three_state():
    return make_finite_hmm(
        3,
        [[0.8, 0.1, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]],
        [[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.2, 0.7]],
        [0.4, 0.3, 0.3],
    )


def test_lgm_params_reject_nonstationary_phi():
    with pytest.raises(ConfigurationError) as exc:
        LgmParams(phi=1.0)
    assert exc.value.key == "hmm.lgm.phi"


def test_stovol_params_reject_nonpositive_beta():
    with pytest.raises(ConfigurationError) as exc:
        StoVolParams(beta=0.0)
    assert exc.value.key == "hmm.stovol.beta"


def test_lgm_initial_variance_is_stationary():
    params = LgmParams(phi=0.9, sigma_u=0.6, sigma_v=1.0)
    assert params.initial_variance == pytest.approx(0.36 / 0.19)


def test_normal_logpdf_matches_scipy():
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(normal_logpdf(x, 0.5, 2.0), stats.norm.logpdf(x, 0.5, math.sqrt(2.0)), rtol=1e-12)


def test_lgm_densities():
    params = LgmParams()
    model = make_lgm(params)
    x, x_next, y = 0.3, -0.2, 1.1
    assert model.log_transition_density(x, x_next) == pytest.approx(
        stats.norm.logpdf(x_next, params.phi * x, params.sigma_u)
    )
    assert model.log_observation_density(x, y) == pytest.approx(stats.norm.logpdf(y, x, params.sigma_v))
    assert model.log_initial_density(0.0) == pytest.approx(
        stats.norm.logpdf(0.0, 0.0, math.sqrt(params.initial_variance))
    )
    assert math.exp(model.log_transition_density(x, params.phi * x)) == pytest.approx(model.transition_density_bound)


def test_stovol_observation_density_matches_scipy():
    x = np.array([-1.0, 0.0, 0.7])
    for y in (0.1, 1.0, -3.0):
        expected = stats.norm.logpdf(y, 0.0, 1.3 * np.exp(x / 2.0))
        np.testing.assert_allclose(stovol_log_observation(x, y, 1.3), expected, rtol=1e-12)


def test_simulate_is_deterministic_per_seed():
    model = make_stovol(StoVolParams())
    first = simulate(model, 50, seed=11)
    again = simulate(model, 50, seed=11)
    other = simulate(model, 50, seed=12)
    np.testing.assert_array_equal(first.observations, again.observations)
    np.testing.assert_array_equal(first.true_states, again.true_states)
    assert not np.array_equal(first.observations, other.observations)
    assert first.horizon == 50
    assert first.seed == 11


def test_simulate_rejects_empty_horizon():
    with pytest.raises(ConfigurationError):
        simulate(make_lgm(LgmParams()), 0, seed=1)


def test_simulated_lgm_has_stationary_variance():
    params = LgmParams()
    record = simulate(make_lgm(params), 20000, seed=3)
    assert np.var(record.true_states) == pytest.approx(params.initial_variance, rel=0.15)


def test_sample_transition_is_vectorized():
    model = make_lgm(LgmParams())
    x = np.zeros(1000)
    out = model.sample_transition(x, stream(0, "test"))
    assert out.shape == (1000,)
    assert np.std(out) == pytest.approx(0.6, rel=0.1)


def test_observation_record_validation():
    with pytest.raises(ConfigurationError):
        ObservationRecord(observations=[])
    with pytest.raises(ConfigurationError):
        ObservationRecord(observations=[1.0, 2.0], true_states=[0.0])


def test_finite_hmm_rejects_non_stochastic_rows():
    with pytest.raises(ConfigurationError) as exc:
        make_finite_hmm(2, [[0.5, 0.6], [0.5, 0.5]], [[1.0], [1.0]], [0.5, 0.5])
    assert exc.value.key == "hmm.finite.transition"


def test_finite_hmm_densities_and_sampling():
    model = _three_state()
    assert model.finite.n_states == 3
    assert model.transition_density_bound == 0.8
    assert model.log_transition_density(2.0, 1.0) == pytest.approx(math.log(0.3))
    assert model.log_observation_density(1.0, 1.0) == pytest.approx(math.log(0.6))

    rng = stream(5, "finite")
    draws = model.sample_transition(np.zeros(20000), rng)
    counts = np.bincount(draws.astype(int), minlength=3)
    assert stats.chisquare(counts, 20000 * np.array([0.8, 0.1, 0.1])).pvalue > 0.001


def test_finite_zero_probability_is_minus_infinity():
    model = make_finite_hmm(2, [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0])
    assert model.log_transition_density(0.0, 1.0) == -np.inf
    assert model.log_initial_density(1.0) == -np.inf


@pytest.mark.parametrize(
    "model",
    [make_lgm(LgmParams()), make_stovol(StoVolParams())],
    ids=["lgm", "stovol"],
)
def test_transition_density_integrates_to_one(model):
    grid = np.linspace(-15.0, 15.0, 30001)
    for x in stream(31, "quadrature", model.name).uniform(-3.0, 3.0, 10):
        mass = integrate.trapezoid(np.exp(model.log_transition_density(x, grid)), grid)
        assert mass == pytest.approx(1.0, abs=1e-6)


@pytest.mark.slow
def test_finite_simulate_matches_path_probabilities():
    model = _three_state()
    fin = model.finite
    n_samples = 20000
    codes = np.array([
        int(simulate(model, 3, seed=s).true_states @ np.array([9.0, 3.0, 1.0])) for s in range(n_samples)
    ])
    expected = np.zeros(27)
    for path in itertools.product(range(3), repeat=3):
        p = fin.initial[path[0]] * fin.transition[path[0], path[1]] * fin.transition[path[1], path[2]]
        expected[9 * path[0] + 3 * path[1] + path[2]] = p
    counts = np.bincount(codes, minlength=27)
    assert stats.chisquare(counts, n_samples * expected).pvalue > 0.001
