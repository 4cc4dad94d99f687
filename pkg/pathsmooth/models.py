"""
Hidden Markov models: the generative law (initial, transition and
observation densities plus their samplers) and observation simulation.

All densities are exposed in log space and broadcast over numpy arrays.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from pathsmooth.errors import ConfigurationError
from pathsmooth.rng import stream

logger = logging.getLogger("pathsmooth.models")

LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, mean, var):
    """Gaussian log-density, vectorized over all arguments."""
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class LgmParams:
    phi: float = 0.9
    sigma_u: float = 0.6
    sigma_v: float = 1.0

    def __post_init__(self) -> None:
        if not abs(self.phi) < 1.0:
            raise ConfigurationError(f"|phi| must be < 1, got {self.phi}", key="hmm.lgm.phi")
        if not self.sigma_u > 0:
            raise ConfigurationError(f"must be positive, got {self.sigma_u}", key="hmm.lgm.sigma_u")
        if not self.sigma_v > 0:
            raise ConfigurationError(f"must be positive, got {self.sigma_v}", key="hmm.lgm.sigma_v")

    @property
    def initial_variance(self) -> float:
        return self.sigma_u**2 / (1.0 - self.phi**2)


@dataclass(frozen=True)
class StoVolParams:
    alpha: float = 0.3
    sigma: float = 0.5
    beta: float = 1.0

    def __post_init__(self) -> None:
        if not abs(self.alpha) < 1.0:
            raise ConfigurationError(f"|alpha| must be < 1, got {self.alpha}", key="hmm.stovol.alpha")
        if not self.sigma > 0:
            raise ConfigurationError(f"must be positive, got {self.sigma}", key="hmm.stovol.sigma")
        if not self.beta > 0:
            raise ConfigurationError(f"must be positive, got {self.beta}", key="hmm.stovol.beta")

    @property
    def initial_variance(self) -> float:
        return self.sigma**2 / (1.0 - self.alpha**2)


@dataclass(frozen=True)
class FiniteHmm:
    """Matrices of a discrete-state HMM; states and symbols are 0..n-1."""

    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class HmmModel:
    name: str
    log_initial_density: Callable
    log_transition_density: Callable
    log_observation_density: Callable
    sample_initial: Callable
    sample_transition: Callable
    sample_observation: Callable
    state_dim: int = 1
    # (mean, variance) of X_0; stationary for both continuous models
    initial_moments: Tuple[float, float] = (0.0, 1.0)
    transition_density_bound: float = math.inf
    params: object = None
    finite: Optional[FiniteHmm] = field(default=None, repr=False)


@dataclass(frozen=True)
class ObservationRecord:
    observations: np.ndarray
    true_states: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self) -> None:
        obs = np.asarray(self.observations, dtype=float)
        object.__setattr__(self, "observations", obs)
        if obs.ndim != 1 or obs.size < 1:
            raise ConfigurationError("observations must be a non-empty 1-D sequence")
        if self.true_states is not None:
            states = np.asarray(self.true_states, dtype=float)
            object.__setattr__(self, "true_states", states)
            if states.shape != obs.shape:
                raise ConfigurationError(
                    f"true_states has length {states.size}, observations has {obs.size}"
                )

    @property
    def horizon(self) -> int:
        """Number of time steps, T+1."""
        return self.observations.size


def make_lgm(params: LgmParams) -> HmmModel:
    """Linear-Gaussian AR(1) model observed in Gaussian noise."""
    phi, var_u, var_v = params.phi, params.sigma_u**2, params.sigma_v**2
    p0 = params.initial_variance

    return HmmModel(
        name="lgm",
        log_initial_density=lambda x: normal_logpdf(x, 0.0, p0),
        log_transition_density=lambda x, x_next: normal_logpdf(x_next, phi * np.asarray(x), var_u),
        log_observation_density=lambda x, y: normal_logpdf(y, np.asarray(x), var_v),
        sample_initial=lambda rng, size: rng.normal(0.0, math.sqrt(p0), size),
        sample_transition=lambda x, rng: phi * np.asarray(x) + params.sigma_u * rng.standard_normal(np.shape(x)),
        sample_observation=lambda x, rng: np.asarray(x) + params.sigma_v * rng.standard_normal(np.shape(x)),
        initial_moments=(0.0, p0),
        transition_density_bound=1.0 / (params.sigma_u * math.sqrt(2.0 * math.pi)),
        params=params,
    )


def stovol_log_observation(x, y, beta: float):
    """log N(y; 0, beta^2 e^x)."""
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + 2.0 * math.log(beta)) - 0.5 * x - np.square(y) * np.exp(-x) / (2.0 * beta**2)


def make_stovol(params: StoVolParams) -> HmmModel:
    """Stochastic volatility model Y_t = beta * exp(X_t / 2) * V_t."""
    alpha, sigma, beta = params.alpha, params.sigma, params.beta
    p0 = params.initial_variance

    def sample_observation(x, rng):
        x = np.asarray(x, dtype=float)
        return beta * np.exp(x / 2.0) * rng.standard_normal(x.shape)

    return HmmModel(
        name="stovol",
        log_initial_density=lambda x: normal_logpdf(x, 0.0, p0),
        log_transition_density=lambda x, x_next: normal_logpdf(x_next, alpha * np.asarray(x), sigma**2),
        log_observation_density=lambda x, y: stovol_log_observation(x, y, beta),
        sample_initial=lambda rng, size: rng.normal(0.0, math.sqrt(p0), size),
        sample_transition=lambda x, rng: alpha * np.asarray(x) + sigma * rng.standard_normal(np.shape(x)),
        sample_observation=sample_observation,
        initial_moments=(0.0, p0),
        transition_density_bound=1.0 / (sigma * math.sqrt(2.0 * math.pi)),
        params=params,
    )


def _check_stochastic(name: str, matrix: np.ndarray) -> None:
    if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=-1), 1.0, atol=1e-9):
        raise ConfigurationError("rows must be probability vectors", key=f"hmm.finite.{name}")


def _categorical(cumulative: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cumulative entry exceeding u, row by row
    idx = (u[..., None] >= cumulative).sum(axis=-1)
    return np.minimum(idx, cumulative.shape[-1] - 1)


def make_finite_hmm(
    n_states: int,
    transition_matrix: Sequence[Sequence[float]],
    emission_matrix: Sequence[Sequence[float]],
    initial_vector: Sequence[float],
) -> HmmModel:
    """Discrete-state HMM; states are carried as floats 0.0 .. n_states-1."""
    a = np.asarray(transition_matrix, dtype=float)
    b = np.asarray(emission_matrix, dtype=float)
    pi = np.asarray(initial_vector, dtype=float)
    if n_states < 1:
        raise ConfigurationError(f"need at least one state, got {n_states}", key="hmm.finite.n_states")
    if a.shape != (n_states, n_states):
        raise ConfigurationError(f"expected shape ({n_states}, {n_states}), got {a.shape}", key="hmm.finite.transition")
    if b.ndim != 2 or b.shape[0] != n_states:
        raise ConfigurationError(f"expected {n_states} rows, got shape {b.shape}", key="hmm.finite.emission")
    if pi.shape != (n_states,):
        raise ConfigurationError(f"expected length {n_states}, got shape {pi.shape}", key="hmm.finite.initial")
    _check_stochastic("transition", a)
    _check_stochastic("emission", b)
    _check_stochastic("initial", pi)

    with np.errstate(divide="ignore"):
        log_a, log_b, log_pi = np.log(a), np.log(b), np.log(pi)
    cum_a, cum_b, cum_pi = np.cumsum(a, axis=1), np.cumsum(b, axis=1), np.cumsum(pi)
    states = np.arange(n_states, dtype=float)
    mean0 = float(pi @ states)
    var0 = float(pi @ (states - mean0) ** 2)

    def idx(x):
        return np.asarray(x).astype(int)

    return HmmModel(
        name="finite",
        log_initial_density=lambda x: log_pi[idx(x)],
        log_transition_density=lambda x, x_next: log_a[idx(x), idx(x_next)],
        log_observation_density=lambda x, y: log_b[idx(x), idx(y)],
        sample_initial=lambda rng, size: _categorical(cum_pi, rng.random(size)).astype(float),
        sample_transition=lambda x, rng: _categorical(cum_a[idx(x)], rng.random(np.shape(x))).astype(float),
        sample_observation=lambda x, rng: _categorical(cum_b[idx(x)], rng.random(np.shape(x))).astype(float),
        initial_moments=(mean0, max(var0, 1e-12)),
        transition_density_bound=float(a.max()),
        params=None,
        finite=FiniteHmm(transition=a, emission=b, initial=pi),
    )


def simulate(model: HmmModel, horizon: int, seed: int) -> ObservationRecord:
    """Draw a state path and observations of length `horizon` (= T+1)."""
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}", key="hmm.horizon")
    rng = stream(seed, "simulate")
    states = np.empty(horizon)
    x = model.sample_initial(rng, 1)
    states[0] = x[0]
    for t in range(1, horizon):
        x = model.sample_transition(x, rng)
        states[t] = x[0]
    observations = model.sample_observation(states, rng)
    logger.debug(f"[SIMULATE] {model.name}: horizon={horizon} seed={seed}")
    return ObservationRecord(observations=observations, true_states=states, seed=seed)
