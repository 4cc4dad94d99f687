"""
Exact and brute-force reference smoothers.

- Kalman filter + Rauch-Tung-Striebel smoother for the linear-Gaussian model.
- Scaled forward-backward on finite-state HMMs, and exhaustive path
  enumeration for very small ones.
- A grid-quadrature smoother for any 1-D model: the state space is
  discretized into a finite HMM and solved with forward-backward.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import logsumexp

from pathsmooth.errors import ConfigurationError, GridCoverageError, NumericalError
from pathsmooth.models import HmmModel, LgmParams, ObservationRecord

logger = logging.getLogger("pathsmooth.exact")

DEFAULT_GRID_POINTS = 2000
DEFAULT_GRID_WIDTH = 6.0
BOUNDARY_MASS_TOLERANCE = 1e-10
MAX_GRID_EXPANSIONS = 8


@dataclass(frozen=True)
class ExactMarginals:
    means: np.ndarray
    variances: np.ndarray
    # finite chains can pin X_t to one state given y_{0:T}
    allow_point_mass: bool = False

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=float)
        variances = np.asarray(self.variances, dtype=float)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        if means.shape != variances.shape or means.ndim != 1:
            raise NumericalError(f"means {means.shape} and variances {variances.shape} disagree")
        if self.allow_point_mass:
            if not np.all(variances >= 0):
                raise NumericalError(f"smoothing variances must be non-negative, min={variances.min()}")
        elif not np.all(variances > 0):
            raise NumericalError(f"smoothing variances must be positive, min={variances.min()}")

    @property
    def horizon(self) -> int:
        return self.means.size


@dataclass(frozen=True)
class KalmanFilterResult:
    filtered_means: np.ndarray
    filtered_variances: np.ndarray
    predicted_means: np.ndarray
    predicted_variances: np.ndarray


def kalman_filter(params: LgmParams, obs: ObservationRecord) -> KalmanFilterResult:
    """Forward Kalman recursion for the scalar linear-Gaussian model."""
    y = obs.observations
    n = y.size
    var_u, var_v = params.sigma_u**2, params.sigma_v**2
    m_pred, p_pred = np.empty(n), np.empty(n)
    m_filt, p_filt = np.empty(n), np.empty(n)
    m_pred[0], p_pred[0] = 0.0, params.initial_variance
    for t in range(n):
        if t > 0:
            m_pred[t] = params.phi * m_filt[t - 1]
            p_pred[t] = params.phi**2 * p_filt[t - 1] + var_u
        if not p_pred[t] > 0:
            raise NumericalError(f"non-positive predicted variance {p_pred[t]} at t={t}")
        gain = p_pred[t] / (p_pred[t] + var_v)
        m_filt[t] = m_pred[t] + gain * (y[t] - m_pred[t])
        p_filt[t] = (1.0 - gain) * p_pred[t]
    return KalmanFilterResult(m_filt, p_filt, m_pred, p_pred)


def kalman_smoother(params: LgmParams, obs: ObservationRecord) -> ExactMarginals:
    """Exact smoothing means and variances (Kalman filter + RTS pass)."""
    kf = kalman_filter(params, obs)
    means = kf.filtered_means.copy()
    variances = kf.filtered_variances.copy()
    for t in range(obs.horizon - 2, -1, -1):
        gain = kf.filtered_variances[t] * params.phi / kf.predicted_variances[t + 1]
        means[t] += gain * (means[t + 1] - kf.predicted_means[t + 1])
        variances[t] += gain**2 * (variances[t + 1] - kf.predicted_variances[t + 1])
    return ExactMarginals(means=means, variances=variances)


@dataclass(frozen=True)
class ForwardBackwardResult:
    filtered: np.ndarray  # (T+1, n) normalized filtering probabilities
    smoothed: np.ndarray  # (T+1, n) normalized smoothing probabilities
    log_evidence: float


def forward_backward(initial: np.ndarray, transition: np.ndarray, log_likelihood: np.ndarray) -> ForwardBackwardResult:
    """
    Scaled forward-backward on a finite HMM.

    Args:
        initial: (n,) initial probabilities
        transition: (n, n) row-stochastic matrix
        log_likelihood: (T+1, n) log g(x, y_t) for every state

    Raises:
        GridCoverageError: the forward mass underflows to zero at some t
    """
    horizon, n = log_likelihood.shape
    shift = log_likelihood.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        t = int(np.argmin(np.isfinite(shift[:, 0])))
        raise GridCoverageError(t, "observation has zero likelihood on every state")
    lik = np.exp(log_likelihood - shift)

    filtered = np.empty((horizon, n))
    scale = np.empty(horizon)
    alpha = initial * lik[0]
    for t in range(horizon):
        if t > 0:
            alpha = (filtered[t - 1] @ transition) * lik[t]
        total = alpha.sum()
        if not total > 0:
            raise GridCoverageError(t, "forward pass underflowed to zero mass")
        scale[t] = total
        filtered[t] = alpha / total

    smoothed = np.empty_like(filtered)
    smoothed[-1] = filtered[-1]
    beta = np.ones(n)
    for t in range(horizon - 2, -1, -1):
        beta = transition @ (lik[t + 1] * beta) / scale[t + 1]
        smoothed[t] = filtered[t] * beta
        smoothed[t] /= smoothed[t].sum()

    log_evidence = float(np.sum(np.log(scale)) + shift.sum())
    return ForwardBackwardResult(filtered=filtered, smoothed=smoothed, log_evidence=log_evidence)


def _require_finite(model: HmmModel):
    if model.finite is None:
        raise ConfigurationError(f"model '{model.name}' is not a finite-state HMM")
    return model.finite


def finite_forward_backward(model: HmmModel, obs: ObservationRecord) -> ForwardBackwardResult:
    fin = _require_finite(model)
    states = np.arange(fin.n_states, dtype=float)
    log_lik = model.log_observation_density(states[None, :], obs.observations[:, None])
    return forward_backward(fin.initial, fin.transition, log_lik)


def finite_smoother(model: HmmModel, obs: ObservationRecord) -> ExactMarginals:
    """Smoothing means/variances of the state index of a finite HMM."""
    fb = finite_forward_backward(model, obs)
    states = np.arange(fb.smoothed.shape[1], dtype=float)
    means = fb.smoothed @ states
    variances = np.einsum("tj,tj->t", fb.smoothed, (states[None, :] - means[:, None]) ** 2)
    return ExactMarginals(means=means, variances=np.maximum(variances, 0.0), allow_point_mass=True)


def backward_kernel_probabilities(model: HmmModel, filtered_t: np.ndarray, x_next: int) -> np.ndarray:
    """P(X_t = j | X_{t+1} = x_next, y_{0:t}) on a finite HMM."""
    fin = _require_finite(model)
    p = filtered_t * fin.transition[:, x_next]
    return p / p.sum()


def enumerate_smoothing(model: HmmModel, obs: ObservationRecord) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exhaustive enumeration of the joint smoothing law of a finite HMM.

    Returns:
        Tuple of (paths, probabilities)
        - paths: (n^(T+1), T+1) every state path, lexicographic order
        - probabilities: normalized smoothing probability of each path
    """
    fin = _require_finite(model)
    horizon = obs.horizon
    paths = np.array(list(itertools.product(range(fin.n_states), repeat=horizon)), dtype=float)
    log_joint = model.log_initial_density(paths[:, 0])
    for t in range(horizon):
        if t > 0:
            log_joint = log_joint + model.log_transition_density(paths[:, t - 1], paths[:, t])
        log_joint = log_joint + model.log_observation_density(paths[:, t], obs.observations[t])
    log_norm = logsumexp(log_joint)
    if not np.isfinite(log_norm):
        raise GridCoverageError(None, "every path has zero probability")
    return paths, np.exp(log_joint - log_norm)


def default_grid(model: HmmModel, width: float = DEFAULT_GRID_WIDTH) -> Tuple[float, float]:
    mean, var = model.initial_moments
    half = width * math.sqrt(var)
    return mean - half, mean + half


def _grid_pass(model: HmmModel, obs: ObservationRecord, lo: float, hi: float, n_points: int):
    x = np.linspace(lo, hi, n_points)
    log_pi = model.log_initial_density(x)
    pi = np.exp(log_pi - log_pi.max())
    pi /= pi.sum()

    log_a = model.log_transition_density(x[:, None], x[None, :])
    a = np.exp(log_a - log_a.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)

    log_lik = model.log_observation_density(x[None, :], obs.observations[:, None])
    fb = forward_backward(pi, a, log_lik)
    return x, fb.smoothed


def grid_smoother(
    model: HmmModel,
    obs: ObservationRecord,
    grid_lo: Optional[float] = None,
    grid_hi: Optional[float] = None,
    n_points: int = DEFAULT_GRID_POINTS,
) -> ExactMarginals:
    """
    Smoothing marginals of a 1-D model by discretizing the state space.

    With explicit bounds the grid is used as given. Without them the grid
    spans the initial mean +/- 6 standard deviations and is widened until
    the mass on the two boundary cells drops below 1e-10.
    """
    if model.state_dim != 1 or model.finite is not None:
        raise ConfigurationError(f"grid_smoother needs a continuous 1-D model, got '{model.name}'")
    if n_points < 2:
        raise ConfigurationError(f"n_points must be >= 2, got {n_points}")

    auto = grid_lo is None or grid_hi is None
    lo, hi = default_grid(model) if auto else (grid_lo, grid_hi)
    for attempt in range(MAX_GRID_EXPANSIONS + 1):
        x, marginals = _grid_pass(model, obs, lo, hi, n_points)
        boundary = float(np.max(marginals[:, 0] + marginals[:, -1]))
        if not auto or boundary <= BOUNDARY_MASS_TOLERANCE:
            break
        center, half = 0.5 * (lo + hi), 0.75 * (hi - lo)
        logger.debug(f"[GRID] boundary mass {boundary:.3e} on [{lo:.3f}, {hi:.3f}], widening")
        lo, hi = center - half, center + half
    else:
        raise GridCoverageError(None, f"boundary mass {boundary:.3e} after {MAX_GRID_EXPANSIONS} expansions")

    means = marginals @ x
    variances = np.einsum("tj,tj->t", marginals, (x[None, :] - means[:, None]) ** 2)
    return ExactMarginals(means=means, variances=variances)


def grid_conditional_cdf(
    unnormalized_log_density: Callable,
    grid_lo: float,
    grid_hi: float,
    n_points: int = 4001,
) -> Callable:
    """Normalized CDF of a 1-D unnormalized density by trapezoidal quadrature."""
    x = np.linspace(grid_lo, grid_hi, n_points)
    log_d = np.asarray(unnormalized_log_density(x), dtype=float)
    peak = np.max(log_d)
    if not np.isfinite(peak):
        raise GridCoverageError(None)
    cumulative = cumulative_trapezoid(np.exp(log_d - peak), x, initial=0.0)
    total = cumulative[-1]
    if not total > 0:
        raise GridCoverageError(None)
    cdf = cumulative / total

    def evaluate(q):
        return np.interp(q, x, cdf, left=0.0, right=1.0)

    return evaluate
