"""
Forward particle filters and the SMC smoothers built on them.

- bootstrap_filter: propose from the transition, weight by the observation
  density, multinomial resampling at every step (or never).
- fully_adapted_filter_lgm: closed-form optimal proposal for the LGM.
- filter_smoother: trace stored ancestry back from the final particles.
- ffbsi: backward simulation through the filter particles, linear in N
  via accept-reject on the transition density.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from pathsmooth.errors import ConfigurationError, ContractError, FilterCollapseError
from pathsmooth.models import HmmModel, LgmParams, ObservationRecord, normal_logpdf

logger = logging.getLogger("pathsmooth.smc")

RESAMPLE_ALWAYS = "always"
RESAMPLE_NEVER = "never"
RESAMPLE_POLICIES = (RESAMPLE_ALWAYS, RESAMPLE_NEVER)

FFBSI_MAX_ATTEMPTS = 100
_FALLBACK_CHUNK = 256


@dataclass(frozen=True)
class PathEnsemble:
    """N weighted particle paths of length T+1; weights are normalized."""

    paths: np.ndarray  # (N, T+1)
    log_weights: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        paths = np.asarray(self.paths, dtype=float)
        log_weights = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "log_weights", log_weights)
        if paths.ndim != 2 or log_weights.shape != (paths.shape[0],):
            raise ContractError(f"paths {paths.shape} and log_weights {log_weights.shape} disagree")
        if not np.all(np.isfinite(paths)):
            raise ContractError("path entries must be finite")

    @classmethod
    def from_unnormalized(cls, paths: np.ndarray, log_weights: np.ndarray) -> "PathEnsemble":
        log_weights = np.asarray(log_weights, dtype=float)
        total = logsumexp(log_weights)
        if not np.isfinite(total):
            raise ContractError("cannot normalize: every weight is zero")
        return cls(paths=paths, log_weights=log_weights - total)

    @classmethod
    def equally_weighted(cls, paths: np.ndarray) -> "PathEnsemble":
        n = np.shape(paths)[0]
        return cls(paths=paths, log_weights=np.full(n, -math.log(n)))

    @property
    def n_particles(self) -> int:
        return self.paths.shape[0]

    @property
    def horizon(self) -> int:
        return self.paths.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def marginal_means(self) -> np.ndarray:
        """Weighted mean of X_t for every t."""
        return self.weights @ self.paths


@dataclass(frozen=True)
class FilterFrame:
    particles: np.ndarray  # (N,) states at time t
    log_weights: np.ndarray  # (N,) normalized
    ancestors: Optional[np.ndarray] = None  # (N,) indices into t-1; None at t=0


def normalize_log_weights(log_weights: np.ndarray, t: int) -> np.ndarray:
    total = logsumexp(log_weights)
    if not np.isfinite(total):
        raise FilterCollapseError(t)
    return log_weights - total


def multinomial_indices(weights: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """`size` iid categorical draws from normalized `weights`."""
    cumulative = np.cumsum(weights)
    cumulative /= cumulative[-1]
    idx = np.searchsorted(cumulative, rng.random(size), side="right")
    return np.minimum(idx, weights.size - 1)


def multinomial_resample(ensemble: PathEnsemble, rng: np.random.Generator) -> PathEnsemble:
    """Replace the ensemble by N iid draws by weight; output weights are 1/N."""
    idx = multinomial_indices(ensemble.weights, ensemble.n_particles, rng)
    return PathEnsemble.equally_weighted(ensemble.paths[idx])


def _check_model(model: HmmModel, n_particles: int) -> None:
    if model.state_dim != 1:
        raise ConfigurationError(f"only 1-D states are supported, got state_dim={model.state_dim}")
    if n_particles < 1:
        raise ConfigurationError(f"need at least one particle, got {n_particles}", key="smoother.n_particles")


def bootstrap_filter(
    model: HmmModel,
    obs: ObservationRecord,
    n_particles: int,
    rng: np.random.Generator,
    resample_policy: str = RESAMPLE_ALWAYS,
) -> List[FilterFrame]:
    """Bootstrap particle filter storing every frame (particles, weights, ancestors)."""
    _check_model(model, n_particles)
    if resample_policy not in RESAMPLE_POLICIES:
        raise ConfigurationError(f"unknown resample policy '{resample_policy}'", key="smoother.resample_policy")

    y = obs.observations
    x = model.sample_initial(rng, n_particles)
    log_w = normalize_log_weights(model.log_observation_density(x, y[0]), 0)
    frames = [FilterFrame(particles=x, log_weights=log_w)]
    uniform = np.full(n_particles, -math.log(n_particles))

    for t in range(1, obs.horizon):
        if resample_policy == RESAMPLE_ALWAYS:
            ancestors = multinomial_indices(np.exp(log_w), n_particles, rng)
            prior_log_w = uniform
        else:
            ancestors = np.arange(n_particles)
            prior_log_w = log_w
        x = model.sample_transition(x[ancestors], rng)
        log_w = normalize_log_weights(prior_log_w + model.log_observation_density(x, y[t]), t)
        frames.append(FilterFrame(particles=x, log_weights=log_w, ancestors=ancestors))

    logger.debug(f"[FILTER] bootstrap {model.name}: N={n_particles} T+1={obs.horizon} policy={resample_policy}")
    return frames


def fully_adapted_filter_lgm(
    params: LgmParams,
    obs: ObservationRecord,
    n_particles: int,
    rng: np.random.Generator,
) -> List[FilterFrame]:
    """
    Fully-adapted auxiliary filter for the LGM.

    Ancestors are selected by the predictive likelihood p(y_t | x_{t-1}) and
    moved with p(x_t | x_{t-1}, y_t), so every frame is equally weighted.
    """
    if n_particles < 1:
        raise ConfigurationError(f"need at least one particle, got {n_particles}", key="smoother.n_particles")
    y = obs.observations
    var_u, var_v = params.sigma_u**2, params.sigma_v**2
    uniform = np.full(n_particles, -math.log(n_particles))

    prec0 = 1.0 / params.initial_variance + 1.0 / var_v
    x = (y[0] / var_v) / prec0 + rng.standard_normal(n_particles) / math.sqrt(prec0)
    frames = [FilterFrame(particles=x, log_weights=uniform)]

    post_var = 1.0 / (1.0 / var_u + 1.0 / var_v)
    for t in range(1, obs.horizon):
        log_pred = normal_logpdf(y[t], params.phi * x, var_u + var_v)
        selection = normalize_log_weights(uniform + log_pred, t)
        ancestors = multinomial_indices(np.exp(selection), n_particles, rng)
        mean = post_var * (params.phi * x[ancestors] / var_u + y[t] / var_v)
        x = mean + math.sqrt(post_var) * rng.standard_normal(n_particles)
        frames.append(FilterFrame(particles=x, log_weights=uniform, ancestors=ancestors))
    return frames


def filtered_means(frames: Sequence[FilterFrame]) -> np.ndarray:
    return np.array([np.exp(f.log_weights) @ f.particles for f in frames])


def filter_smoother(frames: Sequence[FilterFrame]) -> PathEnsemble:
    """Reconstruct full paths by following ancestor indices back from time T."""
    last = frames[-1]
    n = last.particles.size
    paths = np.empty((n, len(frames)))
    idx = np.arange(n)
    for t in range(len(frames) - 1, -1, -1):
        frame = frames[t]
        paths[:, t] = frame.particles[idx]
        if t > 0:
            ancestors = frame.ancestors
            if ancestors is None or ancestors.shape != (n,) or ancestors.min() < 0 or ancestors.max() >= n:
                raise ContractError(f"malformed ancestry at t={t}")
            idx = ancestors[idx]
    return PathEnsemble(paths=paths, log_weights=last.log_weights.copy())


def _exact_backward_indices(
    frame: FilterFrame,
    x_next: np.ndarray,
    model: HmmModel,
    rng: np.random.Generator,
    t: int,
) -> np.ndarray:
    chosen = np.empty(x_next.size, dtype=int)
    for start in range(0, x_next.size, _FALLBACK_CHUNK):
        block = x_next[start:start + _FALLBACK_CHUNK]
        log_p = frame.log_weights[None, :] + model.log_transition_density(frame.particles[None, :], block[:, None])
        norm = logsumexp(log_p, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            raise FilterCollapseError(t)
        cumulative = np.cumsum(np.exp(log_p - norm), axis=1)
        u = rng.random(block.size)[:, None] * cumulative[:, -1:]
        chosen[start:start + block.size] = np.minimum((u >= cumulative).sum(axis=1), frame.particles.size - 1)
    return chosen


def ffbsi(
    frames: Sequence[FilterFrame],
    model: HmmModel,
    n_out: int,
    rng: np.random.Generator,
    transition_density_bound: Optional[float] = None,
    max_attempts: int = FFBSI_MAX_ATTEMPTS,
) -> PathEnsemble:
    """
    Forward filtering backward simulation with accept-reject index draws.

    Each backward index is proposed from the filter weights and accepted
    with probability m(xi_t^j, x_{t+1}) / bound. Samples still pending after
    `max_attempts` proposals are drawn from the exact categorical law.
    """
    if n_out < 1:
        raise ConfigurationError(f"need at least one output path, got {n_out}")
    bound = model.transition_density_bound if transition_density_bound is None else transition_density_bound
    if not (bound > 0 and math.isfinite(bound)):
        raise ConfigurationError(f"FFBSi needs a finite positive transition density bound, got {bound}")
    log_bound = math.log(bound)

    horizon = len(frames)
    paths = np.empty((n_out, horizon))
    last = frames[-1]
    paths[:, -1] = last.particles[multinomial_indices(np.exp(last.log_weights), n_out, rng)]

    fallbacks = 0
    for t in range(horizon - 2, -1, -1):
        frame = frames[t]
        weights = np.exp(frame.log_weights)
        x_next = paths[:, t + 1]
        chosen = np.empty(n_out, dtype=int)
        pending = np.arange(n_out)
        for _ in range(max_attempts):
            if pending.size == 0:
                break
            candidates = multinomial_indices(weights, pending.size, rng)
            log_ratio = model.log_transition_density(frame.particles[candidates], x_next[pending]) - log_bound
            if np.any(log_ratio > 1e-9):
                raise ContractError(
                    f"transition density exceeds the supplied bound {bound} at t={t} "
                    f"(ratio {math.exp(float(np.max(log_ratio))):.6f})"
                )
            accept = np.log(rng.random(pending.size)) < log_ratio
            chosen[pending[accept]] = candidates[accept]
            pending = pending[~accept]
        if pending.size:
            fallbacks += pending.size
            chosen[pending] = _exact_backward_indices(frame, x_next[pending], model, rng, t)
        paths[:, t] = frame.particles[chosen]

    if fallbacks:
        logger.debug(f"[FFBSI] {fallbacks} backward draws used the exact categorical fallback")
    return PathEnsemble.equally_weighted(paths)
