"""
Single-site proposal kernel families for the MH-IPS backward passes.

A family bundles, for the left end (t=0), the interior and the right end
(t=T), a sampler r_t and the matching log proposal density. When the
sampler draws from the exact full conditional (`is_exact_gibbs`), the
log proposal density is the unnormalized full conditional itself so the
generic acceptance ratio still evaluates to one.
"""
import dataclasses
import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from pathsmooth.errors import ConfigurationError, EnvelopeViolationError, RejectionCapError
from pathsmooth.models import (
    HmmModel,
    LgmParams,
    StoVolParams,
    normal_logpdf,
    stovol_log_observation,
)

logger = logging.getLogger("pathsmooth.kernels")

REJECTION_CAP = 1_000_000
ENVELOPE_TOLERANCE = 1e-9

GAMMA_ADAPTIVE = "adaptive"
GAMMA_PRIOR = "prior"


class RejectionStats:
    """Proposal/accept counters of a rejection sampler, shared across calls."""

    def __init__(self) -> None:
        self.proposals = 0
        self.accepts = 0
        self._lock = threading.Lock()
        self._local = threading.local()

    def record(self, proposals: int, accepts: int) -> None:
        with self._lock:
            self.proposals += proposals
            self.accepts += accepts
        self._local.proposals = getattr(self._local, "proposals", 0) + proposals
        self._local.accepts = getattr(self._local, "accepts", 0) + accepts

    def thread_counts(self) -> Tuple[int, int]:
        """(proposals, accepts) recorded by the calling thread."""
        return getattr(self._local, "proposals", 0), getattr(self._local, "accepts", 0)

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else float("nan")

    def to_json(self) -> dict:
        return {
            "proposals": self.proposals,
            "accepts": self.accepts,
            "acceptance_rate": self.acceptance_rate if self.proposals else None,
        }


@dataclass(frozen=True)
class GibbsKernelFamily:
    name: str
    propose_interior: Callable  # (u, w, y, rng, size) -> x
    propose_left: Callable  # (w, y, rng, size) -> x; w is None when T = 0
    propose_right: Callable  # (u, y, rng, size) -> x
    log_proposal_interior: Callable  # (u, w, y, x) -> log r_t(u, w; x)
    log_proposal_left: Callable  # (w, y, x) -> log r_0(w; x)
    log_proposal_right: Callable  # (u, y, x) -> log r_T(u; x)
    is_exact_gibbs: bool
    # optional closed form of the log acceptance ratio: (v, x, y) -> log alpha
    closed_form_log_accept: Optional[Callable] = None
    rejection_stats: Optional[RejectionStats] = None

    def propose(self, t: int, horizon: int, u, w, y, rng: np.random.Generator, size) -> np.ndarray:
        if t == 0:
            return self.propose_left(w if horizon > 1 else None, y, rng, size)
        if t == horizon - 1:
            return self.propose_right(u, y, rng, size)
        return self.propose_interior(u, w, y, rng, size)

    def log_proposal(self, t: int, horizon: int, u, w, y, x) -> np.ndarray:
        if t == 0:
            return self.log_proposal_left(w if horizon > 1 else None, y, x)
        if t == horizon - 1:
            return self.log_proposal_right(u, y, x)
        return self.log_proposal_interior(u, w, y, x)

    def without_fast_path(self) -> "GibbsKernelFamily":
        """Same kernel, but every move goes through the generic MH test."""
        return dataclasses.replace(self, is_exact_gibbs=False, closed_form_log_accept=None)


def _gaussian_bridge(coef: float, var_step: float, init_var: float, u, w):
    """
    Moments of the Gaussian prior factor of X_t given its neighbours.

    `u=None` stands for the initial law N(0, init_var); `w=None` drops the
    forward factor m(x, w).
    """
    if u is None:
        precision, weighted = 1.0 / init_var, 0.0
    else:
        precision, weighted = 1.0 / var_step, coef * np.asarray(u) / var_step
    if w is not None:
        precision = precision + coef**2 / var_step
        weighted = weighted + coef * np.asarray(w) / var_step
    return weighted / precision, 1.0 / precision


def _normal_draw(mean, var, rng: np.random.Generator, size) -> np.ndarray:
    return np.broadcast_to(mean, size) + np.sqrt(var) * rng.standard_normal(size)


def lgm_full_conditional(params: LgmParams, u, w, y):
    """Mean and variance of X_t | u, w, y_t for the LGM (Gaussian, closed form)."""
    prior_mean, prior_var = _gaussian_bridge(params.phi, params.sigma_u**2, params.initial_variance, u, w)
    var_v = params.sigma_v**2
    precision = 1.0 / prior_var + 1.0 / var_v
    mean = (prior_mean / prior_var + y / var_v) / precision
    return mean, 1.0 / precision


def make_gibbs_kernel_lgm(params: LgmParams) -> GibbsKernelFamily:
    """Exact full-conditional sampler for the linear-Gaussian model."""

    def propose(u, w, y, rng, size):
        mean, var = lgm_full_conditional(params, u, w, y)
        return _normal_draw(mean, var, rng, size)

    def log_density(u, w, y, x):
        mean, var = lgm_full_conditional(params, u, w, y)
        return normal_logpdf(x, mean, var)

    return GibbsKernelFamily(
        name="lgm-gibbs",
        propose_interior=propose,
        propose_left=lambda w, y, rng, size: propose(None, w, y, rng, size),
        propose_right=lambda u, y, rng, size: propose(u, None, y, rng, size),
        log_proposal_interior=log_density,
        log_proposal_left=lambda w, y, x: log_density(None, w, y, x),
        log_proposal_right=lambda u, y, x: log_density(u, None, y, x),
        is_exact_gibbs=True,
    )


def gamma_stovol(y, beta: float):
    """Observation-dependent tilt: (|y|/beta)^2 below beta, |y|/beta above."""
    ratio = np.abs(y) / beta
    return np.where(ratio <= 1.0, ratio**2, ratio)


def stovol_bridge(params: StoVolParams, u, w):
    return _gaussian_bridge(params.alpha, params.sigma**2, params.initial_variance, u, w)


def stovol_proposal_moments(params: StoVolParams, u, w, y, gamma):
    """Gaussian proposal N(bridge mean - var (1 - gamma) / 2, bridge var)."""
    mean, var = stovol_bridge(params, u, w)
    return mean - 0.5 * var * (1.0 - gamma), var


def stovol_log_full_conditional(params: StoVolParams, u, w, y, x):
    """Unnormalized log density of X_t given its neighbours and y_t."""
    mean, var = stovol_bridge(params, u, w)
    return normal_logpdf(x, mean, var) + stovol_log_observation(x, y, params.beta)


def stovol_log_acceptance(x, y, gamma, beta: float):
    """
    log of (|y| / (sqrt(gamma) beta))^gamma exp{-gamma (x - 1) / 2 - e^{-x} y^2 / (2 beta^2)}.

    gamma^gamma is taken as 1 at gamma = 0.
    """
    x = np.asarray(x, dtype=float)
    tail = -0.5 * gamma * (x - 1.0) - np.exp(-x) * y**2 / (2.0 * beta**2)
    if gamma == 0:
        return tail
    if y == 0:
        return np.full(x.shape, -np.inf)
    return gamma * (math.log(abs(y)) - 0.5 * math.log(gamma) - math.log(beta)) + tail


def make_gibbs_kernel_stovol(
    params: StoVolParams,
    gamma_rule: str = GAMMA_ADAPTIVE,
    rejection_cap: int = REJECTION_CAP,
) -> GibbsKernelFamily:
    """
    Exact full-conditional sampler for the stochastic volatility model.

    Candidates come from the tilted Gaussian proposal and are accepted by
    rejection sampling. `gamma_rule="prior"` fixes gamma = 1, i.e. proposes
    from the prior bridge alone.
    """
    if gamma_rule not in (GAMMA_ADAPTIVE, GAMMA_PRIOR):
        raise ConfigurationError(f"unknown gamma rule '{gamma_rule}'", key="smoother.gamma_rule")
    beta = params.beta
    stats = RejectionStats()

    def sample(u, w, y, rng, size):
        gamma = float(gamma_stovol(y, beta)) if gamma_rule == GAMMA_ADAPTIVE else 1.0
        mean, var = stovol_proposal_moments(params, u, w, y, gamma)
        mean = np.broadcast_to(mean, size).ravel()
        sd = np.broadcast_to(np.sqrt(var), size).ravel()
        out = np.empty(mean.size)
        pending = np.arange(mean.size)
        rounds = proposals = 0
        while pending.size:
            rounds += 1
            if rounds > rejection_cap:
                stats.record(proposals, mean.size - pending.size)
                raise RejectionCapError(
                    f"rejection sampler exceeded {rejection_cap} rounds (y={y}, gamma={gamma}, "
                    f"{pending.size} draws pending)"
                )
            x = mean[pending] + sd[pending] * rng.standard_normal(pending.size)
            log_acc = stovol_log_acceptance(x, y, gamma, beta)
            if np.max(log_acc) > math.log1p(ENVELOPE_TOLERANCE):
                raise EnvelopeViolationError(
                    f"acceptance probability {math.exp(float(np.max(log_acc))):.12f} > 1 (y={y}, gamma={gamma})"
                )
            proposals += pending.size
            accepted = np.log(rng.random(pending.size)) < log_acc
            out[pending[accepted]] = x[accepted]
            pending = pending[~accepted]
        stats.record(proposals, mean.size)
        return out.reshape(size)

    return GibbsKernelFamily(
        name="stovol-gibbs",
        propose_interior=sample,
        propose_left=lambda w, y, rng, size: sample(None, w, y, rng, size),
        propose_right=lambda u, y, rng, size: sample(u, None, y, rng, size),
        log_proposal_interior=lambda u, w, y, x: stovol_log_full_conditional(params, u, w, y, x),
        log_proposal_left=lambda w, y, x: stovol_log_full_conditional(params, None, w, y, x),
        log_proposal_right=lambda u, y, x: stovol_log_full_conditional(params, u, None, y, x),
        is_exact_gibbs=True,
        rejection_stats=stats,
    )


def stovol_mwg_log_accept(params: StoVolParams, v, x, y):
    """min(0, -gamma (x - v) / 2 - (e^{-x} - e^{-v}) y^2 / (2 beta^2))."""
    gamma = gamma_stovol(y, params.beta)
    x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
    log_ratio = -0.5 * gamma * (x - v) - (np.exp(-x) - np.exp(-v)) * y**2 / (2.0 * params.beta**2)
    return np.minimum(0.0, log_ratio)


def make_mwg_kernel_stovol(params: StoVolParams) -> GibbsKernelFamily:
    """Metropolis-within-Gibbs: the tilted Gaussian proposal, MH-corrected."""

    def moments(u, w, y):
        return stovol_proposal_moments(params, u, w, y, gamma_stovol(y, params.beta))

    def propose(u, w, y, rng, size):
        mean, var = moments(u, w, y)
        return _normal_draw(mean, var, rng, size)

    def log_density(u, w, y, x):
        mean, var = moments(u, w, y)
        return normal_logpdf(x, mean, var)

    return GibbsKernelFamily(
        name="stovol-mwg",
        propose_interior=propose,
        propose_left=lambda w, y, rng, size: propose(None, w, y, rng, size),
        propose_right=lambda u, y, rng, size: propose(u, None, y, rng, size),
        log_proposal_interior=log_density,
        log_proposal_left=lambda w, y, x: log_density(None, w, y, x),
        log_proposal_right=lambda u, y, x: log_density(u, None, y, x),
        is_exact_gibbs=False,
        closed_form_log_accept=lambda v, x, y: stovol_mwg_log_accept(params, v, x, y),
    )


def _finite_conditional(model: HmmModel, u, w, y) -> np.ndarray:
    """(..., n) normalized log full conditional of X_t on a finite HMM."""
    fin = model.finite
    n = fin.n_states
    states = np.arange(n, dtype=float)
    if u is None:
        log_p = model.log_initial_density(states)
    else:
        log_p = model.log_transition_density(np.asarray(u)[..., None], states)
    log_p = log_p + model.log_observation_density(states, y)
    if w is not None:
        log_p = log_p + model.log_transition_density(states, np.asarray(w)[..., None])
    return log_p - logsumexp(log_p, axis=-1, keepdims=True)


def _require_finite(model: HmmModel) -> None:
    if model.finite is None:
        raise ConfigurationError(f"model '{model.name}' is not a finite-state HMM")


def make_gibbs_kernel_finite(model: HmmModel) -> GibbsKernelFamily:
    """Exact full conditional of a finite HMM, by enumeration of the states."""
    _require_finite(model)

    def propose(u, w, y, rng, size):
        log_p = np.broadcast_to(_finite_conditional(model, u, w, y), tuple(size) + (model.finite.n_states,))
        cumulative = np.cumsum(np.exp(log_p), axis=-1)
        u01 = rng.random(size)[..., None] * cumulative[..., -1:]
        return np.minimum((u01 >= cumulative).sum(axis=-1), model.finite.n_states - 1).astype(float)

    def log_density(u, w, y, x):
        log_p = _finite_conditional(model, u, w, y)
        idx = np.asarray(x).astype(int)
        log_p = np.broadcast_to(log_p, idx.shape + (log_p.shape[-1],))
        return np.take_along_axis(log_p, idx[..., None], axis=-1)[..., 0]

    return GibbsKernelFamily(
        name="finite-gibbs",
        propose_interior=propose,
        propose_left=lambda w, y, rng, size: propose(None, w, y, rng, size),
        propose_right=lambda u, y, rng, size: propose(u, None, y, rng, size),
        log_proposal_interior=log_density,
        log_proposal_left=lambda w, y, x: log_density(None, w, y, x),
        log_proposal_right=lambda u, y, x: log_density(u, None, y, x),
        is_exact_gibbs=True,
    )


def make_uniform_kernel_finite(model: HmmModel) -> GibbsKernelFamily:
    """Independent uniform proposal over the states, MH-corrected."""
    _require_finite(model)
    n = model.finite.n_states
    log_n = math.log(n)

    def propose(rng, size):
        return rng.integers(0, n, size=size).astype(float)

    def log_density(x):
        return np.full(np.shape(x), -log_n)

    return GibbsKernelFamily(
        name="finite-uniform",
        propose_interior=lambda u, w, y, rng, size: propose(rng, size),
        propose_left=lambda w, y, rng, size: propose(rng, size),
        propose_right=lambda u, y, rng, size: propose(rng, size),
        log_proposal_interior=lambda u, w, y, x: log_density(x),
        log_proposal_left=lambda w, y, x: log_density(x),
        log_proposal_right=lambda u, y, x: log_density(x),
        is_exact_gibbs=False,
    )
