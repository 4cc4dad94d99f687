"""
Metropolis-Hastings improvement passes over particle paths.

Each of the N paths seeds its own Metropolis-within-Gibbs chain. A pass
updates the components backward, t = T, T-1, ..., 0: X_t is proposed from
r_t given xi_{t-1} (previous pass) and xi_{t+1} (current pass) and accepted
with the single-site MH ratio. Only the states after the last pass are
returned, with the (post-resampling) weights.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from pathsmooth.errors import ConfigurationError, ContractError
from pathsmooth.kernels import GibbsKernelFamily
from pathsmooth.models import HmmModel, ObservationRecord
from pathsmooth.smc import PathEnsemble, multinomial_resample

logger = logging.getLogger("pathsmooth.mhips")


@dataclass
class MhipsTrace:
    acceptance_counts: np.ndarray  # (T+1,) accepted moves over chains and passes
    proposal_counts: np.ndarray  # (T+1,)
    per_pass_summaries: List[float] = field(default_factory=list)
    # per-site rejection-sampler draws, set only for kernels that keep RejectionStats
    rejection_proposals: Optional[np.ndarray] = None
    rejection_accepts: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, horizon: int, with_rejection: bool = False) -> "MhipsTrace":
        return cls(
            acceptance_counts=np.zeros(horizon, dtype=np.int64),
            proposal_counts=np.zeros(horizon, dtype=np.int64),
            rejection_proposals=np.zeros(horizon, dtype=np.int64) if with_rejection else None,
            rejection_accepts=np.zeros(horizon, dtype=np.int64) if with_rejection else None,
        )

    @property
    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.acceptance_counts / self.proposal_counts


def log_target(t: int, horizon: int, u, x, w, model: HmmModel, y) -> np.ndarray:
    """log of chi(x) or m(u, x), times g(x, y_t), times m(x, w) when t < T."""
    if t == 0:
        value = model.log_initial_density(x)
    else:
        value = model.log_transition_density(u, x)
    value = value + model.log_observation_density(x, y)
    if t < horizon - 1:
        value = value + model.log_transition_density(x, w)
    return value


def log_accept_ratio(
    t: int,
    u,
    v,
    w,
    x,
    model: HmmModel,
    kernels: GibbsKernelFamily,
    obs: ObservationRecord,
    use_closed_form: bool = True,
) -> np.ndarray:
    """
    log of the single-site MH acceptance probability for moving v -> x at t.

    `u` is ignored at t=0 and `w` at t=T. The result is min(0, log ratio).

    Raises:
        ContractError: the current state v has zero target density
    """
    horizon = obs.horizon
    if not 0 <= t < horizon:
        raise ConfigurationError(f"t={t} outside [0, {horizon - 1}]")
    y = obs.observations[t]
    if use_closed_form and kernels.closed_form_log_accept is not None:
        return kernels.closed_form_log_accept(v, x, y)

    target_v = log_target(t, horizon, u, v, w, model, y)
    if not np.all(np.isfinite(target_v)):
        raise ContractError(f"current state has zero posterior density at t={t}")
    target_x = log_target(t, horizon, u, x, w, model, y)
    log_ratio = (
        target_x
        - target_v
        + kernels.log_proposal(t, horizon, u, w, y, v)
        - kernels.log_proposal(t, horizon, u, w, y, x)
    )
    if np.any(np.isnan(log_ratio)):
        raise ContractError(f"non-finite acceptance ratio at t={t}")
    return np.minimum(0.0, log_ratio)


def mhips_improve(
    ensemble: PathEnsemble,
    model: HmmModel,
    obs: ObservationRecord,
    kernels: GibbsKernelFamily,
    n_passes: int,
    rng: np.random.Generator,
    resample_first: bool = True,
    pass_functional: Optional[Callable[[PathEnsemble], float]] = None,
):
    """
    Run `n_passes` backward Metropolis-within-Gibbs passes on every path.

    Returns:
        Tuple of (improved PathEnsemble, MhipsTrace)
    """
    if n_passes < 0:
        raise ConfigurationError(f"pass count must be >= 0, got {n_passes}", key="smoother.k_passes")
    if ensemble.horizon != obs.horizon:
        raise ConfigurationError(f"ensemble horizon {ensemble.horizon} != observation horizon {obs.horizon}")
    if model.state_dim != 1:
        raise ConfigurationError(f"only 1-D states are supported, got state_dim={model.state_dim}")

    if resample_first:
        ensemble = multinomial_resample(ensemble, rng)
    horizon, n = ensemble.horizon, ensemble.n_particles
    rejection = kernels.rejection_stats
    trace = MhipsTrace.empty(horizon, with_rejection=rejection is not None)
    if n_passes == 0:
        return ensemble, trace

    y = obs.observations
    paths = ensemble.paths.copy()
    for _ in range(n_passes):
        for t in range(horizon - 1, -1, -1):
            u = paths[:, t - 1] if t > 0 else None
            w = paths[:, t + 1] if t < horizon - 1 else None
            v = paths[:, t]
            if rejection is not None:
                before = rejection.thread_counts()
            x = kernels.propose(t, horizon, u, w, y[t], rng, v.shape)
            if rejection is not None:
                after = rejection.thread_counts()
                trace.rejection_proposals[t] += after[0] - before[0]
                trace.rejection_accepts[t] += after[1] - before[1]
            if kernels.is_exact_gibbs:
                paths[:, t] = x
                accepted = n
            else:
                log_alpha = log_accept_ratio(t, u, v, w, x, model, kernels, obs)
                move = np.log(rng.random(n)) < log_alpha
                paths[move, t] = x[move]
                accepted = int(move.sum())
            trace.acceptance_counts[t] += accepted
            trace.proposal_counts[t] += n
        if pass_functional is not None:
            trace.per_pass_summaries.append(pass_functional(PathEnsemble(paths.copy(), ensemble.log_weights)))

    logger.debug(
        f"[MHIPS] {kernels.name}: N={n} K={n_passes} "
        f"mean acceptance={trace.acceptance_counts.sum() / trace.proposal_counts.sum():.3f}"
    )
    return PathEnsemble(paths=paths, log_weights=ensemble.log_weights.copy()), trace


def _all_paths(n_states: int, horizon: int) -> np.ndarray:
    grids = np.meshgrid(*([np.arange(n_states)] * horizon), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(float)


def single_site_matrix(
    t: int,
    model: HmmModel,
    obs: ObservationRecord,
    kernels: GibbsKernelFamily,
) -> np.ndarray:
    """
    Transition matrix over every path of a finite HMM for the update of X_t.

    Paths are indexed in lexicographic order (as in `enumerate_smoothing`).
    """
    if model.finite is None:
        raise ConfigurationError(f"model '{model.name}' is not a finite-state HMM")
    n, horizon = model.finite.n_states, obs.horizon
    shape = (n,) * horizon
    paths = _all_paths(n, horizon)
    size = paths.shape[0]
    u = paths[:, t - 1] if t > 0 else None
    w = paths[:, t + 1] if t < horizon - 1 else None
    v = paths[:, t]
    y = obs.observations[t]

    # zero-probability paths keep an identity row
    live = np.isfinite(log_target(t, horizon, u, v, w, model, y))
    rows = np.flatnonzero(live)
    u_live = u[live] if u is not None else None
    w_live = w[live] if w is not None else None

    matrix = np.zeros((size, size))
    for state in range(n):
        x = np.full(rows.size, float(state))
        q = np.exp(kernels.log_proposal(t, horizon, u_live, w_live, y, x))
        if kernels.is_exact_gibbs:
            alpha = np.ones(rows.size)
        else:
            alpha = np.exp(log_accept_ratio(t, u_live, v[live], w_live, x, model, kernels, obs))
        moved = paths[live].copy()
        moved[:, t] = state
        cols = np.ravel_multi_index(tuple(moved.T.astype(int)), shape)
        np.add.at(matrix, (rows, cols), q * alpha)
    diagonal = np.arange(size)
    matrix[diagonal, diagonal] += 1.0 - matrix.sum(axis=1)
    return matrix


def backward_pass_matrix(model: HmmModel, obs: ObservationRecord, kernels: GibbsKernelFamily) -> np.ndarray:
    """One full backward pass t = T .. 0 as a single path-space transition matrix."""
    result = None
    for t in range(obs.horizon - 1, -1, -1):
        site = single_site_matrix(t, model, obs, kernels)
        result = site if result is None else result @ site
    return result
