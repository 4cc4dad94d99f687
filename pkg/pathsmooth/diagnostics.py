"""
Quantitative evaluation of smoother output.

- effective_sample_size: N_eff(t) = 1 / E[((estimate_t - mu_t) / sigma_t)^2]
- additive_functional: weighted estimate of sum_t x_t
- clt_variance_single_run: Var(h)/N from a single equally weighted population
- mse_vs_passes: empirical MSE against the number of improvement passes,
  for original and resampled weights, with the large-K limit
  Var(h) * E[sum w_i^2]
- hoeffding_bound: deviation bound for N independent chains
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from pathsmooth.config import k_schedule_log_n  # noqa: F401 (re-exported)
from pathsmooth.errors import (
    ConfigurationError,
    ContractError,
    InsufficientSampleError,
    PathSmoothError,
    RepetitionError,
)
from pathsmooth.exact import ExactMarginals
from pathsmooth.kernels import GibbsKernelFamily
from pathsmooth.mhips import mhips_improve
from pathsmooth.models import HmmModel, ObservationRecord
from pathsmooth.rng import map_repetitions, stream
from pathsmooth.smc import PathEnsemble, multinomial_resample

logger = logging.getLogger("pathsmooth.diagnostics")

WEIGHT_ORIGINAL = "original"
WEIGHT_RESAMPLED = "resampled"
WEIGHT_MODES = (WEIGHT_ORIGINAL, WEIGHT_RESAMPLED)

PathFunctional = Callable[[np.ndarray], np.ndarray]


def path_sum(paths: np.ndarray) -> np.ndarray:
    """H(x_{0:T}) = sum_t x_t for every row of an (N, T+1) array."""
    return np.asarray(paths).sum(axis=-1)


@dataclass(frozen=True)
class NeffReport:
    per_time_neff: np.ndarray
    repetitions: int
    estimator_values: Optional[np.ndarray] = None  # (R, T+1) normalized errors


def effective_sample_size(
    estimates: np.ndarray,
    oracle: ExactMarginals,
    retain_errors: bool = False,
) -> NeffReport:
    """
    Per-time effective sample size of a posterior-mean estimator.

    Where the exact variance is zero (a finite chain pinned to one state),
    a repetition that hits the mean contributes zero error and any other
    contributes an infinite one, so N_eff(t) is inf or 0.

    Args:
        estimates: (R, T+1) estimates of E[X_t | y_{0:T}], one row per repetition
        oracle: exact smoothing means and variances
        retain_errors: keep the (R, T+1) normalized errors on the report
    """
    estimates = np.asarray(estimates, dtype=float)
    if estimates.ndim != 2 or estimates.shape[0] < 2:
        raise InsufficientSampleError(f"need at least 2 repetitions, got shape {estimates.shape}")
    if estimates.shape[1] != oracle.horizon:
        raise ConfigurationError(f"estimates cover {estimates.shape[1]} steps, oracle covers {oracle.horizon}")

    sigma = np.sqrt(oracle.variances)
    raw = estimates - oracle.means
    point_mass = sigma == 0
    errors = np.divide(raw, sigma, out=np.copysign(np.where(raw == 0, 0.0, np.inf), raw), where=~point_mass)
    if np.any(point_mass):
        logger.warning(f"[NEFF] zero smoothing variance at t={np.flatnonzero(point_mass).tolist()}")
    mse = np.mean(errors**2, axis=0)
    with np.errstate(divide="ignore"):
        neff = np.where(mse > 0, 1.0 / np.where(mse > 0, mse, 1.0), np.inf)
    if np.any(np.isinf(neff)):
        logger.warning(
            f"[NEFF] zero empirical error at t={np.flatnonzero(np.isinf(neff)).tolist()}; "
            "estimates may coincide with the oracle"
        )
    return NeffReport(
        per_time_neff=neff,
        repetitions=estimates.shape[0],
        estimator_values=errors if retain_errors else None,
    )


def additive_functional(ensemble: PathEnsemble) -> float:
    """sum_i w_i sum_t xi^i_t."""
    return float(ensemble.weights @ path_sum(ensemble.paths))


@dataclass(frozen=True)
class CltReport:
    functional_mean: float
    variance_estimate_single_run: float
    n_particles: int
    k_used: int
    empirical_variance: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "mean": self.functional_mean,
            "var_single_run": self.variance_estimate_single_run,
            "var_empirical": self.empirical_variance,
            "n": self.n_particles,
            "k": self.k_used,
        }


def clt_variance_single_run(
    ensemble: PathEnsemble,
    h: PathFunctional = path_sum,
    k_used: int = 0,
    empirical_variance: Optional[float] = None,
) -> CltReport:
    """
    Estimate Var(h)/N from one equally weighted population after k_N passes.

    Raises:
        InsufficientSampleError: fewer than two particles
        ContractError: the weights are not all 1/N
    """
    n = ensemble.n_particles
    if n < 2:
        raise InsufficientSampleError(f"need at least 2 particles, got {n}")
    if not np.allclose(ensemble.weights, 1.0 / n, rtol=1e-9, atol=0.0):
        raise ContractError("single-run variance needs equal weights; resample first")
    values = np.asarray(h(ensemble.paths), dtype=float)
    return CltReport(
        functional_mean=float(values.mean()),
        variance_estimate_single_run=float(values.var(ddof=1) / n),
        n_particles=n,
        k_used=k_used,
        empirical_variance=empirical_variance,
    )


def confidence_interval(report: CltReport, level: float = 0.95) -> Tuple[float, float]:
    """mean +/- z_{1-a/2} sqrt(Var(h)/N) with a = 1 - level."""
    if not 0 < level < 1:
        raise ConfigurationError(f"confidence level must lie in (0, 1), got {level}")
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * math.sqrt(report.variance_estimate_single_run)
    return report.functional_mean - half, report.functional_mean + half


def predicted_mse_limit(variance: float, weights: np.ndarray) -> float:
    """Large-K MSE of sum_i w_i h(xi_i[K]): Var(h) * sum_i w_i^2."""
    return float(variance * np.sum(np.square(weights)))


def exact_functional_moments(paths: np.ndarray, probabilities: np.ndarray, h: PathFunctional = path_sum):
    """Mean and variance of h under an enumerated path law."""
    values = np.asarray(h(paths), dtype=float)
    mean = float(probabilities @ values)
    return mean, float(probabilities @ (values - mean) ** 2)


@dataclass(frozen=True)
class MseRow:
    k: int
    weight_mode: str
    mse: float
    predicted_limit: float
    mc_stderr: float


def mse_vs_passes(
    initializer: Callable[[np.random.Generator], PathEnsemble],
    model: HmmModel,
    obs: ObservationRecord,
    kernels: GibbsKernelFamily,
    k_schedule: Sequence[int],
    repetitions: int,
    seed: int,
    oracle_value: Optional[float],
    oracle_variance: Optional[float] = None,
    h: PathFunctional = path_sum,
    weight_modes: Sequence[str] = WEIGHT_MODES,
    threads: int = 1,
) -> List[MseRow]:
    """
    Empirical MSE of sum_i w_i h(xi_i[K]) at every K of a schedule.

    Both weight modes start each repetition from the same initial ensemble;
    "resampled" applies multinomial resampling before the passes, "original"
    keeps the initial weights. Passes accumulate along the schedule.
    """
    if oracle_value is None:
        raise ConfigurationError("mse_vs_passes needs the exact value of the functional")
    schedule = sorted(set(int(k) for k in k_schedule))
    if not schedule or schedule[0] < 0:
        raise ConfigurationError(f"invalid pass schedule {list(k_schedule)}", key="diagnostics.mse_k_schedule")
    for mode in weight_modes:
        if mode not in WEIGHT_MODES:
            raise ConfigurationError(f"unknown weight mode '{mode}'")

    def mse_repetition(r: int):
        initial = initializer(stream(seed, "mse-init", r))
        rows = []
        for m, mode in enumerate(weight_modes):
            rng = stream(seed, "mse-passes", m, r)
            ensemble = multinomial_resample(initial, rng) if mode == WEIGHT_RESAMPLED else initial
            weight_sq = float(np.sum(np.square(ensemble.weights)))
            estimates = []
            done = 0
            for k in schedule:
                ensemble, _ = mhips_improve(ensemble, model, obs, kernels, k - done, rng, resample_first=False)
                done = k
                estimates.append(float(ensemble.weights @ h(ensemble.paths)))
            rows.append((estimates, weight_sq))
        return rows

    def one_repetition(r: int):
        try:
            return mse_repetition(r)
        except PathSmoothError as e:
            raise RepetitionError(r, e) from e

    results = map_repetitions(one_repetition, repetitions, threads)

    table = []
    for m, mode in enumerate(weight_modes):
        estimates = np.array([rep[m][0] for rep in results])  # (R, len(schedule))
        weight_sq = np.array([rep[m][1] for rep in results])
        sq_errors = (estimates - oracle_value) ** 2
        limit = oracle_variance * float(weight_sq.mean()) if oracle_variance is not None else float("nan")
        for j, k in enumerate(schedule):
            stderr = float(sq_errors[:, j].std(ddof=1) / math.sqrt(repetitions)) if repetitions > 1 else float("nan")
            table.append(MseRow(k=k, weight_mode=mode, mse=float(sq_errors[:, j].mean()),
                                predicted_limit=limit, mc_stderr=stderr))
        logger.info(f"[MSE] {mode}: K={schedule[-1]} mse={sq_errors[:, -1].mean():.6g} limit={limit:.6g}")
    return table


def hoeffding_bound(osc_h: float, n_particles: int, epsilon: float) -> float:
    """2 exp(-N eps^2 / (2 osc(h)^2)); equals 2 (vacuous) at N = 0."""
    if not osc_h > 0:
        raise ConfigurationError(f"oscillation must be positive, got {osc_h}")
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if n_particles < 0:
        raise ConfigurationError(f"particle count must be >= 0, got {n_particles}")
    return 2.0 * math.exp(-n_particles * epsilon**2 / (2.0 * osc_h**2))
