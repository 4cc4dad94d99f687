"""
Experiment orchestration: builds the model, kernels and oracle from an
ExperimentConfig, runs seeded repetitions of the configured pipeline and
writes every report plus a manifest.json into the output directory.

Repetition r of a command always draws from stream(seed, <command>, ..., r),
so outputs do not depend on the thread count.
"""
import dataclasses
import logging
import math
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy

from pathsmooth import __version__
from pathsmooth.config import ExperimentConfig, config_hash, dump_config
from pathsmooth.diagnostics import (
    CltReport,
    clt_variance_single_run,
    effective_sample_size,
    exact_functional_moments,
    mse_vs_passes,
    path_sum,
)
from pathsmooth.errors import ConfigurationError, PathSmoothError, RepetitionError
from pathsmooth.exact import ExactMarginals, enumerate_smoothing, finite_smoother, grid_smoother, kalman_smoother
from pathsmooth.formats import (
    fmt,
    read_observations,
    write_clt_json,
    write_ensemble_binary,
    write_ensemble_csv,
    write_json,
    write_marginals_csv,
    write_moments_csv,
    write_mse_csv,
    write_neff_csv,
    write_observations_csv,
    write_rows,
    write_trace_csv,
)
from pathsmooth.kernels import (
    GibbsKernelFamily,
    make_gibbs_kernel_finite,
    make_gibbs_kernel_lgm,
    make_gibbs_kernel_stovol,
    make_mwg_kernel_stovol,
    make_uniform_kernel_finite,
)
from pathsmooth.mhips import MhipsTrace, mhips_improve
from pathsmooth.models import HmmModel, ObservationRecord, make_finite_hmm, make_lgm, make_stovol, simulate
from pathsmooth.rng import map_repetitions, stream
from pathsmooth.smc import (
    PathEnsemble,
    bootstrap_filter,
    ffbsi,
    filter_smoother,
    fully_adapted_filter_lgm,
    multinomial_resample,
)

logger = logging.getLogger("pathsmooth.harness")

CALIBRATION_PROBES = 3
# exhaustive path enumeration is refused above this many paths
MAX_ENUMERATED_PATHS = 2_000_000


@dataclass(frozen=True)
class Experiment:
    config: ExperimentConfig
    model: HmmModel
    obs: ObservationRecord
    kernels: GibbsKernelFamily


@dataclass(frozen=True)
class PipelineResult:
    ensemble: PathEnsemble
    trace: Optional[MhipsTrace] = None


@dataclass
class Manifest:
    command: str
    config_hash: str
    seeds: Dict[str, int] = field(default_factory=dict)
    calibrated_n: Dict[str, int] = field(default_factory=dict)
    wall_times: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    rejection_sampler: Optional[dict] = None

    def to_json(self) -> dict:
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "calibrated_n": self.calibrated_n,
            "wall_times": self.wall_times,
            "outputs": self.outputs,
            "versions": {
                "pathsmooth": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        }
        if self.rejection_sampler is not None:
            payload["rejection_sampler"] = self.rejection_sampler
        return payload


def build_model(config: ExperimentConfig) -> HmmModel:
    if config.model_kind == "lgm":
        return make_lgm(config.model_params())
    if config.model_kind == "stovol":
        return make_stovol(config.model_params())
    return make_finite_hmm(
        len(config.finite_initial), config.finite_transition, config.finite_emission, config.finite_initial
    )


def build_kernels(config: ExperimentConfig, model: HmmModel) -> GibbsKernelFamily:
    """
    Kernel family for the configured model:

    - lgm: exact Gibbs; "mwg" runs the same proposal through the generic MH test
    - stovol: rejection-sampled Gibbs or the tilted-Gaussian MwG kernel
    - finite: enumerated Gibbs or an MH-corrected uniform proposal
    """
    gibbs = config.kernel_kind == "gibbs"
    if config.model_kind == "lgm":
        kernels = make_gibbs_kernel_lgm(config.model_params())
        return kernels if gibbs else kernels.without_fast_path()
    if config.model_kind == "stovol":
        params = config.model_params()
        return make_gibbs_kernel_stovol(params) if gibbs else make_mwg_kernel_stovol(params)
    return make_gibbs_kernel_finite(model) if gibbs else make_uniform_kernel_finite(model)


def load_observations(config: ExperimentConfig, model: HmmModel) -> ObservationRecord:
    """Read `observations_path` when set, otherwise simulate T+1 steps from the seed."""
    if config.observations_path:
        obs = read_observations(config.observations_path)
        if obs.horizon != config.horizon:
            logger.info(f"observation file has {obs.horizon} steps; overriding horizon={config.horizon}")
        return obs
    return simulate(model, config.horizon, config.seed)


def prepare(config: ExperimentConfig) -> Experiment:
    model = build_model(config)
    return Experiment(config=config, model=model, obs=load_observations(config, model), kernels=build_kernels(config, model))


def oracle_marginals(experiment: Experiment) -> ExactMarginals:
    """Exact smoothing means/variances: Kalman, grid quadrature or forward-backward."""
    config = experiment.config
    if config.model_kind == "lgm":
        return kalman_smoother(config.model_params(), experiment.obs)
    if config.model_kind == "stovol":
        return grid_smoother(experiment.model, experiment.obs, n_points=config.grid_points)
    return finite_smoother(experiment.model, experiment.obs)


def oracle_functional(experiment: Experiment) -> Tuple[float, Optional[float]]:
    """
    Exact smoothing mean of sum_t X_t, and its variance when the path law
    can be enumerated (finite models only).
    """
    model, obs = experiment.model, experiment.obs
    if model.finite is not None:
        n_paths = model.finite.n_states**obs.horizon
        if n_paths > MAX_ENUMERATED_PATHS:
            raise ConfigurationError(
                f"{n_paths} paths are too many to enumerate; shorten the horizon", key="hmm.horizon"
            )
        paths, probs = enumerate_smoothing(model, obs)
        return exact_functional_moments(paths, probs, path_sum)
    return float(oracle_marginals(experiment).means.sum()), None


def initial_ensemble(
    experiment: Experiment,
    n_particles: int,
    rng: np.random.Generator,
    algorithm: Optional[str] = None,
) -> PathEnsemble:
    """Filter-Smoother or FFBSi paths from one forward filter run."""
    config = experiment.config
    algorithm = algorithm or config.algorithm
    if config.filter_kind == "fully_adapted":
        frames = fully_adapted_filter_lgm(config.model_params(), experiment.obs, n_particles, rng)
    else:
        frames = bootstrap_filter(experiment.model, experiment.obs, n_particles, rng, config.resample_policy)
    if algorithm in ("ffbsi", "mhi_ffbsi"):
        return ffbsi(frames, experiment.model, n_particles, rng)
    return filter_smoother(frames)


def run_pipeline(
    experiment: Experiment,
    n_particles: int,
    k_passes: int,
    rng: np.random.Generator,
    algorithm: Optional[str] = None,
) -> PipelineResult:
    """Initial smoother followed, for the MH-IPS algorithms, by `k_passes` improvement passes."""
    config = experiment.config
    algorithm = algorithm or config.algorithm
    ensemble = initial_ensemble(experiment, n_particles, rng, algorithm)
    if algorithm not in ("mhifs", "mhi_ffbsi"):
        return PipelineResult(ensemble=ensemble)
    ensemble, trace = mhips_improve(
        ensemble, experiment.model, experiment.obs, experiment.kernels, k_passes, rng,
        resample_first=config.resample_first,
    )
    return PipelineResult(ensemble=ensemble, trace=trace)


def run_repetitions(fn: Callable[[int], object], config: ExperimentConfig) -> list:
    """map_repetitions over config.repetitions, tagging failures with their repetition."""

    def guarded(r: int):
        try:
            return fn(r)
        except RepetitionError:
            raise
        except PathSmoothError as e:
            raise RepetitionError(r, e) from e

    return map_repetitions(guarded, config.repetitions, config.threads)


def _start(command: str, config: ExperimentConfig) -> Tuple[Manifest, Path]:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(command=command, config_hash=config_hash(config))
    manifest.seeds["experiment"] = config.seed
    (out / "config.toml").write_text(dump_config(config), encoding="utf-8")
    manifest.outputs.append("config.toml")
    return manifest, out


def _finish(manifest: Manifest, out: Path, experiment: Optional[Experiment] = None) -> Manifest:
    if experiment is not None:
        _report_rejection(experiment, manifest)
    manifest.outputs.append("manifest.json")
    write_json(manifest.to_json(), out / "manifest.json")
    logger.info(f"{manifest.command}: wrote {len(manifest.outputs)} files to {out}")
    return manifest


def _report_rejection(experiment: Experiment, manifest: Manifest) -> None:
    stats = experiment.kernels.rejection_stats
    if stats is None or stats.proposals == 0:
        return
    manifest.rejection_sampler = stats.to_json()
    logger.info(
        f"[REJECTION] {experiment.kernels.name}: proposals={stats.proposals} accepts={stats.accepts} "
        f"rate={stats.acceptance_rate:.4f}"
    )


def _record(manifest: Manifest, out: Path, path: Path) -> None:
    manifest.outputs.append(str(path.relative_to(out)))


def _resolve_particles(config: ExperimentConfig, manifest: Manifest) -> ExperimentConfig:
    if config.cpu_budget <= 0:
        return config
    calibrated = calibrate_particles(config, config.cpu_budget, algorithms=(config.algorithm,))
    manifest.calibrated_n.update(calibrated)
    return dataclasses.replace(config, n_particles=calibrated[config.algorithm])


def _write_observations(experiment: Experiment, manifest: Manifest, out: Path) -> None:
    manifest.seeds["observations"] = experiment.obs.seed
    _record(manifest, out, write_observations_csv(experiment.obs, out / "observations.csv"))


def run_simulate(config: ExperimentConfig) -> Manifest:
    manifest, out = _start("simulate", config)
    started = time.perf_counter()
    model = build_model(config)
    obs = simulate(model, config.horizon, config.seed)
    manifest.wall_times["simulate"] = time.perf_counter() - started
    manifest.seeds["observations"] = obs.seed
    _record(manifest, out, write_observations_csv(obs, out / "observations.csv"))
    return _finish(manifest, out)


def _write_single_run(result: PipelineResult, manifest: Manifest, out: Path) -> None:
    ensemble = result.ensemble
    _record(manifest, out, write_ensemble_csv(ensemble, out / "ensemble.csv"))
    _record(manifest, out, write_ensemble_binary(ensemble, out / "ensemble.bin"))
    means = ensemble.marginal_means()
    variances = np.maximum(ensemble.weights @ ensemble.paths**2 - means**2, 0.0)
    _record(manifest, out, write_moments_csv(means, variances, out / "marginals.csv"))
    if result.trace is not None:
        _record(manifest, out, write_trace_csv(result.trace, out / "trace.csv"))


def run_smooth(config: ExperimentConfig) -> Manifest:
    """One run of the configured smoother (repetition 0), dumped as an ensemble."""
    manifest, out = _start("smooth", config)
    config = _resolve_particles(config, manifest)
    experiment = prepare(config)
    _write_observations(experiment, manifest, out)

    started = time.perf_counter()
    k = config.passes_for(config.n_particles)
    try:
        result = run_pipeline(experiment, config.n_particles, k, stream(config.seed, "smooth", 0))
    except PathSmoothError as e:
        raise RepetitionError(0, e) from e
    manifest.wall_times["smooth"] = time.perf_counter() - started
    _write_single_run(result, manifest, out)
    return _finish(manifest, out, experiment)


def _marginal_estimates(experiment: Experiment, config: ExperimentConfig) -> np.ndarray:
    k = config.passes_for(config.n_particles)

    def one(r: int) -> np.ndarray:
        result = run_pipeline(experiment, config.n_particles, k, stream(config.seed, "neff", r))
        return result.ensemble.marginal_means()

    return np.array(run_repetitions(one, config))


def run_neff(config: ExperimentConfig) -> Manifest:
    """N_eff(t) of the posterior-mean estimator over R repetitions."""
    manifest, out = _start("neff", config)
    config = _resolve_particles(config, manifest)
    experiment = prepare(config)
    _write_observations(experiment, manifest, out)
    oracle = oracle_marginals(experiment)
    _record(manifest, out, write_marginals_csv(oracle, out / "oracle.csv"))

    started = time.perf_counter()
    estimates = _marginal_estimates(experiment, config)
    manifest.wall_times["neff"] = time.perf_counter() - started
    report = effective_sample_size(estimates, oracle)
    _record(manifest, out, write_neff_csv(report, out / "neff.csv"))
    logger.info(
        f"{config.algorithm}: N={config.n_particles} R={config.repetitions} "
        f"N_eff min={report.per_time_neff.min():.1f} max={report.per_time_neff.max():.1f}"
    )
    return _finish(manifest, out, experiment)


def clt_study(experiment: Experiment, n_particles: int) -> Tuple[CltReport, float]:
    """
    R runs at N particles with the configured pass schedule.

    Returns the single-run report of repetition 0 (carrying the empirical
    variance of the estimate across repetitions) and the mean single-run
    variance estimate over all repetitions.
    """
    config = experiment.config
    k = config.passes_for(n_particles)

    def one(r: int) -> CltReport:
        rng = stream(config.seed, "clt", n_particles, r)
        ensemble = run_pipeline(experiment, n_particles, k, rng).ensemble
        if not np.allclose(ensemble.weights, 1.0 / n_particles, rtol=1e-9, atol=0.0):
            ensemble = multinomial_resample(ensemble, rng)
        return clt_variance_single_run(ensemble, path_sum, k_used=k)

    reports = run_repetitions(one, config)
    means = np.array([rep.functional_mean for rep in reports])
    empirical = float(means.var(ddof=1)) if means.size > 1 else None
    first = reports[0]
    report = CltReport(
        functional_mean=first.functional_mean,
        variance_estimate_single_run=first.variance_estimate_single_run,
        n_particles=n_particles,
        k_used=k,
        empirical_variance=empirical,
    )
    return report, float(np.mean([rep.variance_estimate_single_run for rep in reports]))


def run_clt(config: ExperimentConfig, n_values: Optional[Sequence[int]] = None) -> Manifest:
    """Single-run CLT variance against the across-repetition variance, for each N."""
    manifest, out = _start("clt", config)
    experiment = prepare(config)
    _write_observations(experiment, manifest, out)
    n_values = tuple(n_values) if n_values else config.clt_n_values

    rows = []
    for n in n_values:
        started = time.perf_counter()
        report, mean_single_run = clt_study(experiment, n)
        manifest.wall_times[f"clt_n{n}"] = time.perf_counter() - started
        _record(manifest, out, write_clt_json(report, out / f"clt_n{n}.json"))
        empirical = report.empirical_variance
        rows.append([n, report.k_used, fmt(mean_single_run), fmt(empirical if empirical is not None else math.nan)])
        logger.info(f"[CLT] N={n} k={report.k_used} var_single_run={mean_single_run:.6g} var_empirical={empirical}")
    path = write_rows(out / "clt.csv", ["n", "k", "var_single_run_mean", "var_empirical"], rows)
    _record(manifest, out, path)
    return _finish(manifest, out, experiment)


def run_mse_passes(config: ExperimentConfig) -> Manifest:
    """Empirical MSE of the additive functional along config.mse_k_schedule."""
    manifest, out = _start("mse-passes", config)
    config = _resolve_particles(config, manifest)
    experiment = prepare(config)
    _write_observations(experiment, manifest, out)
    value, variance = oracle_functional(experiment)

    def initializer(rng: np.random.Generator) -> PathEnsemble:
        return initial_ensemble(experiment, config.n_particles, rng)

    started = time.perf_counter()
    rows = mse_vs_passes(
        initializer, experiment.model, experiment.obs, experiment.kernels,
        config.mse_k_schedule, config.repetitions, config.seed,
        oracle_value=value, oracle_variance=variance, threads=config.threads,
    )
    manifest.wall_times["mse-passes"] = time.perf_counter() - started
    _record(manifest, out, write_mse_csv(rows, out / "mse.csv"))
    return _finish(manifest, out, experiment)


def run_experiment(config: ExperimentConfig) -> Manifest:
    """
    Full configured experiment: observations, R seeded repetitions, then the
    ensemble dump of repetition 0 plus N_eff and CLT reports when R and N
    allow them.
    """
    manifest, out = _start("experiment", config)
    config = _resolve_particles(config, manifest)
    experiment = prepare(config)
    _write_observations(experiment, manifest, out)
    n, k = config.n_particles, config.passes_for(config.n_particles)

    def one(r: int) -> PipelineResult:
        return run_pipeline(experiment, n, k, stream(config.seed, "experiment", r))

    started = time.perf_counter()
    results = run_repetitions(one, config)
    manifest.wall_times["repetitions"] = time.perf_counter() - started
    manifest.seeds["repetitions"] = config.repetitions
    _write_single_run(results[0], manifest, out)

    if config.repetitions >= 2:
        oracle = oracle_marginals(experiment)
        _record(manifest, out, write_marginals_csv(oracle, out / "oracle.csv"))
        estimates = np.array([res.ensemble.marginal_means() for res in results])
        _record(manifest, out, write_neff_csv(effective_sample_size(estimates, oracle), out / "neff.csv"))
    else:
        logger.info("N_eff needs at least 2 repetitions; skipped")

    if n >= 2:
        functionals = np.array([res.ensemble.weights @ path_sum(res.ensemble.paths) for res in results])
        first = results[0].ensemble
        if not np.allclose(first.weights, 1.0 / n, rtol=1e-9, atol=0.0):
            first = multinomial_resample(first, stream(config.seed, "experiment-clt"))
        report = clt_variance_single_run(
            first, path_sum, k_used=k,
            empirical_variance=float(functionals.var(ddof=1)) if functionals.size > 1 else None,
        )
        _record(manifest, out, write_clt_json(report, out / "clt.json"))
    else:
        logger.info("single-run variance needs at least 2 particles; skipped")
    return _finish(manifest, out, experiment)


def fit_linear_cost(n_values: Sequence[float], seconds: Sequence[float]) -> Tuple[float, float]:
    """
    Least-squares fit of seconds = a * N through the origin.

    Returns:
        Tuple of (a, R^2) with R^2 = 1 - SS_res / SS_tot about the mean
    """
    n = np.asarray(n_values, dtype=float)
    s = np.asarray(seconds, dtype=float)
    if n.size < 1 or n.shape != s.shape or not np.all(n > 0):
        raise ConfigurationError(f"cannot fit a cost line to N={n.tolist()} seconds={s.tolist()}")
    slope = float(n @ s / (n @ n))
    ss_res = float(np.sum((s - slope * n) ** 2))
    ss_tot = float(np.sum((s - s.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, r_squared


def fit_particle_counts(
    probe_seconds: Mapping[str, Sequence[float]],
    probe_n: int,
    target_seconds: float,
) -> Dict[str, int]:
    """N per algorithm such that a * N matches the budget, a = median probe time / probe_n."""
    if not target_seconds > 0:
        raise ConfigurationError(f"target must be positive, got {target_seconds}", key="experiment.cpu_budget")
    counts = {}
    for algorithm, seconds in probe_seconds.items():
        slope, _ = fit_linear_cost([probe_n], [statistics.median(seconds)])
        if not slope > 0:
            raise ConfigurationError(f"{algorithm}: probe took no measurable time at N={probe_n}; raise the probe N")
        counts[algorithm] = max(1, int(round(target_seconds / slope)))
    return counts


def calibrate_particles(
    config: ExperimentConfig,
    target_seconds: float,
    algorithms: Optional[Sequence[str]] = None,
    timer: Callable[[], float] = time.perf_counter,
) -> Dict[str, int]:
    """
    Particle count per algorithm that spends `target_seconds` per run.

    Each algorithm is timed CALIBRATION_PROBES times at the probe N (the
    algorithm call only) and the median is extrapolated linearly.
    """
    if not target_seconds > 0:
        raise ConfigurationError(f"target must be positive, got {target_seconds}", key="experiment.cpu_budget")
    algorithms = tuple(algorithms or config.calibration_algorithms)
    probe_n = config.calibration_probe_n
    experiment = prepare(config)

    probe_seconds = {}
    for a, algorithm in enumerate(algorithms):
        k = config.passes_for(probe_n) if algorithm in ("mhifs", "mhi_ffbsi") else 0
        times = []
        for p in range(CALIBRATION_PROBES):
            rng = stream(config.seed, "calibrate", a, p)
            started = timer()
            run_pipeline(experiment, probe_n, k, rng, algorithm=algorithm)
            times.append(timer() - started)
        probe_seconds[algorithm] = times
        logger.info(
            f"[CALIBRATE] {algorithm}: N={probe_n} K={k} probes="
            f"{', '.join(f'{s:.4f}s' for s in times)}"
        )

    counts = fit_particle_counts(probe_seconds, probe_n, target_seconds)
    logger.info(f"[CALIBRATE] budget {target_seconds}s -> {counts}")
    return counts


def run_calibrate(config: ExperimentConfig, target_seconds: Optional[float] = None) -> Manifest:
    manifest, out = _start("calibrate", config)
    target = target_seconds if target_seconds is not None else config.cpu_budget
    started = time.perf_counter()
    counts = calibrate_particles(config, target)
    manifest.wall_times["calibrate"] = time.perf_counter() - started
    manifest.calibrated_n.update(counts)
    _record(manifest, out, write_json({"target_seconds": target, "n_particles": counts}, out / "calibration.json"))
    return _finish(manifest, out)
