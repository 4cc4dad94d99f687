import dataclasses
import json
import logging
import time

import numpy as np
import pytest

from pathsmooth.config import ExperimentConfig, config_hash
from pathsmooth.errors import ConfigurationError, FilterCollapseError, RepetitionError
from pathsmooth.exact import enumerate_smoothing
from pathsmooth.formats import read_ensemble_binary
from pathsmooth.harness import (
    build_kernels,
    build_model,
    calibrate_particles,
    fit_linear_cost,
    fit_particle_counts,
    oracle_functional,
    prepare,
    run_clt,
    run_experiment,
    run_mse_passes,
    run_neff,
    run_pipeline,
    run_simulate,
    run_smooth,
)
from pathsmooth.rng import stream


class _FakeClock:
    """Stand-in for time.perf_counter: every call advances by `step` seconds."""

    def __init__(self, step: float) -> None:
        self.step = step
        self.now = 0.0

    def __call__(self) -> float:
        self.now += self.step
        return self.now


def _small(tmp_path, **changes) -> ExperimentConfig:
    base = ExperimentConfig(horizon=11, n_particles=30, k_passes=2, repetitions=4, seed=5, output_dir=str(tmp_path))
    return dataclasses.replace(base, **changes)


def _impossible_finite(tmp_path) -> ExperimentConfig:
    obs = tmp_path / "impossible.csv"
    obs.write_text("t,y\n0,0\n1,1\n")
    return _small(
        tmp_path / "out",
        model_kind="finite",
        finite_transition=((1.0, 0.0), (0.0, 1.0)),
        finite_emission=((1.0, 0.0), (0.0, 1.0)),
        finite_initial=(1.0, 0.0),
        observations_path=str(obs),
    )


def test_single_path_experiment(tmp_path):
    cfg = _small(tmp_path, repetitions=1, k_passes=0, algorithm="filter_smoother", n_particles=1)
    manifest = run_experiment(cfg)
    payload = json.loads((tmp_path / "manifest.json").read_text())
    assert set(payload) >= {"config_hash", "seeds", "calibrated_n", "wall_times", "outputs", "versions"}
    assert payload["config_hash"] == config_hash(cfg)
    assert "ensemble.bin" in manifest.outputs
    assert "neff.csv" not in manifest.outputs
    ensemble = read_ensemble_binary(tmp_path / "ensemble.bin")
    assert ensemble.paths.shape == (1, 11)


def test_identical_runs_are_byte_identical(tmp_path):
    first = run_smooth(_small(tmp_path / "a"))
    second = run_smooth(_small(tmp_path / "b"))
    assert first.outputs == second.outputs
    for name in first.outputs:
        if name in ("manifest.json", "config.toml"):
            continue
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_thread_count_does_not_change_neff(tmp_path):
    serial = run_neff(_small(tmp_path / "serial", threads=1))
    threaded = run_neff(_small(tmp_path / "threaded", threads=4))
    assert serial.outputs == threaded.outputs
    assert (tmp_path / "serial" / "neff.csv").read_bytes() == (tmp_path / "threaded" / "neff.csv").read_bytes()


def test_neff_output_has_one_row_per_time(tmp_path):
    run_neff(_small(tmp_path))
    lines = (tmp_path / "neff.csv").read_text().splitlines()
    assert lines[0] == "t,neff"
    assert len(lines) == 1 + 11


def test_neff_with_identifying_emissions(tmp_path):
    cfg = _small(
        tmp_path,
        model_kind="finite",
        horizon=4,
        finite_transition=((0.5, 0.5), (0.5, 0.5)),
        finite_emission=((1.0, 0.0), (0.0, 1.0)),
        finite_initial=(0.5, 0.5),
    )
    run_neff(cfg)
    oracle = (tmp_path / "oracle.csv").read_text().splitlines()[1:]
    assert [float(line.split(",")[2]) for line in oracle] == [0.0] * 4
    neff = [float(line.split(",")[1]) for line in (tmp_path / "neff.csv").read_text().splitlines()[1:]]
    assert len(neff) == 4
    assert all(v == 0.0 or v == float("inf") for v in neff)


def test_experiment_writes_neff_and_clt(tmp_path):
    manifest = run_experiment(_small(tmp_path))
    assert {"neff.csv", "clt.json", "oracle.csv", "trace.csv", "observations.csv"} <= set(manifest.outputs)
    clt = json.loads((tmp_path / "clt.json").read_text())
    assert clt["n"] == 30 and clt["k"] == 2
    assert clt["var_empirical"] > 0


def test_clt_uses_the_log_schedule(tmp_path):
    cfg = _small(tmp_path, k_schedule="log_n", repetitions=3, horizon=6)
    run_clt(cfg, n_values=[100])
    report = json.loads((tmp_path / "clt_n100.json").read_text())
    assert report["k"] == 10
    assert report["n"] == 100


def test_mse_passes_on_finite_model(tmp_path):
    cfg = _small(tmp_path, model_kind="finite", horizon=4, mse_k_schedule=(0, 1, 3), repetitions=5)
    run_mse_passes(cfg)
    lines = (tmp_path / "mse.csv").read_text().splitlines()
    assert lines[0] == "k,weight_mode,mse,predicted_limit"
    assert len(lines) == 1 + 6


def test_simulate_writes_observations(tmp_path):
    manifest = run_simulate(_small(tmp_path))
    assert manifest.seeds["observations"] == 5
    assert len((tmp_path / "observations.csv").read_text().splitlines()) == 12


def test_algorithm_errors_carry_the_repetition(tmp_path):
    with pytest.raises(RepetitionError) as exc:
        run_smooth(_impossible_finite(tmp_path))
    assert exc.value.repetition == 0
    assert isinstance(exc.value.cause, FilterCollapseError)


def test_rejection_sampler_is_reported(tmp_path, caplog, monkeypatch):
    monkeypatch.setattr(logging.getLogger("pathsmooth"), "propagate", True)
    caplog.set_level(logging.INFO, logger="pathsmooth.harness")
    manifest = run_smooth(_small(tmp_path, model_kind="stovol", kernel_kind="gibbs"))

    payload = json.loads((tmp_path / "manifest.json").read_text())
    counts = payload["rejection_sampler"]
    assert counts == manifest.rejection_sampler
    assert counts["accepts"] == 30 * 2 * 11
    assert 0 < counts["acceptance_rate"] <= 1
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,proposals,accepts,rejection_proposals,rejection_accepts"
    assert sum(int(line.split(",")[4]) for line in lines[1:]) == counts["accepts"]
    assert any("[REJECTION] stovol-gibbs" in r.getMessage() for r in caplog.records)


def test_lgm_runs_carry_no_rejection_report(tmp_path):
    run_smooth(_small(tmp_path))
    assert "rejection_sampler" not in json.loads((tmp_path / "manifest.json").read_text())
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "t,proposals,accepts"


def test_kernel_selection():
    lgm = ExperimentConfig()
    assert build_kernels(lgm, build_model(lgm)).is_exact_gibbs
    assert not build_kernels(dataclasses.replace(lgm, kernel_kind="mwg"), build_model(lgm)).is_exact_gibbs
    stovol = ExperimentConfig(model_kind="stovol", kernel_kind="mwg")
    assert build_kernels(stovol, build_model(stovol)).name == "stovol-mwg"
    finite = ExperimentConfig(model_kind="finite", kernel_kind="mwg")
    assert build_kernels(finite, build_model(finite)).name == "finite-uniform"


def test_every_algorithm_runs(tmp_path):
    experiment = prepare(_small(tmp_path))
    for algorithm in ("filter_smoother", "ffbsi", "mhifs", "mhi_ffbsi"):
        result = run_pipeline(experiment, 20, 2, stream(1, algorithm), algorithm=algorithm)
        assert result.ensemble.paths.shape == (20, 11)
        assert (result.trace is not None) == algorithm.startswith("mhi")


def test_fully_adapted_initialization(tmp_path):
    experiment = prepare(_small(tmp_path, filter_kind="fully_adapted"))
    result = run_pipeline(experiment, 25, 1, stream(2, "adapted"))
    np.testing.assert_allclose(result.ensemble.weights, 1.0 / 25)


def test_oracle_functional_on_finite_model(tmp_path):
    experiment = prepare(_small(tmp_path, model_kind="finite", horizon=4))
    value, variance = oracle_functional(experiment)
    paths, probs = enumerate_smoothing(experiment.model, experiment.obs)
    assert value == pytest.approx(probs @ paths.sum(axis=1))
    assert variance > 0

    lgm_value, lgm_variance = oracle_functional(prepare(_small(tmp_path)))
    assert lgm_variance is None and np.isfinite(lgm_value)


def test_oracle_functional_refuses_huge_enumerations(tmp_path):
    experiment = prepare(_small(tmp_path, model_kind="finite", horizon=20))
    with pytest.raises(ConfigurationError):
        oracle_functional(experiment)


def test_fit_linear_cost():
    slope, r2 = fit_linear_cost([1000, 2000, 4000], [0.1, 0.2, 0.4])
    assert slope == pytest.approx(1e-4)
    assert r2 == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        fit_linear_cost([0, 1], [0.0, 1.0])


def test_calibrated_count_meets_budget():
    counts = fit_particle_counts({"mhifs": [0.11, 0.10, 0.12]}, probe_n=200, target_seconds=2.0)
    predicted = counts["mhifs"] * 0.11 / 200
    assert predicted == pytest.approx(2.0, rel=0.2)


def test_doubling_budget_doubles_particles():
    probes = {"mhifs": [0.05, 0.06, 0.05]}
    single = fit_particle_counts(probes, 100, 1.0)["mhifs"]
    double = fit_particle_counts(probes, 100, 2.0)["mhifs"]
    assert double / single == pytest.approx(2.0, rel=0.25)


def test_cheaper_algorithm_gets_more_particles():
    counts = fit_particle_counts({"slow": [0.2, 0.2, 0.2], "fast": [0.1, 0.1, 0.1]}, 100, 1.0)
    assert counts["fast"] / counts["slow"] == pytest.approx(2.0, rel=0.01)


def test_calibrate_particles_with_a_fake_clock(tmp_path):
    cfg = _small(tmp_path, calibration_probe_n=10)
    counts = calibrate_particles(cfg, 1.0, algorithms=("filter_smoother", "mhifs"), timer=_FakeClock(0.01))
    # every probe measures exactly one clock step
    assert counts == {"filter_smoother": 1000, "mhifs": 1000}
    with pytest.raises(ConfigurationError):
        calibrate_particles(cfg, 0.0)


def test_budget_is_recorded_in_the_manifest(tmp_path):
    cfg = _small(tmp_path, cpu_budget=0.05, calibration_probe_n=10, horizon=6)
    manifest = run_smooth(cfg)
    assert set(manifest.calibrated_n) == {"mhifs"}
    ensemble = read_ensemble_binary(tmp_path / "ensemble.bin")
    assert ensemble.n_particles == manifest.calibrated_n["mhifs"]


@pytest.mark.slow
def test_improved_smoother_cost_is_linear_in_particles(tmp_path):
    experiment = prepare(_small(tmp_path, horizon=101))
    n_values = [1000, 2000, 4000, 8000]
    seconds = []
    for n in n_values:
        runs = []
        for p in range(3):
            started = time.perf_counter()
            run_pipeline(experiment, n, 8, stream(1, "timing", n, p))
            runs.append(time.perf_counter() - started)
        seconds.append(float(np.median(runs)))
    _, r2 = fit_linear_cost(n_values, seconds)
    assert r2 > 0.98
