import json

import numpy as np
import pytest

from pathsmooth.diagnostics import CltReport, MseRow, NeffReport
from pathsmooth.errors import ConfigurationError
from pathsmooth.exact import ExactMarginals
from pathsmooth.formats import (
    fmt,
    read_ensemble_binary,
    read_observations,
    write_clt_json,
    write_ensemble_binary,
    write_ensemble_csv,
    write_marginals_csv,
    write_mse_csv,
    write_neff_csv,
    write_observations_csv,
    write_observations_json,
    write_trace_csv,
)
from pathsmooth.mhips import MhipsTrace
from pathsmooth.models import ObservationRecord
from pathsmooth.smc import PathEnsemble


def test_fmt_round_trips_doubles():
    for value in (0.1, 1 / 3, -2.5e-300, 123456789.123456789):
        assert float(fmt(value)) == value


def test_observations_csv(tmp_path):
    record = ObservationRecord(observations=[0.1, -1 / 3, 2.0], true_states=[1e-17, 0.5, -0.25], seed=4)
    path = write_observations_csv(record, tmp_path / "obs.csv")
    assert path.read_text().splitlines()[0] == "t,y,x_true"
    loaded = read_observations(path)
    np.testing.assert_array_equal(loaded.observations, record.observations)
    np.testing.assert_array_equal(loaded.true_states, record.true_states)


def test_observations_csv_without_states(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("t,y\n0,1.5\n1,-0.5\n")
    loaded = read_observations(path)
    np.testing.assert_array_equal(loaded.observations, [1.5, -0.5])
    assert loaded.true_states is None


def test_observations_csv_header_is_checked(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("time,value\n0,1.0\n")
    with pytest.raises(ConfigurationError):
        read_observations(path)


def test_observations_json(tmp_path):
    record = ObservationRecord(observations=[0.25, 3.0], seed=99)
    path = write_observations_json(record, tmp_path / "obs.json")
    payload = json.loads(path.read_text())
    assert payload == {"observations": [0.25, 3.0], "seed": 99, "true_states": None}
    loaded = read_observations(path)
    assert loaded.seed == 99
    np.testing.assert_array_equal(loaded.observations, record.observations)


def test_missing_observation_file(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        read_observations(tmp_path / "absent.csv")
    assert exc.value.key == "hmm.observations_path"


def test_ensemble_binary(tmp_path):
    ensemble = PathEnsemble.from_unnormalized(np.arange(12.0).reshape(3, 4) / 7.0, np.log([0.2, 0.3, 0.5]))
    path = write_ensemble_binary(ensemble, tmp_path / "ensemble.bin")
    data = path.read_bytes()
    assert data[:4] == b"PSE1"
    assert len(data) == 4 + 16 + 8 * (12 + 3)
    loaded = read_ensemble_binary(path)
    np.testing.assert_array_equal(loaded.paths, ensemble.paths)
    np.testing.assert_array_equal(loaded.log_weights, ensemble.log_weights)


def test_ensemble_binary_rejects_other_files(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ConfigurationError):
        read_ensemble_binary(path)
    path.write_bytes(b"PSE1" + np.array([2, 2], dtype="<u8").tobytes())
    with pytest.raises(ConfigurationError):
        read_ensemble_binary(path)


def test_ensemble_csv_is_long_format(tmp_path):
    ensemble = PathEnsemble.equally_weighted(np.array([[0.5, 1.5], [2.5, 3.5]]))
    lines = write_ensemble_csv(ensemble, tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "i,t,state,log_weight"
    assert len(lines) == 1 + 4
    assert lines[2].startswith("0,1,1.5,")


def test_report_writers(tmp_path):
    marginals = ExactMarginals(means=np.array([0.0, 1.0]), variances=np.array([1.0, 2.0]))
    assert write_marginals_csv(marginals, tmp_path / "m.csv").read_text().splitlines() == [
        "t,mean,variance", "0,0,1", "1,1,2",
    ]

    neff = NeffReport(per_time_neff=np.array([10.0, 20.0, 30.0]), repetitions=5)
    assert len(write_neff_csv(neff, tmp_path / "neff.csv").read_text().splitlines()) == 4

    trace = MhipsTrace(acceptance_counts=np.array([3, 4]), proposal_counts=np.array([5, 5]))
    assert write_trace_csv(trace, tmp_path / "trace.csv").read_text().splitlines()[1] == "0,5,3"

    rows = [MseRow(k=0, weight_mode="original", mse=0.5, predicted_limit=0.25, mc_stderr=0.01)]
    assert write_mse_csv(rows, tmp_path / "mse.csv").read_text().splitlines() == [
        "k,weight_mode,mse,predicted_limit", "0,original,0.5,0.25",
    ]

    report = CltReport(functional_mean=1.0, variance_estimate_single_run=0.1, n_particles=400, k_used=12)
    payload = json.loads(write_clt_json(report, tmp_path / "clt.json").read_text())
    assert payload["k"] == 12 and payload["n"] == 400 and payload["var_empirical"] is None
