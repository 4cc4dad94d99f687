"""
On-disk formats: CSV (17 significant digits, round-trip exact), JSON and
the compact binary ensemble dump.

Binary ensemble layout: magic b"PSE1", little-endian uint64 N and T+1,
then N*(T+1) float64 path values (row-major) and N float64 log-weights.
"""
import csv
import json
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from pathsmooth.diagnostics import CltReport, MseRow, NeffReport
from pathsmooth.errors import ConfigurationError
from pathsmooth.exact import ExactMarginals
from pathsmooth.mhips import MhipsTrace
from pathsmooth.models import ObservationRecord
from pathsmooth.smc import PathEnsemble

PathLike = Union[str, Path]

ENSEMBLE_MAGIC = b"PSE1"


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(payload: dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_observations_csv(record: ObservationRecord, path: PathLike) -> Path:
    with_states = record.true_states is not None
    header = ["t", "y", "x_true"] if with_states else ["t", "y"]
    rows = []
    for t, y in enumerate(record.observations):
        row = [t, fmt(y)]
        if with_states:
            row.append(fmt(record.true_states[t]))
        rows.append(row)
    return write_rows(path, header, rows)


def read_observations_csv(path: PathLike, seed: int = 0) -> ObservationRecord:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["t", "y"]:
            raise ConfigurationError(f"{path}: expected header 't,y[,x_true]', got {reader.fieldnames}")
        rows = list(reader)
    observations = [float(r["y"]) for r in rows]
    states = [float(r["x_true"]) for r in rows] if "x_true" in (reader.fieldnames or []) else None
    return ObservationRecord(observations=observations, true_states=states, seed=seed)


def observations_to_json(record: ObservationRecord) -> dict:
    return {
        "seed": record.seed,
        "observations": record.observations.tolist(),
        "true_states": None if record.true_states is None else record.true_states.tolist(),
    }


def write_observations_json(record: ObservationRecord, path: PathLike) -> Path:
    return write_json(observations_to_json(record), path)


def read_observations_json(path: PathLike) -> ObservationRecord:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return ObservationRecord(
            observations=payload["observations"],
            true_states=payload.get("true_states"),
            seed=int(payload.get("seed", 0)),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigurationError(f"{path}: invalid observation record ({e})")


def read_observations(path: PathLike) -> ObservationRecord:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"observation file not found: {path}", key="hmm.observations_path")
    if path.suffix == ".json":
        return read_observations_json(path)
    return read_observations_csv(path)


def write_moments_csv(means: np.ndarray, variances: np.ndarray, path: PathLike) -> Path:
    rows = ([t, fmt(m), fmt(v)] for t, (m, v) in enumerate(zip(means, variances)))
    return write_rows(path, ["t", "mean", "variance"], rows)


def write_marginals_csv(marginals: ExactMarginals, path: PathLike) -> Path:
    return write_moments_csv(marginals.means, marginals.variances, path)


def write_ensemble_csv(ensemble: PathEnsemble, path: PathLike) -> Path:
    def rows():
        for i in range(ensemble.n_particles):
            lw = fmt(ensemble.log_weights[i])
            for t in range(ensemble.horizon):
                yield [i, t, fmt(ensemble.paths[i, t]), lw]

    return write_rows(path, ["i", "t", "state", "log_weight"], rows())


def write_ensemble_binary(ensemble: PathEnsemble, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([ensemble.n_particles, ensemble.horizon], dtype="<u8")
    with open(path, "wb") as f:
        f.write(ENSEMBLE_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(ensemble.paths, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ensemble.log_weights, dtype="<f8").tobytes())
    return path


def read_ensemble_binary(path: PathLike) -> PathEnsemble:
    data = Path(path).read_bytes()
    if data[:4] != ENSEMBLE_MAGIC:
        raise ConfigurationError(f"{path}: not a PSE1 ensemble dump")
    n, horizon = (int(v) for v in np.frombuffer(data, dtype="<u8", count=2, offset=4))
    expected = 4 + 16 + 8 * (n * horizon + n)
    if len(data) != expected:
        raise ConfigurationError(f"{path}: expected {expected} bytes, found {len(data)}")
    paths = np.frombuffer(data, dtype="<f8", count=n * horizon, offset=20).reshape(n, horizon)
    log_weights = np.frombuffer(data, dtype="<f8", count=n, offset=20 + 8 * n * horizon)
    return PathEnsemble(paths=paths.copy(), log_weights=log_weights.copy())


def write_trace_csv(trace: MhipsTrace, path: PathLike) -> Path:
    header = ["t", "proposals", "accepts"]
    columns = [trace.proposal_counts, trace.acceptance_counts]
    if trace.rejection_proposals is not None:
        header += ["rejection_proposals", "rejection_accepts"]
        columns += [trace.rejection_proposals, trace.rejection_accepts]
    rows = ([t] + [int(c) for c in counts] for t, counts in enumerate(zip(*columns)))
    return write_rows(path, header, rows)


def write_neff_csv(report: NeffReport, path: PathLike) -> Path:
    rows = ([t, fmt(v)] for t, v in enumerate(report.per_time_neff))
    return write_rows(path, ["t", "neff"], rows)


def write_clt_json(report: CltReport, path: PathLike) -> Path:
    return write_json(report.to_json(), path)


def write_mse_csv(rows: Sequence[MseRow], path: PathLike) -> Path:
    return write_rows(
        path,
        ["k", "weight_mode", "mse", "predicted_limit"],
        ([r.k, r.weight_mode, fmt(r.mse), fmt(r.predicted_limit)] for r in rows),
    )
