import json
from pathlib import Path

import pytest

from pathsmooth.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("PATHSMOOTH_SEED", raising=False)


def _small_lgm(tmp_path, **extra) -> Path:
    lines = [
        "[hmm]",
        'kind = "lgm"',
        f"horizon = {extra.pop('horizon', 11)}",
        "",
        "[smoother]",
    ]
    lines += [f"{key} = {json.dumps(value)}" for key, value in extra.items()]
    path = tmp_path / "small.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_smooth_is_deterministic(tmp_path, capsys):
    args = ["smooth", "--config", str(CONFIGS / "lgm.toml"), "--n", "100", "--k", "0", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("ensemble.csv", "ensemble.bin", "marginals.csv", "observations.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"]["experiment"] == 7
    assert "smooth:" in capsys.readouterr().out


def test_neff_writes_one_row_per_time(tmp_path):
    args = ["neff", "--config", str(CONFIGS / "lgm.toml"), "--n", "20", "--k", "1", "--repetitions", "3"]
    assert main(args + ["--out", str(tmp_path)]) == EXIT_OK
    assert len((tmp_path / "neff.csv").read_text().splitlines()) == 1 + 101


def test_clt_with_log_schedule(tmp_path):
    config = _small_lgm(tmp_path, k_schedule="log_n", k_log_coefficient=2.0)
    args = ["clt", "--config", str(config), "--n", "400", "--repetitions", "2", "--out", str(tmp_path / "out")]
    assert main(args) == EXIT_OK
    report = json.loads((tmp_path / "out" / "clt_n400.json").read_text())
    assert report["k"] == 12
    assert report["n"] == 400


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["smooth", "--particles", "10"]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_missing_command_is_a_usage_error():
    assert main([]) == EXIT_CONFIG


def test_bad_config_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[smoother]\nn_particles = 0\n")
    assert main(["smooth", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert "smoother.n_particles" in capsys.readouterr().err


def test_calibrate_needs_a_budget(tmp_path):
    assert main(["calibrate", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_algorithm_failure_exits_with_runtime_code(tmp_path, capsys):
    obs = tmp_path / "impossible.csv"
    obs.write_text("t,y\n0,0\n1,1\n")
    config = tmp_path / "finite.toml"
    config.write_text(
        "[hmm]\n"
        'kind = "finite"\n'
        f"observations_path = {json.dumps(str(obs))}\n"
        "\n"
        "[hmm.finite]\n"
        "transition = [[1.0, 0.0], [0.0, 1.0]]\n"
        "emission = [[1.0, 0.0], [0.0, 1.0]]\n"
        "initial = [1.0, 0.0]\n"
    )
    assert main(["smooth", "--config", str(config), "--n", "10", "--out", str(tmp_path / "out")]) == EXIT_RUNTIME
    assert "repetition 0" in capsys.readouterr().err


def test_help_lists_the_shared_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["smooth", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--config", "--n", "--k", "--out", "--threads"):
        assert flag in out


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PATHSMOOTH_SEED", "31")
    config = _small_lgm(tmp_path, algorithm="filter_smoother")
    assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_OK
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seeds"]["observations"] == 31


def test_inputs_are_not_modified(tmp_path):
    config = _small_lgm(tmp_path, n_particles=15)
    obs = tmp_path / "obs.csv"
    obs.write_text("t,y\n0,0.5\n1,-0.25\n2,1.0\n")
    config.write_text(config.read_text().replace("[smoother]", f"observations_path = {json.dumps(str(obs))}\n\n[smoother]"))
    before = (config.read_bytes(), obs.read_bytes())
    assert main(["run", "--config", str(config), "--repetitions", "2", "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (config.read_bytes(), obs.read_bytes()) == before
