import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

from pathsmooth.errors import ConfigurationError
from pathsmooth.models import LgmParams, StoVolParams, make_finite_hmm
from pathsmooth.rng import MAX_SEED

SEED_ENV_VAR = "PATHSMOOTH_SEED"

MODEL_KINDS = ("lgm", "stovol", "finite")
ALGORITHMS = ("filter_smoother", "ffbsi", "mhifs", "mhi_ffbsi")
MHIPS_ALGORITHMS = ("mhifs", "mhi_ffbsi")
KERNEL_KINDS = ("gibbs", "mwg")
FILTER_KINDS = ("bootstrap", "fully_adapted")
K_SCHEDULES = ("fixed", "log_n")


def k_schedule_log_n(n_particles: int, coefficient: float = 2.0) -> int:
    """ceil(c ln N) improvement passes."""
    if n_particles < 1:
        raise ConfigurationError(f"need at least one particle, got {n_particles}")
    return max(0, math.ceil(coefficient * math.log(n_particles)))


@dataclass(frozen=True)
class ExperimentConfig:
    # [hmm]
    model_kind: str = "lgm"
    horizon: int = 101
    observations_path: str = ""
    # [hmm.lgm]
    lgm_phi: float = 0.9
    lgm_sigma_u: float = 0.6
    lgm_sigma_v: float = 1.0
    # [hmm.stovol]
    stovol_alpha: float = 0.3
    stovol_sigma: float = 0.5
    stovol_beta: float = 1.0
    # [hmm.finite]
    finite_transition: Tuple[Tuple[float, ...], ...] = ((0.8, 0.1, 0.1), (0.2, 0.6, 0.2), (0.1, 0.3, 0.6))
    finite_emission: Tuple[Tuple[float, ...], ...] = ((0.7, 0.2, 0.1), (0.2, 0.6, 0.2), (0.1, 0.2, 0.7))
    finite_initial: Tuple[float, ...] = (0.4, 0.3, 0.3)
    # [smoother]
    algorithm: str = "mhifs"
    kernel_kind: str = "gibbs"
    filter_kind: str = "bootstrap"
    resample_policy: str = "always"
    n_particles: int = 1000
    k_passes: int = 8
    k_schedule: str = "fixed"
    k_log_coefficient: float = 2.0
    resample_first: bool = True
    # [experiment]
    repetitions: int = 100
    seed: int = 0
    cpu_budget: float = 0.0  # seconds; 0 disables calibration
    output_dir: str = "out"
    threads: int = 1
    # [diagnostics]
    grid_points: int = 2000
    mse_k_schedule: Tuple[int, ...] = (0, 1, 2, 4, 8, 16, 30)
    clt_n_values: Tuple[int, ...] = (100, 400, 1600)
    calibration_probe_n: int = 200
    calibration_algorithms: Tuple[str, ...] = ALGORITHMS

    @property
    def uses_mhips(self) -> bool:
        return self.algorithm in MHIPS_ALGORITHMS

    def model_params(self) -> Union[LgmParams, StoVolParams, None]:
        if self.model_kind == "lgm":
            return LgmParams(phi=self.lgm_phi, sigma_u=self.lgm_sigma_u, sigma_v=self.lgm_sigma_v)
        if self.model_kind == "stovol":
            return StoVolParams(alpha=self.stovol_alpha, sigma=self.stovol_sigma, beta=self.stovol_beta)
        return None

    def passes_for(self, n_particles: int) -> int:
        """Improvement passes for N particles under the configured schedule."""
        if not self.uses_mhips:
            return 0
        if self.k_schedule == "log_n":
            return k_schedule_log_n(n_particles, self.k_log_coefficient)
        return self.k_passes


# field name -> (TOML section path, key)
_LAYOUT: Dict[str, Tuple[Tuple[str, ...], str]] = {
    "model_kind": (("hmm",), "kind"),
    "horizon": (("hmm",), "horizon"),
    "observations_path": (("hmm",), "observations_path"),
    "lgm_phi": (("hmm", "lgm"), "phi"),
    "lgm_sigma_u": (("hmm", "lgm"), "sigma_u"),
    "lgm_sigma_v": (("hmm", "lgm"), "sigma_v"),
    "stovol_alpha": (("hmm", "stovol"), "alpha"),
    "stovol_sigma": (("hmm", "stovol"), "sigma"),
    "stovol_beta": (("hmm", "stovol"), "beta"),
    "finite_transition": (("hmm", "finite"), "transition"),
    "finite_emission": (("hmm", "finite"), "emission"),
    "finite_initial": (("hmm", "finite"), "initial"),
    "algorithm": (("smoother",), "algorithm"),
    "kernel_kind": (("smoother",), "kernel"),
    "filter_kind": (("smoother",), "filter"),
    "resample_policy": (("smoother",), "resample_policy"),
    "n_particles": (("smoother",), "n_particles"),
    "k_passes": (("smoother",), "k_passes"),
    "k_schedule": (("smoother",), "k_schedule"),
    "k_log_coefficient": (("smoother",), "k_log_coefficient"),
    "resample_first": (("smoother",), "resample_first"),
    "repetitions": (("experiment",), "repetitions"),
    "seed": (("experiment",), "seed"),
    "cpu_budget": (("experiment",), "cpu_budget"),
    "output_dir": (("experiment",), "output_dir"),
    "threads": (("experiment",), "threads"),
    "grid_points": (("diagnostics",), "grid_points"),
    "mse_k_schedule": (("diagnostics",), "mse_k_schedule"),
    "clt_n_values": (("diagnostics",), "clt_n_values"),
    "calibration_probe_n": (("diagnostics",), "calibration_probe_n"),
    "calibration_algorithms": (("diagnostics",), "calibration_algorithms"),
}

_DEFAULTS = ExperimentConfig()


def _dotted(field_name: str) -> str:
    sections, key = _LAYOUT[field_name]
    return ".".join(sections + (key,))


def _tupleize(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_tupleize(v) for v in value)
    return value


def _coerce_scalar(prototype: Any, value: Any) -> Any:
    if isinstance(prototype, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            text = value.strip().lower()
            if text in ("1", "true", "yes"):
                return True
            if text in ("0", "false", "no"):
                return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    if isinstance(prototype, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value}")
        return int(value)
    if isinstance(prototype, float):
        return float(value)
    return str(value)


def _coerce_entries(prototype: Tuple, value: Any) -> Tuple:
    if not isinstance(value, tuple):
        raise ValueError(f"expected a list, got {value!r}")
    # entries follow the type of the first default entry
    element = prototype[0] if prototype else None
    if isinstance(element, tuple):
        return tuple(_coerce_entries(element, v) for v in value)
    if element is None:
        return value
    if any(isinstance(v, tuple) for v in value):
        raise ValueError(f"expected a flat list, got {value!r}")
    return tuple(_coerce_scalar(element, v) for v in value)


def _coerce(field_name: str, value: Any) -> Any:
    default = getattr(_DEFAULTS, field_name)
    try:
        if isinstance(default, tuple):
            return _coerce_entries(default, _tupleize(value))
        return _coerce_scalar(default, value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(str(e), key=_dotted(field_name))


def _flatten(document: Mapping[str, Any]) -> Dict[str, Any]:
    by_location = {(sections, key): name for name, (sections, key) in _LAYOUT.items()}
    values: Dict[str, Any] = {}

    def walk(node: Mapping[str, Any], prefix: Tuple[str, ...]) -> None:
        for key, value in node.items():
            if isinstance(value, dict):
                walk(value, prefix + (key,))
                continue
            name = by_location.get((prefix, key))
            if name is None:
                raise ConfigurationError("unknown configuration key", key=".".join(prefix + (key,)))
            values[name] = _coerce(name, value)

    walk(document, ())
    return values


def validate(config: ExperimentConfig) -> ExperimentConfig:
    def check(ok: bool, field_name: str, message: str) -> None:
        if not ok:
            raise ConfigurationError(message, key=_dotted(field_name))

    check(config.model_kind in MODEL_KINDS, "model_kind", f"must be one of {MODEL_KINDS}, got '{config.model_kind}'")
    check(config.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}, got '{config.algorithm}'")
    check(config.kernel_kind in KERNEL_KINDS, "kernel_kind", f"must be one of {KERNEL_KINDS}, got '{config.kernel_kind}'")
    check(config.filter_kind in FILTER_KINDS, "filter_kind", f"must be one of {FILTER_KINDS}, got '{config.filter_kind}'")
    check(
        config.filter_kind != "fully_adapted" or config.model_kind == "lgm",
        "filter_kind",
        "the fully-adapted filter is only available for the lgm model",
    )
    check(config.resample_policy in ("always", "never"), "resample_policy", f"unknown policy '{config.resample_policy}'")
    check(config.k_schedule in K_SCHEDULES, "k_schedule", f"must be one of {K_SCHEDULES}, got '{config.k_schedule}'")
    check(config.horizon >= 1, "horizon", f"must be >= 1, got {config.horizon}")
    check(config.n_particles >= 1, "n_particles", f"must be >= 1, got {config.n_particles}")
    check(config.k_passes >= 0, "k_passes", f"must be >= 0, got {config.k_passes}")
    check(config.k_log_coefficient > 0, "k_log_coefficient", f"must be positive, got {config.k_log_coefficient}")
    check(config.repetitions >= 1, "repetitions", f"must be >= 1, got {config.repetitions}")
    check(0 <= config.seed <= MAX_SEED, "seed", f"must be a 64-bit unsigned integer, got {config.seed}")
    check(config.cpu_budget >= 0, "cpu_budget", f"must be >= 0, got {config.cpu_budget}")
    check(config.threads >= 1, "threads", f"must be >= 1, got {config.threads}")
    check(config.grid_points >= 2, "grid_points", f"must be >= 2, got {config.grid_points}")
    check(config.calibration_probe_n >= 1, "calibration_probe_n", f"must be >= 1, got {config.calibration_probe_n}")
    check(all(k >= 0 for k in config.mse_k_schedule), "mse_k_schedule", "pass counts must be >= 0")
    check(all(n >= 2 for n in config.clt_n_values), "clt_n_values", "particle counts must be >= 2")
    check(
        all(a in ALGORITHMS for a in config.calibration_algorithms),
        "calibration_algorithms",
        f"entries must be among {ALGORITHMS}",
    )
    config.model_params()
    if config.model_kind == "finite":
        make_finite_hmm(len(config.finite_initial), config.finite_transition, config.finite_emission, config.finite_initial)
    return config


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig: defaults, then the TOML file, then the
    PATHSMOOTH_SEED fallback (only when the file sets no seed), then
    `overrides` (field name -> value; None values are ignored).
    """
    env = os.environ if env is None else env
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            document = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}")
        values.update(_flatten(document))

    if "seed" not in values and env.get(SEED_ENV_VAR, "").strip():
        values["seed"] = _coerce("seed", env[SEED_ENV_VAR].strip())

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in _LAYOUT:
            raise ConfigurationError("unknown override", key=name)
        values[name] = _coerce(name, value)

    return validate(dataclasses.replace(_DEFAULTS, **values))


def to_document(config: ExperimentConfig) -> Dict[str, Any]:
    """Nested TOML document for `config`."""
    document: Dict[str, Any] = {}
    for field in dataclasses.fields(config):
        sections, key = _LAYOUT[field.name]
        node = document
        for section in sections:
            node = node.setdefault(section, {})
        value = getattr(config, field.name)
        node[key] = [list(v) if isinstance(v, tuple) else v for v in value] if isinstance(value, tuple) else value
    return document


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(to_document(config))


def parse_config(text: str) -> ExperimentConfig:
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(str(e))
    return validate(dataclasses.replace(_DEFAULTS, **_flatten(document)))


def config_hash(config: ExperimentConfig) -> str:
    digest = hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()
    return f"sha256:{digest[:16]}"
