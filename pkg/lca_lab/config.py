"""
Experiment configuration
Defaults per experiment, JSON config files, key=value overrides and validation.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lca_lab.dynamics import BACKEND_FIXED, BACKEND_SWITCHED
from lca_lab.ensemble import (
    ENSEMBLE_GAUSSIAN,
    MODE_EQUAL,
    MODE_GAUSSIAN,
    RANDOM_ENSEMBLES,
    SIGNAL_MODES,
)
from lca_lab.errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = 'LCA_LAB_CONFIG'

SUPPORT_CONTAINMENT = 'support-containment'
ACTIVE_RATIO_HEATMAP = 'active-ratio-heatmap'
THRESHOLD_DECAY = 'threshold-decay'
RATE_CURVES = 'rate-curves'
THEOREM_AUDIT = 'theorem-audit'
EXPERIMENTS = (SUPPORT_CONTAINMENT, ACTIVE_RATIO_HEATMAP, THRESHOLD_DECAY, RATE_CURVES, THEOREM_AUDIT)

BACKENDS = (BACKEND_FIXED, BACKEND_SWITCHED)
SWEEP_PARAMETERS = ('n', 'm', 's', 'lambda')

PHASE_LAMBDAS = [float(f"{v:.6g}") for v in np.geomspace(0.02, 0.5, 25)]
PHASE_SPARSITIES = list(range(1, 61))


@dataclass
class ExperimentConfig:
    """All parameters of one experiment run."""

    experiment: str
    n: int = 400
    m: int = 200
    s_grid: List[int] = field(default_factory=lambda: [5])
    lambda_grid: List[float] = field(default_factory=lambda: [0.1])
    trials: int = 100
    sigma: float = 0.0
    seed: int = 0
    backend: str = BACKEND_FIXED
    t_max: float = 15.0
    converge_t_max: float = 60.0
    dt: float = 0.01
    output_dir: str = 'results'
    ensemble: str = ENSEMBLE_GAUSSIAN
    signal_mode: str = MODE_EQUAL
    sample_every: float = 0.1
    workers: int = 1
    tau: float = 1.0
    event_tol: float = 1e-12
    kkt_tol: float = 1e-6
    decay_start: float = 0.3
    decay_end: float = 0.08
    decay_rate: float = 1.0
    sweep_parameter: str = 'lambda'
    sweep_values: List[float] = field(default_factory=lambda: [0.02, 0.04, 0.06, 0.1, 0.2])
    q_grid: List[int] = field(default_factory=lambda: [2, 4, 6])
    rip_constant: float = 1.0
    rip_cap: int = 2_000_000
    rip_samples: int = 2000

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> 'ExperimentConfig':
        """
        Check ranges and tags.

        Raises:
            ConfigError: Naming the first offending field
        """
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"Unknown experiment '{self.experiment}'. Available experiments: {list(EXPERIMENTS)}"
            )
        if self.backend not in BACKENDS:
            raise ConfigError(f"Unknown backend '{self.backend}'. Available backends: {list(BACKENDS)}")
        if self.ensemble not in RANDOM_ENSEMBLES:
            raise ConfigError(
                f"Unknown ensemble '{self.ensemble}'. Available ensembles: {list(RANDOM_ENSEMBLES)}"
            )
        if self.signal_mode not in SIGNAL_MODES:
            raise ConfigError(
                f"Unknown signal mode '{self.signal_mode}'. Available modes: {list(SIGNAL_MODES)}"
            )
        if self.sweep_parameter not in SWEEP_PARAMETERS:
            raise ConfigError(
                f"Unknown sweep parameter '{self.sweep_parameter}'. "
                f"Available parameters: {list(SWEEP_PARAMETERS)}"
            )
        for name in ('s_grid', 'lambda_grid', 'sweep_values', 'q_grid'):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"n and m must be positive, got n={self.n}, m={self.m}")
        if any(s < 1 or s > self.n for s in self.s_grid):
            raise ConfigError(f"s_grid entries must lie in [1, n={self.n}], got {self.s_grid}")
        if any(lam <= 0 for lam in self.lambda_grid):
            raise ConfigError(f"lambda_grid entries must be positive, got {self.lambda_grid}")
        if any(q < 0 for q in self.q_grid):
            raise ConfigError(f"q_grid entries must be non-negative, got {self.q_grid}")
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if not 0 < self.dt <= self.t_max:
            raise ConfigError(f"Need 0 < dt <= t_max, got dt={self.dt}, t_max={self.t_max}")
        if not 0 < self.sample_every <= self.t_max:
            raise ConfigError(f"sample_every must lie in (0, t_max], got {self.sample_every}")
        if self.converge_t_max <= 0:
            raise ConfigError(f"converge_t_max must be positive, got {self.converge_t_max}")
        if self.tau <= 0 or self.event_tol <= 0 or self.kkt_tol <= 0:
            raise ConfigError("tau, event_tol and kkt_tol must be positive")
        if not 0 < self.decay_end <= self.decay_start or self.decay_rate <= 0:
            raise ConfigError(
                f"Decay needs 0 < decay_end <= decay_start and decay_rate > 0, got "
                f"{self.decay_start} -> {self.decay_end} at rate {self.decay_rate}"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.rip_constant <= 0 or self.rip_cap < 1 or self.rip_samples < 1:
            raise ConfigError("rip_constant, rip_cap and rip_samples must be positive")
        return self


EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    SUPPORT_CONTAINMENT: {'s_grid': PHASE_SPARSITIES, 'lambda_grid': PHASE_LAMBDAS},
    ACTIVE_RATIO_HEATMAP: {'s_grid': PHASE_SPARSITIES, 'lambda_grid': PHASE_LAMBDAS},
    THRESHOLD_DECAY: {
        's_grid': [5],
        'lambda_grid': [0.08],
        'sigma': 0.025,
        'trials': 100,
        'signal_mode': MODE_GAUSSIAN,
    },
    RATE_CURVES: {'s_grid': [5], 'lambda_grid': [0.1]},
    THEOREM_AUDIT: {
        'n': 20,
        'm': 15,
        's_grid': [2],
        'lambda_grid': [0.3, 0.6, 1.0],
        'backend': BACKEND_SWITCHED,
        'q_grid': [2, 4, 6],
    },
}


def _field_types() -> Dict[str, Any]:
    return {f.name: f.type for f in fields(ExperimentConfig)}


def parse_comma_separated(text: str, name: str) -> List[str]:
    """
    Split a comma-separated value, stripping whitespace.

    Raises:
        ConfigError: If the value is empty or holds an empty item

    Example:
        >>> parse_comma_separated("0.1, 0.2,0.3", "lambda_grid")
        ['0.1', '0.2', '0.3']
    """
    items = [item.strip() for item in text.split(',')]
    if not text.strip() or any(not item for item in items):
        raise ConfigError(f"Empty item in comma-separated value for '{name}': '{text}'")
    return items


def _coerce_scalar(raw: Any, kind: type, name: str) -> Any:
    if isinstance(raw, bool) or (kind is str and not isinstance(raw, str)):
        raise ConfigError(f"'{name}' expects {kind.__name__}, got {raw!r}")
    try:
        value = kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{name}' expects {kind.__name__}, got {raw!r}") from exc
    if kind is int and isinstance(raw, float) and raw != value:
        raise ConfigError(f"'{name}' expects an integer, got {raw!r}")
    return value


def coerce_value(name: str, raw: Any) -> Any:
    """
    Convert a raw JSON or command-line value to the type of config field `name`.

    Strings for list fields are split on commas.
    """
    types = _field_types()
    if name not in types:
        raise ConfigError(f"Unknown config key '{name}'. Accepted keys: {sorted(types)}")
    kind = types[name]
    item_kind = {List[int]: int, List[float]: float}.get(kind)
    if item_kind is not None:
        if isinstance(raw, str):
            raw = parse_comma_separated(raw, name)
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"'{name}' expects a list, got {raw!r}")
        return [_coerce_scalar(item, item_kind, name) for item in raw]
    return _coerce_scalar(raw, kind, name)


def parse_override(text: str) -> Tuple[str, str]:
    key, sep, value = text.partition('=')
    if not sep or not key.strip():
        raise ConfigError(f"Override must look like key=value, got '{text}'")
    return key.strip(), value.strip()


def read_config_file(path: Any) -> Dict[str, Any]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def load_config(
    experiment: str,
    path: Optional[Any] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """
    Build a validated config from defaults, file, overrides and flags.

    Precedence, lowest first: experiment defaults, the JSON file (path, or the
    LCA_LAB_CONFIG environment variable when path is None), key=value overrides,
    then flags whose value is not None.

    Args:
        experiment: Experiment tag
        path: Optional JSON config file
        overrides: 'key=value' strings
        flags: Dedicated command-line values, e.g. {'trials': 10}
        environ: Environment mapping, os.environ when omitted

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: On unknown keys, bad values or failed validation
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment '{experiment}'. Available experiments: {list(EXPERIMENTS)}")
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {
        key: list(value) if isinstance(value, list) else value
        for key, value in EXPERIMENT_DEFAULTS[experiment].items()
    }

    if path is None and environ.get(CONFIG_ENV_VAR):
        path = environ[CONFIG_ENV_VAR]
        logger.info(f"Using config file from {CONFIG_ENV_VAR}: {path}")
    if path is not None:
        file_values = read_config_file(path)
        file_experiment = file_values.pop('experiment', experiment)
        if file_experiment != experiment:
            raise ConfigError(
                f"Config file is for experiment '{file_experiment}', not '{experiment}'"
            )
        values.update({key: coerce_value(key, raw) for key, raw in file_values.items()})

    for text in overrides:
        key, raw = parse_override(text)
        values[key] = coerce_value(key, raw)

    for key, raw in (flags or {}).items():
        if raw is not None:
            values[key] = coerce_value(key, raw)

    values.pop('experiment', None)
    return ExperimentConfig(experiment=experiment, **values).validate()
