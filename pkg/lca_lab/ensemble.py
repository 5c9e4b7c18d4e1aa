"""
Problem ensembles
Sparse signals, unit-norm measurement matrices and noisy measurements, drawn from
explicitly seeded counter-based generators, plus their file formats.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from lca_lab.dynamics import ThresholdSchedule
from lca_lab.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

COLUMN_NORM_TOL = 1e-12
MEASUREMENT_TOL = 1e-9
DEFAULT_LAMBDA = 0.1

ENSEMBLE_GAUSSIAN = 'gaussian-unit-col'
ENSEMBLE_BERNOULLI = 'bernoulli-unit-col'
ENSEMBLE_SPHERE = 'uniform-sphere'
ENSEMBLE_EXPLICIT = 'explicit'
RANDOM_ENSEMBLES = (ENSEMBLE_GAUSSIAN, ENSEMBLE_BERNOULLI, ENSEMBLE_SPHERE)

MODE_EQUAL = 'equal-magnitude'
MODE_GAUSSIAN = 'gaussian-amplitudes'
SIGNAL_MODES = (MODE_EQUAL, MODE_GAUSSIAN)

PathLike = Union[str, Path]


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a non-negative integer seed."""
    if int(seed) < 0:
        raise InvalidArgumentError(f"Seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def trial_rng(base_seed: int, trial_index: int) -> np.random.Generator:
    """Generator of trial k: seeded with base_seed + k, so trials are order independent."""
    if trial_index < 0:
        raise InvalidArgumentError(f"Trial index must be non-negative, got {trial_index}")
    return make_rng(int(base_seed) + int(trial_index))


def _read_only(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class SparseSignal:
    """Ground-truth sparse vector a_dagger. The support is derived from the values."""

    values: np.ndarray
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise InvalidArgumentError(f"Signal must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("Signal values must be finite")
        object.__setattr__(self, 'values', _read_only(values))
        object.__setattr__(self, 'support', _read_only(np.flatnonzero(values)))

    @classmethod
    def from_values(cls, values: Any) -> 'SparseSignal':
        return cls(np.asarray(values, dtype=float))

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def s(self) -> int:
        return int(self.support.size)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_dict(self) -> Dict[str, Any]:
        return {'n': self.n, 's': self.s, 'support': self.support.tolist(),
                'values': self.values.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SparseSignal':
        signal = cls.from_values(data['values'])
        if 'n' in data and data['n'] != signal.n:
            raise InvalidArgumentError(f"Signal length {signal.n} does not match n={data['n']}")
        return signal


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """
    M x N dictionary with unit-norm columns.

    Raises InvalidArgumentError when any column norm differs from 1 by more than
    COLUMN_NORM_TOL.
    """

    entries: np.ndarray
    ensemble: str = ENSEMBLE_EXPLICIT
    seed: Optional[int] = None

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or 0 in entries.shape:
            raise InvalidArgumentError(f"Matrix must be 2-D and non-empty, got shape {entries.shape}")
        if self.ensemble not in RANDOM_ENSEMBLES + (ENSEMBLE_EXPLICIT,):
            raise InvalidArgumentError(
                f"Unknown ensemble '{self.ensemble}'. "
                f"Available ensembles: {list(RANDOM_ENSEMBLES + (ENSEMBLE_EXPLICIT,))}"
            )
        if not np.all(np.isfinite(entries)):
            raise InvalidArgumentError("Matrix entries must be finite")
        norms = np.linalg.norm(entries, axis=0)
        worst = int(np.argmax(np.abs(norms - 1.0)))
        if abs(norms[worst] - 1.0) > COLUMN_NORM_TOL:
            raise InvalidArgumentError(
                f"Column {worst} has norm {norms[worst]:.15g}; columns must have unit norm"
            )
        object.__setattr__(self, 'entries', _read_only(entries))

    @classmethod
    def explicit(cls, entries: Any, normalize: bool = False) -> 'MeasurementMatrix':
        entries = np.array(entries, dtype=float)
        if normalize:
            entries = entries / np.linalg.norm(entries, axis=0, keepdims=True)
        return cls(entries)

    @property
    def m(self) -> int:
        return int(self.entries.shape[0])

    @property
    def n(self) -> int:
        return int(self.entries.shape[1])

    @cached_property
    def gram(self) -> np.ndarray:
        return _read_only(self.entries.T @ self.entries)

    def to_dict(self) -> Dict[str, Any]:
        return {'m': self.m, 'n': self.n, 'ensemble': self.ensemble, 'seed': self.seed,
                'data': self.entries.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MeasurementMatrix':
        for key in ('m', 'n', 'data'):
            if key not in data:
                raise InvalidArgumentError(f"Missing required field: {key}")
        entries = np.array(data['data'], dtype=float)
        if entries.shape != (data['m'], data['n']):
            raise InvalidArgumentError(
                f"Matrix data has shape {entries.shape}, header says ({data['m']}, {data['n']})"
            )
        return cls(entries, ensemble=data.get('ensemble', ENSEMBLE_EXPLICIT),
                   seed=data.get('seed'))


def as_array(matrix: Any) -> np.ndarray:
    """Entries of a MeasurementMatrix, or the array itself."""
    return np.asarray(getattr(matrix, 'entries', matrix), dtype=float)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Matrix, ground truth, noise, measurement y = Phi a_dagger + eps, threshold and tau."""

    matrix: MeasurementMatrix
    signal: SparseSignal
    noise: np.ndarray
    measurement: np.ndarray
    threshold: ThresholdSchedule
    time_constant: float = 1.0

    def __post_init__(self):
        noise = _read_only(np.array(self.noise, dtype=float))
        measurement = _read_only(np.array(self.measurement, dtype=float))
        if self.signal.n != self.matrix.n:
            raise InvalidArgumentError(
                f"Signal length {self.signal.n} does not match matrix width {self.matrix.n}"
            )
        if noise.shape != (self.matrix.m,) or measurement.shape != (self.matrix.m,):
            raise InvalidArgumentError(f"Noise and measurement must have length {self.matrix.m}")
        if not self.time_constant > 0:
            raise InvalidArgumentError(f"Time constant must be positive, got {self.time_constant}")
        expected = self.matrix.entries @ self.signal.values + noise
        scale = 1.0 + float(np.max(np.abs(expected), initial=0.0))
        if np.max(np.abs(expected - measurement), initial=0.0) > MEASUREMENT_TOL * scale:
            raise InvalidArgumentError("Measurement is not Phi @ signal + noise")
        object.__setattr__(self, 'noise', noise)
        object.__setattr__(self, 'measurement', measurement)

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def m(self) -> int:
        return self.matrix.m

    @property
    def lam(self) -> float:
        """Threshold floor; equals lambda for constant schedules."""
        return self.threshold.floor

    def with_threshold(self, threshold: ThresholdSchedule) -> 'ProblemInstance':
        return replace(self, threshold=threshold)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'matrix': self.matrix.to_dict(),
            'signal': self.signal.to_dict(),
            'noise': self.noise.tolist(),
            'measurement': self.measurement.tolist(),
            'threshold': self.threshold.to_dict(),
            'time_constant': self.time_constant,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ProblemInstance':
        for key in ('matrix', 'signal', 'measurement', 'threshold'):
            if key not in data:
                raise InvalidArgumentError(f"Missing required field: {key}")
        matrix = MeasurementMatrix.from_dict(data['matrix'])
        noise = data.get('noise')
        return cls(
            matrix=matrix,
            signal=SparseSignal.from_dict(data['signal']),
            noise=np.zeros(matrix.m) if noise is None else noise,
            measurement=data['measurement'],
            threshold=ThresholdSchedule.from_dict(data['threshold']),
            time_constant=data.get('time_constant', 1.0),
        )


def gen_sparse_signal(
    n: int,
    s: int,
    rng: np.random.Generator,
    mode: str = MODE_EQUAL,
    unit_norm: bool = True,
) -> SparseSignal:
    """
    Draw an S-sparse signal of length N with a uniformly random support.

    equal-magnitude gives nonzeros of magnitude 1/sqrt(S) with independent uniform
    signs (unit norm by construction). gaussian-amplitudes gives standard normal
    nonzeros, rescaled to unit norm when unit_norm is set.

    Raises:
        InvalidArgumentError: If s is outside [1, n] or the mode is unknown
    """
    if not 1 <= s <= n:
        raise InvalidArgumentError(f"Sparsity must satisfy 1 <= s <= n, got s={s}, n={n}")
    if mode not in SIGNAL_MODES:
        raise InvalidArgumentError(f"Unknown signal mode '{mode}'. Available modes: {list(SIGNAL_MODES)}")
    support = np.sort(rng.choice(n, size=s, replace=False))
    values = np.zeros(n)
    if mode == MODE_EQUAL:
        values[support] = rng.choice([-1.0, 1.0], size=s) / np.sqrt(s)
    else:
        amplitudes = rng.standard_normal(s)
        # A drawn zero would shrink the support
        amplitudes[amplitudes == 0.0] = np.finfo(float).tiny
        if unit_norm:
            amplitudes = amplitudes / np.linalg.norm(amplitudes)
        values[support] = amplitudes
    return SparseSignal.from_values(values)


def gen_matrix(
    m: int,
    n: int,
    rng: np.random.Generator,
    ensemble: str = ENSEMBLE_GAUSSIAN,
    seed: Optional[int] = None,
) -> MeasurementMatrix:
    """
    Draw an M x N matrix with unit-norm columns.

    Args:
        m: Number of rows (measurements)
        n: Number of columns (nodes)
        rng: Generator to draw from
        ensemble: One of gaussian-unit-col, bernoulli-unit-col, uniform-sphere
        seed: Seed recorded in the matrix metadata

    Returns:
        MeasurementMatrix tagged with the ensemble and seed
    """
    if m < 1 or n < 1:
        raise InvalidArgumentError(f"Matrix dimensions must be positive, got m={m}, n={n}")
    if ensemble == ENSEMBLE_BERNOULLI:
        entries = rng.choice([-1.0, 1.0], size=(m, n)) / np.sqrt(m)
    elif ensemble in (ENSEMBLE_GAUSSIAN, ENSEMBLE_SPHERE):
        # Normalized Gaussian columns are uniform on the unit sphere
        entries = rng.standard_normal((m, n))
    else:
        raise InvalidArgumentError(
            f"Unknown ensemble '{ensemble}'. Available ensembles: {list(RANDOM_ENSEMBLES)}"
        )
    entries = entries / np.linalg.norm(entries, axis=0, keepdims=True)
    return MeasurementMatrix(entries, ensemble=ensemble, seed=seed)


def measure(
    matrix: MeasurementMatrix,
    signal: SparseSignal,
    sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    threshold: Optional[ThresholdSchedule] = None,
    time_constant: float = 1.0,
    noise: Any = None,
) -> ProblemInstance:
    """
    Form y = Phi a_dagger + eps with eps ~ N(0, sigma^2 I), or an explicit noise vector.

    Raises:
        InvalidArgumentError: On negative sigma, a missing generator for sigma > 0
            or dimension mismatch
    """
    if sigma < 0:
        raise InvalidArgumentError(f"Noise level must be non-negative, got {sigma}")
    if signal.n != matrix.n:
        raise InvalidArgumentError(
            f"Signal length {signal.n} does not match matrix width {matrix.n}"
        )
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
    elif sigma > 0:
        if rng is None:
            raise InvalidArgumentError("A generator is required when sigma > 0")
        noise = sigma * rng.standard_normal(matrix.m)
    else:
        noise = np.zeros(matrix.m)
    if noise.shape != (matrix.m,):
        raise InvalidArgumentError(f"Noise has shape {noise.shape}, expected ({matrix.m},)")
    return ProblemInstance(
        matrix=matrix,
        signal=signal,
        noise=noise,
        measurement=matrix.entries @ signal.values + noise,
        threshold=threshold if threshold is not None else ThresholdSchedule.constant(DEFAULT_LAMBDA),
        time_constant=time_constant,
    )


def random_instance(
    n: int,
    m: int,
    s: int,
    rng: np.random.Generator,
    sigma: float = 0.0,
    ensemble: str = ENSEMBLE_GAUSSIAN,
    mode: str = MODE_EQUAL,
    threshold: Optional[ThresholdSchedule] = None,
    time_constant: float = 1.0,
    seed: Optional[int] = None,
) -> ProblemInstance:
    """Draw matrix, then signal, then noise from one generator."""
    matrix = gen_matrix(m, n, rng, ensemble=ensemble, seed=seed)
    signal = gen_sparse_signal(n, s, rng, mode=mode)
    return measure(matrix, signal, sigma=sigma, rng=rng, threshold=threshold,
                   time_constant=time_constant)


def save_matrix_csv(matrix: MeasurementMatrix, path: PathLike) -> Path:
    """Write the matrix as CSV with a '# m=..,n=..,ensemble=..' header line."""
    path = Path(path)
    header = f"m={matrix.m},n={matrix.n},ensemble={matrix.ensemble},seed={matrix.seed}"
    np.savetxt(path, matrix.entries, delimiter=',', fmt='%.17g', header=header)
    return path


def _parse_header(line: str) -> Dict[str, str]:
    fields = {}
    for item in line.lstrip('#').split(','):
        key, sep, value = item.strip().partition('=')
        if sep:
            fields[key.strip()] = value.strip()
    return fields


def load_matrix_csv(path: PathLike, normalize: bool = False) -> MeasurementMatrix:
    """
    Read a matrix written by save_matrix_csv, or any plain comma-separated matrix.

    Raises:
        InvalidArgumentError: If a cell is not numeric, the header dimensions disagree
            with the data, or the columns are not unit norm and normalize is not set
    """
    path = Path(path)
    with path.open() as handle:
        first = handle.readline()
    header = _parse_header(first) if first.startswith('#') else {}
    try:
        entries = np.loadtxt(path, delimiter=',', ndmin=2)
    except ValueError as exc:
        raise InvalidArgumentError(f"Matrix file {path} is not a numeric CSV: {exc}") from exc
    if 'm' in header and 'n' in header:
        expected = (int(header['m']), int(header['n']))
        if entries.shape != expected:
            raise InvalidArgumentError(
                f"Matrix file {path} holds shape {entries.shape}, header says {expected}"
            )
    if normalize:
        entries = entries / np.linalg.norm(entries, axis=0, keepdims=True)
    seed = header.get('seed')
    return MeasurementMatrix(
        entries,
        ensemble=header.get('ensemble', ENSEMBLE_EXPLICIT),
        seed=int(seed) if seed not in (None, 'None') else None,
    )


def save_instance(instance: ProblemInstance, path: PathLike) -> Path:
    """Write a full instance as JSON; floats keep their shortest round-trip repr."""
    path = Path(path)
    path.write_text(json.dumps(instance.to_dict(), sort_keys=True))
    logger.debug(f"Saved instance ({instance.m}x{instance.n}) to {path}")
    return path


def load_instance(path: PathLike) -> ProblemInstance:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"Instance file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"Instance file {path} must hold a JSON object")
    try:
        return ProblemInstance.from_dict(data)
    except InvalidArgumentError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"Instance file {path} is malformed: {exc!r}") from exc
