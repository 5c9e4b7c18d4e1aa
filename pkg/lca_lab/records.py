"""
Records and output files
Per-trial records with content hashes, JSON-lines and CSV writers, the run manifest
and trajectory exports.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from dateutil import tz

from lca_lab import __version__
from lca_lab.dynamics import Trajectory
from lca_lab.ensemble import ProblemInstance
from lca_lab.errors import InvalidArgumentError
from lca_lab.oracle import objective

logger = logging.getLogger(__name__)

STATUS_OK = 'ok'
STATUS_FAILED = 'failed'

TRIAL_REQUIRED_FIELDS = ('trial_index', 's', 'lambda', 'q_obs', 'contained', 'status')


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays, dataclasses, enums and tuples to JSON types."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        to_dict = getattr(value, 'to_dict', None)
        data = to_dict() if to_dict else dataclasses.asdict(value)
        return to_jsonable(data)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        # JSON has no infinities
        return value if math.isfinite(value) else repr(value)
    return value


def compute_hash(data: Any) -> str:
    """
    Compute MD5 hash of JSON data.

    Args:
        data: Data to hash (serialized with sorted keys)

    Returns:
        Hex digest of MD5 hash
    """
    json_str = json.dumps(to_jsonable(data), sort_keys=True)
    return hashlib.md5(json_str.encode()).hexdigest()


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one simulated trial."""

    trial_index: int
    s: int
    lam: float
    q_obs: Optional[int] = None
    contained: Optional[bool] = None
    fitted_rate: Optional[float] = None
    final_kkt_residual: Optional[float] = None
    time_to_1pct: Optional[float] = None
    settle_time: Optional[float] = None
    d_constant: Optional[float] = None
    seed: Optional[int] = None
    label: Optional[str] = None
    status: str = STATUS_OK
    error: Optional[str] = None

    def __post_init__(self):
        if self.contained and self.q_obs is not None and self.q_obs > self.s:
            raise InvalidArgumentError(
                f"Contained trial {self.trial_index} reports q_obs={self.q_obs} > s={self.s}"
            )

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    @classmethod
    def failed(cls, trial_index: int, s: int, lam: float, error: Exception,
               seed: Optional[int] = None, label: Optional[str] = None) -> 'TrialRecord':
        return cls(trial_index=trial_index, s=s, lam=lam, seed=seed, label=label,
                   status=STATUS_FAILED, error=f"{type(error).__name__}: {error}")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['lambda'] = data.pop('lam')
        return data


def prepare_record(record: Any) -> Dict[str, Any]:
    """Return the JSON form of a record with its hash_content added."""
    data = to_jsonable(record)
    data['hash_content'] = compute_hash(data)
    return data


def validate_record(data: Dict[str, Any]) -> bool:
    """
    Validate a persisted trial record.

    Raises:
        ValueError: If a required field is missing or the hash does not match
    """
    for name in TRIAL_REQUIRED_FIELDS:
        if name not in data:
            raise ValueError(f"Missing required field '{name}' in trial record")
    if 'hash_content' in data:
        body = {key: value for key, value in data.items() if key != 'hash_content'}
        if compute_hash(body) != data['hash_content']:
            raise ValueError(f"hash_content mismatch for trial {data['trial_index']}")
    return True


def utc_timestamp() -> str:
    return datetime.now(tz=tz.tzutc()).isoformat()


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write rows with full float precision; None becomes an empty cell."""
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(value) for value in row])
    return path


def write_jsonl(path: Path, items: Iterable[Any], hashed: bool = True) -> Path:
    with path.open('w') as handle:
        for item in items:
            data = prepare_record(item) if hashed else to_jsonable(item)
            handle.write(json.dumps(data, sort_keys=True) + '\n')
    return path


def write_json(path: Path, data: Any) -> Path:
    path.write_text(json.dumps(to_jsonable(data), sort_keys=True, indent=2) + '\n')
    return path


class ExperimentWriter:
    """
    Owns one experiment's output directory.

    Layout: config.json, manifest.json, trials.jsonl and the summary files.
    """

    def __init__(self, output_dir: Any, experiment: str):
        self.directory = Path(output_dir) / experiment
        self.directory.mkdir(parents=True, exist_ok=True)
        self.experiment = experiment
        self.files: List[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.directory / name

    def write_config(self, config: Dict[str, Any]) -> Path:
        return write_json(self.path('config.json'), config)

    def write_trials(self, records: Sequence[TrialRecord]) -> Path:
        return write_jsonl(self.path('trials.jsonl'), records)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return write_csv(self.path(name), header, rows)

    def write_jsonl(self, name: str, items: Iterable[Any]) -> Path:
        return write_jsonl(self.path(name), items)

    def write_json(self, name: str, data: Any) -> Path:
        return write_json(self.path(name), data)

    def write_manifest(self, config: Dict[str, Any], seed: int, wall_time: float,
                       summary: Optional[Dict[str, Any]] = None) -> Path:
        manifest = {
            'experiment': self.experiment,
            'seed': seed,
            'artifact_version': __version__,
            'config_hash': compute_hash(config),
            'wall_time_seconds': wall_time,
            'timestamp': utc_timestamp(),
            'files': sorted(set(self.files)),
            'summary': summary or {},
        }
        path = write_json(self.directory / 'manifest.json', manifest)
        logger.info(f"Wrote {len(set(self.files))} files and manifest to {self.directory}")
        return path


def trajectory_rows(trajectory: Trajectory, instance: ProblemInstance) -> List[List[Any]]:
    """(t, ||u - u_final||, |active set|, objective) per sample."""
    u_final = trajectory.final_state.u
    return [
        [
            state.t,
            float(np.linalg.norm(state.u - u_final)),
            len(state.active_set),
            objective(state.a, instance.matrix, instance.measurement, state.threshold),
        ]
        for state in trajectory.samples
    ]


def export_trajectory(trajectory: Trajectory, instance: ProblemInstance, directory: Any,
                      full_state: bool = False) -> Dict[str, Path]:
    """
    Write a trajectory as CSV plus a JSON sidecar of switch events.

    With full_state the sampled internal states are dumped to states.csv as well.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        'trajectory': write_csv(directory / 'trajectory.csv',
                                ['t', 'error_to_final', 'active_count', 'objective'],
                                trajectory_rows(trajectory, instance)),
        'events': write_json(directory / 'switch_events.json', {
            'backend': trajectory.backend,
            'converged': trajectory.converged,
            'converged_time': trajectory.converged_time,
            'sign_checks': trajectory.sign_checks,
            'events': [event.to_dict() for event in trajectory.switch_events],
            'segments': [
                {'start_time': seg.start_time, 'end_time': seg.end_time,
                 'active_set': list(seg.active_set), 'signs': list(seg.signs)}
                for seg in trajectory.segments
            ],
        }),
    }
    if full_state:
        header = ['t'] + [f"u{j}" for j in range(instance.n)]
        rows = [[state.t] + state.u.tolist() for state in trajectory.samples]
        paths['states'] = write_csv(directory / 'states.csv', header, rows)
    return paths
