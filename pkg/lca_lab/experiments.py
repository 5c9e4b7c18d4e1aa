"""
Experiment recipes
Support containment and active-set ratio sweeps over (S, lambda), the decreasing
threshold study, convergence-rate curves and the theorem audit. Each trial draws its
instance from the generator seeded with seed + trial_index, so results do not depend
on execution order or worker count.
"""

import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lca_lab.analysis import (
    METHOD_BRUTEFORCE,
    METHOD_SAMPLED,
    active_set_stats,
    check_lemma1,
    check_lemma2,
    check_theorem2,
    check_theorem3,
    d_constant,
    fit_rate,
    fit_rate_from_errors,
    rip_bruteforce,
    rip_estimate,
    rip_sampled_lower_bound,
    theoretical_decay,
)
from lca_lab.config import (
    ACTIVE_RATIO_HEATMAP,
    RATE_CURVES,
    SUPPORT_CONTAINMENT,
    THEOREM_AUDIT,
    THRESHOLD_DECAY,
    ExperimentConfig,
)
from lca_lab.dynamics import (
    BACKEND_FIXED,
    ThresholdSchedule,
    Trajectory,
    default_output_times,
    simulate,
)
from lca_lab.ensemble import ProblemInstance, random_instance, trial_rng
from lca_lab.errors import (
    ConfigError,
    EnumerationTooLargeError,
    InsufficientDataError,
    NumericFailureError,
    SingularSystemError,
)
from lca_lab.oracle import check_optimality
from lca_lab.records import ExperimentWriter, TrialRecord

logger = logging.getLogger(__name__)

FAILURE_EXCLUSION_LIMIT = 0.05
TIME_TO_FRACTION = 0.01
STATUS_LOWER_BOUND = 'lower-bound'


# Trial plumbing

def output_times(config: ExperimentConfig) -> np.ndarray:
    return default_output_times(config.t_max, config.sample_every)


def build_instance(
    config: ExperimentConfig,
    s: int,
    threshold: ThresholdSchedule,
    trial_index: int,
    n: Optional[int] = None,
    m: Optional[int] = None,
) -> ProblemInstance:
    """Instance of one trial. The matrix is drawn first, so it depends only on the trial index."""
    return random_instance(
        n=n or config.n,
        m=m or config.m,
        s=s,
        rng=trial_rng(config.seed, trial_index),
        sigma=config.sigma,
        ensemble=config.ensemble,
        mode=config.signal_mode,
        threshold=threshold,
        time_constant=config.tau,
        seed=config.seed + trial_index,
    )


def convergence_horizon(config: ExperimentConfig) -> float:
    return max(config.t_max, config.converge_t_max)


def simulate_instance(instance: ProblemInstance, config: ExperimentConfig,
                      backend: Optional[str] = None, horizon: Optional[float] = None) -> Trajectory:
    """
    Simulate one instance up to horizon (config.t_max when omitted).

    Samples always cover [0, config.t_max]; a longer horizon only moves the final state
    closer to the fixed point.
    """
    return simulate(
        instance,
        backend=backend or config.backend,
        t_max=max(config.t_max, horizon or config.t_max),
        dt=config.dt,
        event_tol=config.event_tol,
        output_times=output_times(config),
    )


def time_to_fraction(trajectory: Trajectory, u_star: np.ndarray,
                     fraction: float = TIME_TO_FRACTION) -> Optional[float]:
    """First sample time with ||u(t) - u_star|| < fraction * ||u(0) - u_star||."""
    errors = trajectory.errors_to(u_star)
    if errors[0] == 0.0:
        return 0.0
    below = np.flatnonzero(errors < fraction * errors[0])
    return float(trajectory.times()[below[0]]) if below.size else None


def settle_time(trajectory: Trajectory) -> float:
    """Time of the last active-set change, 0 when the active set never changes."""
    return trajectory.switch_events[-1].time if trajectory.switch_events else 0.0


def summarize_trial(
    trajectory: Trajectory,
    instance: ProblemInstance,
    trial_index: int,
    kkt_tol: float,
    label: Optional[str] = None,
    u_star: Optional[np.ndarray] = None,
    d_value: Optional[float] = None,
) -> TrialRecord:
    """
    Reduce a trajectory to its trial record.

    Errors are measured against u_star, the trajectory's own final state when omitted.
    """
    stats = active_set_stats(trajectory, instance.signal.support)
    final = trajectory.final_state
    reference = final.u if u_star is None else np.asarray(u_star)
    kkt = check_optimality(final.a, instance.matrix, instance.measurement, instance.lam, tol=kkt_tol)
    try:
        rate = fit_rate(trajectory, reference).fitted_rate
    except InsufficientDataError:
        rate = None
    return TrialRecord(
        trial_index=trial_index,
        s=instance.signal.s,
        lam=instance.lam,
        q_obs=stats.q_obs,
        contained=stats.contained,
        fitted_rate=rate,
        final_kkt_residual=kkt.max_violation,
        time_to_1pct=time_to_fraction(trajectory, reference),
        settle_time=settle_time(trajectory),
        d_constant=d_value,
        seed=instance.matrix.seed,
        label=label,
    )


def run_trial(config: ExperimentConfig, s: int, lam: float, trial_index: int) -> TrialRecord:
    """Simulate one constant-threshold trial; numeric failures become failed records."""
    instance = build_instance(config, s, ThresholdSchedule.constant(lam), trial_index)
    try:
        trajectory = simulate_instance(instance, config)
    except NumericFailureError as exc:
        logger.warning(f"Trial {trial_index} (s={s}, lambda={lam}) failed: {exc}")
        return TrialRecord.failed(trial_index, s, lam, exc, seed=config.seed + trial_index)
    return summarize_trial(trajectory, instance, trial_index, config.kkt_tol)


def _parallel_map(func: Callable, jobs: Sequence[Any], workers: int) -> List[Any]:
    if workers <= 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]
    chunksize = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, jobs, chunksize=chunksize))


def _trial_job(job: Tuple[ExperimentConfig, int, float, int]) -> TrialRecord:
    return run_trial(*job)


# Support containment and active-set ratio (phase diagrams)

@dataclass(frozen=True)
class CellSummary:
    """
    Aggregate over the trials of one (S, lambda) cell.

    Failed trials are excluded when they are fewer than 5% of the cell; otherwise
    they count as not contained and the cell is flagged degraded.
    """

    s: int
    lam: float
    trials: int
    failures: int
    contained_fraction: float
    mean_ratio: float
    max_ratio: float
    mean_q_obs: float
    degraded: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            's': self.s, 'lambda': self.lam, 'trials': self.trials, 'failures': self.failures,
            'contained_fraction': self.contained_fraction, 'mean_ratio': self.mean_ratio,
            'max_ratio': self.max_ratio, 'mean_q_obs': self.mean_q_obs, 'degraded': self.degraded,
        }


def summarize_cell(s: int, lam: float, records: Sequence[TrialRecord]) -> CellSummary:
    ok = [record for record in records if record.ok]
    failures = len(records) - len(ok)
    degraded = failures >= FAILURE_EXCLUSION_LIMIT * len(records) and failures > 0
    denominator = len(records) if degraded else len(ok)
    contained = sum(1 for record in ok if record.contained)
    ratios = [record.q_obs / s for record in ok]
    if degraded:
        logger.warning(f"Cell s={s}, lambda={lam}: {failures}/{len(records)} trials failed")
    return CellSummary(
        s=s,
        lam=lam,
        trials=len(records),
        failures=failures,
        contained_fraction=contained / denominator if denominator else math.nan,
        mean_ratio=float(np.mean(ratios)) if ratios else math.nan,
        max_ratio=float(np.max(ratios)) if ratios else math.nan,
        mean_q_obs=float(np.mean([record.q_obs for record in ok])) if ok else math.nan,
        degraded=degraded,
    )


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """Cells of an (S, lambda) sweep, S-major and lambda-minor, both ascending."""

    s_values: Tuple[int, ...]
    lambda_values: Tuple[float, ...]
    cells: Tuple[CellSummary, ...]
    records: Tuple[TrialRecord, ...]

    def cell(self, s: int, lam: float) -> CellSummary:
        return self.cells[self.s_values.index(s) * len(self.lambda_values) + self.lambda_values.index(lam)]

    def matrix(self, attribute: str) -> np.ndarray:
        values = [getattr(cell, attribute) for cell in self.cells]
        return np.array(values, dtype=float).reshape(len(self.s_values), len(self.lambda_values))

    def summary(self) -> Dict[str, Any]:
        return {
            'cells': len(self.cells),
            'trials': len(self.records),
            'failures': sum(cell.failures for cell in self.cells),
            'degraded_cells': sum(cell.degraded for cell in self.cells),
        }


def _sweep_cells(config: ExperimentConfig) -> PhaseGrid:
    s_values = tuple(sorted(set(config.s_grid)))
    lambda_values = tuple(sorted(set(config.lambda_grid)))
    jobs = [
        (config, s, lam, trial)
        for s in s_values
        for lam in lambda_values
        for trial in range(config.trials)
    ]
    logger.info(
        f"Sweeping {len(s_values)}x{len(lambda_values)} cells with {config.trials} trials each "
        f"on {config.workers} worker(s)"
    )
    records = _parallel_map(_trial_job, jobs, config.workers)
    cells = []
    for index, (s, lam) in enumerate((s, lam) for s in s_values for lam in lambda_values):
        chunk = records[index * config.trials:(index + 1) * config.trials]
        cells.append(summarize_cell(s, lam, chunk))
    return PhaseGrid(s_values, lambda_values, tuple(cells), tuple(records))


def _write_phase_outputs(grid: PhaseGrid, writer: ExperimentWriter):
    writer.write_trials(grid.records)
    writer.write_csv(
        'fig1_support_containment.csv',
        ['s'] + [f"lambda={lam!r}" for lam in grid.lambda_values],
        [[s] + list(row) for s, row in zip(grid.s_values, grid.matrix('contained_fraction'))],
    )
    writer.write_csv(
        'fig2_active_ratio.csv',
        ['s', 'lambda', 'trials', 'failures', 'mean_ratio', 'max_ratio', 'mean_q_obs',
         'contained_fraction', 'degraded'],
        [[c.s, c.lam, c.trials, c.failures, c.mean_ratio, c.max_ratio, c.mean_q_obs,
          c.contained_fraction, c.degraded] for c in grid.cells],
    )


def run_support_containment(config: ExperimentConfig,
                            writer: Optional[ExperimentWriter] = None) -> PhaseGrid:
    """
    Fraction of noiseless trials whose active sets never leave the true support,
    for every (S, lambda) cell.

    Raises:
        ConfigError: If sigma is not zero
    """
    if config.sigma != 0:
        raise ConfigError(f"Support containment runs without noise; got sigma={config.sigma}")
    grid = _sweep_cells(config)
    if writer is not None:
        _write_phase_outputs(grid, writer)
    return grid


def run_active_ratio_heatmap(config: ExperimentConfig,
                             writer: Optional[ExperimentWriter] = None) -> PhaseGrid:
    """Mean and max of q_obs / S for every (S, lambda) cell."""
    grid = _sweep_cells(config)
    if writer is not None:
        _write_phase_outputs(grid, writer)
    return grid


# Decreasing threshold

DECAY_LABELS = ('fixed-high', 'fixed-low', 'decay')


@dataclass(frozen=True, eq=False)
class DecayRun:
    label: str
    schedule: ThresholdSchedule
    trajectory: Trajectory
    record: TrialRecord
    missing_support: Tuple[int, ...]


@dataclass(frozen=True)
class DecayComparison:
    """
    Fractions of trials in which the decaying run beats the fixed low threshold.

    faster: reaches 1% error first. settled_first: its active set stops changing first.
    smaller_peak: its largest active set is no larger. Failed trials count as losses.
    """

    trials: int
    faster: float
    settled_first: float
    smaller_peak: float


def compare_decay_runs(outcomes: Sequence[Sequence[TrialRecord]]) -> DecayComparison:
    faster = settled = smaller = 0
    for trial_records in outcomes:
        by_label = {record.label: record for record in trial_records}
        decay, low = by_label['decay'], by_label['fixed-low']
        if not (decay.ok and low.ok):
            continue
        if decay.time_to_1pct is not None and low.time_to_1pct is not None:
            faster += decay.time_to_1pct < low.time_to_1pct
        settled += decay.settle_time < low.settle_time
        smaller += decay.q_obs <= low.q_obs
    total = len(outcomes)
    return DecayComparison(trials=total, faster=faster / total, settled_first=settled / total,
                           smaller_peak=smaller / total)


@dataclass(frozen=True, eq=False)
class DecayStudy:
    """Three runs on trial 0 plus per-trial records of every repetition."""

    runs: Dict[str, DecayRun]
    records: Tuple[TrialRecord, ...]
    comparison: DecayComparison
    solution_gaps: Tuple[float, ...]

    @property
    def faster_fraction(self) -> float:
        return self.comparison.faster

    @property
    def solution_gap(self) -> float:
        """max |a_decay - a_fixed_low| on trial 0."""
        return self.solution_gaps[0]

    def summary(self) -> Dict[str, Any]:
        return {
            'trials': len(self.solution_gaps),
            'faster_fraction': self.comparison.faster,
            'settled_first_fraction': self.comparison.settled_first,
            'smaller_peak_fraction': self.comparison.smaller_peak,
            'solution_gap_trial0': self.solution_gap,
            'max_solution_gap': max(self.solution_gaps),
            'time_to_1pct_trial0': {label: run.record.time_to_1pct
                                    for label, run in self.runs.items()},
            'settle_time_trial0': {label: run.record.settle_time
                                   for label, run in self.runs.items()},
            'missing_support_trial0': {label: list(run.missing_support)
                                       for label, run in self.runs.items()},
        }


def decay_schedules(config: ExperimentConfig) -> Dict[str, ThresholdSchedule]:
    return {
        'fixed-high': ThresholdSchedule.constant(config.decay_start),
        'fixed-low': ThresholdSchedule.constant(config.decay_end),
        'decay': ThresholdSchedule.exponential_decay(config.decay_start, config.decay_end,
                                                     config.decay_rate),
    }


def _decay_trial(config: ExperimentConfig, trial_index: int) -> Dict[str, DecayRun]:
    """
    Run the three schedules on one instance up to the convergence horizon.

    The decaying and fixed-low runs are measured against the converged fixed-low state,
    their common fixed point; the fixed-high run against its own.
    """
    base = build_instance(config, config.s_grid[0], ThresholdSchedule.constant(config.decay_end),
                          trial_index)
    horizon = convergence_horizon(config)
    schedules = decay_schedules(config)
    trajectories = {
        label: simulate_instance(base.with_threshold(schedule), config, backend=BACKEND_FIXED,
                                 horizon=horizon)
        for label, schedule in schedules.items()
    }
    low_reference = trajectories['fixed-low'].final_state.u
    runs = {}
    for label, schedule in schedules.items():
        instance = base.with_threshold(schedule)
        trajectory = trajectories[label]
        reference = trajectory.final_state.u if label == 'fixed-high' else low_reference
        record = summarize_trial(trajectory, instance, trial_index, config.kkt_tol, label=label,
                                 u_star=reference)
        missing = tuple(sorted(set(instance.signal.support.tolist())
                               - set(trajectory.final_state.active_set)))
        runs[label] = DecayRun(label, schedule, trajectory, record, missing)
    return runs


def _solution_gap(runs: Dict[str, DecayRun]) -> float:
    return float(np.max(np.abs(runs['decay'].trajectory.final_state.a
                               - runs['fixed-low'].trajectory.final_state.a)))


def _decay_job(job: Tuple[ExperimentConfig, int]) -> Tuple[List[TrialRecord], float]:
    config, trial_index = job
    try:
        runs = _decay_trial(config, trial_index)
    except NumericFailureError as exc:
        logger.warning(f"Decay trial {trial_index} failed: {exc}")
        failed = [TrialRecord.failed(trial_index, config.s_grid[0], config.decay_end, exc,
                                     seed=config.seed + trial_index, label=label)
                  for label in DECAY_LABELS]
        return failed, math.nan
    return [runs[label].record for label in DECAY_LABELS], _solution_gap(runs)


def run_threshold_decay(config: ExperimentConfig,
                        writer: Optional[ExperimentWriter] = None) -> DecayStudy:
    """
    Fixed high threshold, fixed low threshold and a decay from high to low on one instance.

    Trials beyond the first repeat the three runs on seeds seed + t. The comparison
    reports how often the decaying run reaches 1% error first, settles its active set
    first and keeps a smaller peak active set than the fixed low threshold. The
    decaying schedule always uses the fixed-step backend.
    """
    if config.backend != BACKEND_FIXED:
        logger.info("Threshold decay study runs on the fixed-step backend")
    runs = _decay_trial(config, 0)
    outcomes = [([runs[label].record for label in DECAY_LABELS], _solution_gap(runs))]
    outcomes += _parallel_map(_decay_job, [(config, t) for t in range(1, config.trials)],
                              config.workers)
    records = [record for trial_records, _ in outcomes for record in trial_records]
    comparison = compare_decay_runs([trial_records for trial_records, _ in outcomes])
    study = DecayStudy(runs=runs, records=tuple(records), comparison=comparison,
                       solution_gaps=tuple(gap for _, gap in outcomes))
    logger.info(
        f"Decay against fixed {config.decay_end} over {comparison.trials} trials: 1% error first "
        f"{comparison.faster:.0%}, settled first {comparison.settled_first:.0%}, "
        f"peak no larger {comparison.smaller_peak:.0%}"
    )

    if writer is not None:
        writer.write_trials(study.records)
        times = runs['decay'].trajectory.times()
        counts = [runs[label].trajectory.active_counts() for label in DECAY_LABELS]
        writer.write_csv('fig3_active_counts.csv', ['t'] + list(DECAY_LABELS),
                         [[t] + [int(c[i]) for c in counts] for i, t in enumerate(times)])
        truth = build_instance(config, config.s_grid[0], runs['decay'].schedule, 0).signal.values
        finals = [runs[label].trajectory.final_state.a for label in DECAY_LABELS]
        writer.write_csv('fig3_final_solutions.csv', ['node', 'truth'] + list(DECAY_LABELS),
                         [[j, truth[j]] + [f[j] for f in finals] for j in range(truth.size)])
    return study


# Convergence-rate curves

@dataclass(frozen=True, eq=False)
class RateCurve:
    """Mean normalized error of one sweep value with its theoretical overlays."""

    parameter: str
    value: float
    times: np.ndarray
    mean_error: Optional[np.ndarray]
    overlay_s: Optional[np.ndarray]
    overlay_5s: Optional[np.ndarray]
    overlay_q: Optional[np.ndarray]
    delta_s: float
    delta_5s: float
    delta_q: Optional[float]
    trials_used: int
    excluded: int
    mean_q_obs: Optional[float]
    fitted_rate: Optional[float] = None
    mean_d: Optional[float] = None
    theoretical_rate: Optional[float] = None
    overlay_d: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class RateStudy:
    curves: Tuple[RateCurve, ...]
    records: Tuple[TrialRecord, ...]

    def summary(self) -> Dict[str, Any]:
        return {
            'sweep_values': [curve.value for curve in self.curves],
            'excluded': {repr(curve.value): curve.excluded for curve in self.curves},
            'fitted_rate': {repr(curve.value): curve.fitted_rate for curve in self.curves},
            'theoretical_rate': {repr(curve.value): curve.theoretical_rate
                                 for curve in self.curves},
        }


def sweep_point(config: ExperimentConfig, value: float) -> Dict[str, Any]:
    """n, m, s and lambda of one sweep value; the swept parameter replaces its default."""
    point = {'n': config.n, 'm': config.m, 's': config.s_grid[0], 'lambda': config.lambda_grid[0]}
    point[config.sweep_parameter] = value if config.sweep_parameter == 'lambda' else int(value)
    return point


def _rate_job(job: Tuple[ExperimentConfig, float, int]) -> Tuple[TrialRecord, Optional[np.ndarray]]:
    config, value, trial_index = job
    point = sweep_point(config, value)
    label = f"{config.sweep_parameter}={value!r}"
    instance = build_instance(config, point['s'], ThresholdSchedule.constant(point['lambda']),
                              trial_index, n=point['n'], m=point['m'])
    try:
        trajectory = simulate_instance(instance, config, horizon=convergence_horizon(config))
    except NumericFailureError as exc:
        logger.warning(f"Rate trial {trial_index} ({label}) failed: {exc}")
        return TrialRecord.failed(trial_index, point['s'], point['lambda'], exc,
                                  seed=config.seed + trial_index, label=label), None
    final = trajectory.final_state
    d_value = d_constant(instance.matrix, trajectory.visited_active_sets(), final.active_set,
                         instance.time_constant).d_constant
    record = summarize_trial(trajectory, instance, trial_index, config.kkt_tol, label=label,
                             d_value=d_value)
    if record.final_kkt_residual > config.kkt_tol:
        logger.debug(f"Rate trial {trial_index} ({label}) not converged by "
                     f"t={convergence_horizon(config)}: residual {record.final_kkt_residual:.3g}")
        return record, None
    return record, trajectory.errors_to(trajectory.final_state.u)


def _overlay(delta: Optional[float], times: np.ndarray, tau: float) -> Optional[np.ndarray]:
    if delta is None or delta >= 1.0:
        return None
    return theoretical_decay(delta, times, tau)


def run_rate_curves(config: ExperimentConfig,
                    writer: Optional[ExperimentWriter] = None) -> RateStudy:
    """
    Mean error to the converged state, normalized to 1 at t=0, for each sweep value.

    Each trial runs to the convergence horizon, and its final state is the reference;
    trials whose final state still fails the optimality check are excluded and counted.
    Overlays use random-matrix RIP estimates at order S, at order 5S (log term kept
    at S) and at the mean observed active-set size, plus the mean measured d over the
    visited active sets.
    """
    times = output_times(config)
    values = sorted(set(config.sweep_values))
    jobs = [(config, value, trial) for value in values for trial in range(config.trials)]
    outcomes = _parallel_map(_rate_job, jobs, config.workers)

    curves = []
    for index, value in enumerate(values):
        chunk = outcomes[index * config.trials:(index + 1) * config.trials]
        point = sweep_point(config, value)
        n, m, s = point['n'], point['m'], point['s']
        errors = [err for _, err in chunk if err is not None and err[0] > 0]
        q_values = [record.q_obs for record, err in chunk if err is not None]
        d_values = [record.d_constant for record, err in chunk
                    if err is not None and record.d_constant is not None]
        excluded = len(chunk) - len(errors)
        if excluded:
            logger.warning(f"{excluded}/{len(chunk)} trials excluded at {config.sweep_parameter}={value}")
        mean_error = None
        fitted = None
        if errors:
            mean = np.mean(np.stack(errors), axis=0)
            mean_error = mean / mean[0]
            try:
                fitted = fit_rate_from_errors(times, mean_error).fitted_rate
            except InsufficientDataError:
                fitted = None
        delta_s = rip_estimate(s, n, m, constant=config.rip_constant).delta
        delta_5s = rip_estimate(min(5 * s, n), n, m, constant=config.rip_constant, log_s=s).delta
        mean_q = float(np.mean(q_values)) if q_values else None
        delta_q = None
        if mean_q is not None and mean_q >= 1:
            q = int(min(n, round(mean_q)))
            delta_q = rip_estimate(q, n, m, constant=config.rip_constant).delta
        mean_d = float(np.mean(d_values)) if d_values else None
        theoretical_rate = None
        if mean_d is not None and mean_d < 1.0:
            theoretical_rate = (1.0 - mean_d) / config.tau
        curves.append(RateCurve(
            parameter=config.sweep_parameter,
            value=value,
            times=times,
            mean_error=mean_error,
            overlay_s=_overlay(delta_s, times, config.tau),
            overlay_5s=_overlay(delta_5s, times, config.tau),
            overlay_q=_overlay(delta_q, times, config.tau),
            delta_s=delta_s,
            delta_5s=delta_5s,
            delta_q=delta_q,
            trials_used=len(errors),
            excluded=excluded,
            mean_q_obs=mean_q,
            fitted_rate=fitted,
            mean_d=mean_d,
            theoretical_rate=theoretical_rate,
            overlay_d=_overlay(mean_d, times, config.tau),
        ))
    study = RateStudy(curves=tuple(curves), records=tuple(record for record, _ in outcomes))

    if writer is not None:
        writer.write_trials(study.records)
        rows = []
        for curve in curves:
            for i, t in enumerate(times):
                rows.append([
                    curve.parameter, curve.value, t,
                    None if curve.mean_error is None else curve.mean_error[i],
                    None if curve.overlay_s is None else curve.overlay_s[i],
                    None if curve.overlay_5s is None else curve.overlay_5s[i],
                    None if curve.overlay_q is None else curve.overlay_q[i],
                    None if curve.overlay_d is None else curve.overlay_d[i],
                ])
        writer.write_csv('fig4_rate_curves.csv',
                         ['parameter', 'value', 't', 'mean_normalized_error', 'overlay_order_s',
                          'overlay_order_5s', 'overlay_observed_q', 'overlay_measured_d'], rows)
        writer.write_csv('fig4_rate_summary.csv',
                         ['parameter', 'value', 'delta_s', 'delta_5s', 'delta_q', 'mean_q_obs',
                          'trials_used', 'excluded', 'fitted_rate', 'mean_d', 'theoretical_rate'],
                         [[c.parameter, c.value, c.delta_s, c.delta_5s, c.delta_q, c.mean_q_obs,
                           c.trials_used, c.excluded, c.fitted_rate, c.mean_d, c.theoretical_rate]
                          for c in curves])
    return study


# Theorem audit

@dataclass(frozen=True)
class AuditRow:
    """
    One theorem evaluated on one trial.

    agreement is the implication (conditions hold => claimed property observed);
    rows that are not applicable agree vacuously.
    """

    trial_index: int
    s: int
    lam: float
    theorem: str
    q: Optional[int]
    delta: Optional[float]
    applicable: bool
    holds: bool
    observed: bool
    agreement: bool
    q_obs: Optional[int]
    lemma1_checked: int = 0
    lemma1_passed: int = 0
    lemma2_status: str = 'not-applicable'
    status: str = 'ok'
    delta_method: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data['lambda'] = data.pop('lam')
        return data


@dataclass(frozen=True, eq=False)
class AuditResult:
    rows: Tuple[AuditRow, ...]
    disagreements: Tuple[Dict[str, Any], ...]

    def agreement_rate(self, theorem: str) -> float:
        rows = [row for row in self.rows if row.theorem == theorem and row.status == 'ok']
        return sum(row.agreement for row in rows) / len(rows) if rows else math.nan

    def holding(self, theorem: str) -> int:
        return sum(1 for row in self.rows if row.theorem == theorem and row.holds)

    def lemma_totals(self) -> Dict[str, Any]:
        trials = {(row.trial_index, row.s, row.lam): row for row in self.rows if row.theorem == 'thm2'}
        return {
            'lemma1_checked': sum(row.lemma1_checked for row in trials.values()),
            'lemma1_passed': sum(row.lemma1_passed for row in trials.values()),
            'lemma2_status': dict(Counter(row.lemma2_status for row in trials.values())),
        }

    def summary(self) -> Dict[str, Any]:
        return {
            'rows': len(self.rows),
            'thm2_holding': self.holding('thm2'),
            'thm3_holding': self.holding('thm3'),
            'thm2_agreement': self.agreement_rate('thm2'),
            'thm3_agreement': self.agreement_rate('thm3'),
            'disagreements': len(self.disagreements),
            'lower_bound_rows': sum(1 for row in self.rows if row.status == STATUS_LOWER_BOUND),
            **self.lemma_totals(),
        }


class _RipCache:
    """
    RIP constants of one matrix, computed once per order.

    Calling the cache gives the exact constant or None. Orders above the enumeration
    cap keep a sampled lower bound instead, which report() returns for the audit table
    but which never feeds a theorem check.
    """

    def __init__(self, instance: ProblemInstance, cap: int, samples: int,
                 rng: np.random.Generator):
        self.matrix = instance.matrix
        self.cap = cap
        self.samples = samples
        self.rng = rng
        self.values: Dict[int, Optional[float]] = {}
        self.lower_bounds: Dict[int, float] = {}

    def __call__(self, order: int) -> Optional[float]:
        if order not in self.values:
            if not 1 <= order <= min(self.matrix.m, self.matrix.n):
                self.values[order] = None
            else:
                try:
                    self.values[order] = rip_bruteforce(self.matrix, order, cap=self.cap).delta
                except EnumerationTooLargeError as exc:
                    logger.warning(
                        f"RIP order {order} above the cap, sampling a lower bound: {exc}"
                    )
                    self.values[order] = None
                    self.lower_bounds[order] = rip_sampled_lower_bound(
                        self.matrix, order, self.samples, self.rng
                    ).delta
        return self.values[order]

    def report(self, order: int) -> Tuple[Optional[float], Optional[str]]:
        exact = self(order)
        if exact is not None:
            return exact, METHOD_BRUTEFORCE
        if order in self.lower_bounds:
            return self.lower_bounds[order], METHOD_SAMPLED
        return None, None


def _lemma_sweeps(trajectory: Trajectory, instance: ProblemInstance, q_obs: int,
                  rip: _RipCache) -> Tuple[int, int, str]:
    support = set(instance.signal.support.tolist())
    checked = passed = 0
    for active, signs in trajectory.visited_sign_patterns():
        if not active:
            continue
        delta = rip(len(support | set(active)))
        if delta is None or delta >= 1.0:
            continue
        try:
            result = check_lemma1(instance, active, signs, delta)
        except SingularSystemError:
            continue
        checked += 1
        passed += int(result.holds)
    order = max(len(support | set(seg.active_set)) for seg in trajectory.segments)
    delta = rip(order)
    if delta is None or delta >= 1.0:
        return checked, passed, 'not-applicable'
    return checked, passed, check_lemma2(trajectory, instance, q_obs, delta).status


def _trajectory_digest(trajectory: Trajectory) -> Dict[str, Any]:
    return {
        'visited_active_sets': [list(active) for active in trajectory.visited_active_sets()],
        'switch_events': [event.to_dict() for event in trajectory.switch_events],
        'final_u': trajectory.final_state.u.tolist(),
        'converged': trajectory.converged,
    }


def _skipped_delta(rip: _RipCache, order: int) -> Dict[str, Any]:
    """delta, its method and the row status of a theorem row that is not evaluated."""
    delta, method = rip.report(order)
    status = STATUS_LOWER_BOUND if method == METHOD_SAMPLED else 'ok'
    return {'delta': delta, 'delta_method': method, 'status': status}


def _audit_job(job: Tuple[ExperimentConfig, int, int]) -> Tuple[List[AuditRow], List[Dict[str, Any]]]:
    config, s, trial_index = job
    rows: List[AuditRow] = []
    disagreements: List[Dict[str, Any]] = []
    rip: Optional[_RipCache] = None
    for lam in sorted(set(config.lambda_grid)):
        instance = build_instance(config, s, ThresholdSchedule.constant(lam), trial_index)
        rip = rip or _RipCache(instance, config.rip_cap, config.rip_samples,
                               trial_rng(config.seed, trial_index).spawn(1)[0])
        base = dict(trial_index=trial_index, s=s, lam=lam)
        try:
            trajectory = simulate_instance(instance, config)
        except NumericFailureError as exc:
            logger.warning(f"Audit trial {trial_index} (s={s}, lambda={lam}) failed: {exc}")
            rows.append(AuditRow(**base, theorem='thm2', q=None, delta=None, applicable=False,
                                 holds=False, observed=False, agreement=True, q_obs=None,
                                 status='failed'))
            continue
        stats = active_set_stats(trajectory, instance.signal.support)
        lemma1_checked, lemma1_passed, lemma2_status = _lemma_sweeps(trajectory, instance,
                                                                     stats.q_obs, rip)
        checks = []
        delta = rip(s + 1)
        if delta is not None and delta < 1.0:
            checks.append((check_theorem2(instance, delta), None, stats.contained))
        else:
            rows.append(AuditRow(**base, theorem='thm2', q=None, applicable=False, holds=False,
                                 observed=stats.contained, agreement=True, q_obs=stats.q_obs,
                                 lemma1_checked=lemma1_checked, lemma1_passed=lemma1_passed,
                                 lemma2_status=lemma2_status, **_skipped_delta(rip, s + 1)))
        for q in sorted(set(config.q_grid)):
            delta_bar = rip(s + q)
            if delta_bar is None or delta_bar >= 1.0:
                rows.append(AuditRow(**base, theorem='thm3', q=q, applicable=False, holds=False,
                                     observed=stats.q_obs <= q, agreement=True, q_obs=stats.q_obs,
                                     **_skipped_delta(rip, s + q)))
                continue
            checks.append((check_theorem3(instance, delta_bar, q), q, stats.q_obs <= q))
        for check, q, observed in checks:
            agreement = (not check.holds) or observed
            extra = {}
            if check.theorem == 'thm2':
                extra = dict(lemma1_checked=lemma1_checked, lemma1_passed=lemma1_passed,
                             lemma2_status=lemma2_status)
            rows.append(AuditRow(**base, theorem=check.theorem, q=q, delta=check.inputs['delta'],
                                 applicable=check.applicable, holds=check.holds, observed=observed,
                                 agreement=agreement, q_obs=stats.q_obs,
                                 delta_method=METHOD_BRUTEFORCE, **extra))
            if not agreement:
                logger.warning(f"{check.theorem} disagreement on trial {trial_index} "
                               f"(s={s}, lambda={lam}, q={q})")
                disagreements.append({
                    'trial_index': trial_index,
                    'seed': config.seed + trial_index,
                    's': s,
                    'lambda': lam,
                    'q': q,
                    'check': check.to_dict(),
                    'instance': instance.to_dict(),
                    'trajectory': _trajectory_digest(trajectory),
                })
    return rows, disagreements


def run_theorem_audit(config: ExperimentConfig,
                      writer: Optional[ExperimentWriter] = None) -> AuditResult:
    """
    Check the support-recovery and active-set-size guarantees against simulation.

    Exact RIP constants come from enumeration, so n must be small. Orders above
    rip_cap are not evaluated; their rows carry a sampled lower bound on delta with
    status 'lower-bound'. Every visited
    (active set, signs) pair is also checked against the equilibrium distance bound,
    and every qualifying segment against the bounded-distance property.
    """
    jobs = [(config, s, trial) for s in sorted(set(config.s_grid)) for trial in range(config.trials)]
    outcomes = _parallel_map(_audit_job, jobs, config.workers)
    rows = sorted((row for trial_rows, _ in outcomes for row in trial_rows),
                  key=lambda r: (r.s, r.lam, r.trial_index, r.theorem, -1 if r.q is None else r.q))
    disagreements = [item for _, items in outcomes for item in items]
    result = AuditResult(rows=tuple(rows), disagreements=tuple(disagreements))
    logger.info(f"Theorem audit: {result.summary()}")

    if writer is not None:
        header = ['s', 'lambda', 'trial_index', 'theorem', 'q', 'delta', 'applicable', 'holds',
                  'observed', 'agreement', 'q_obs', 'lemma1_checked', 'lemma1_passed',
                  'lemma2_status', 'status', 'delta_method']
        writer.write_csv('theorem_audit.csv', header,
                         [[r.s, r.lam, r.trial_index, r.theorem, r.q, r.delta, r.applicable,
                           r.holds, r.observed, r.agreement, r.q_obs, r.lemma1_checked,
                           r.lemma1_passed, r.lemma2_status, r.status, r.delta_method]
                          for r in rows])
        writer.write_jsonl('theorem_audit_disagreements.jsonl', disagreements)
    return result


RECIPES: Dict[str, Callable[..., Any]] = {
    SUPPORT_CONTAINMENT: run_support_containment,
    ACTIVE_RATIO_HEATMAP: run_active_ratio_heatmap,
    THRESHOLD_DECAY: run_threshold_decay,
    RATE_CURVES: run_rate_curves,
    THEOREM_AUDIT: run_theorem_audit,
}


def run_experiment(config: ExperimentConfig, output_dir: Optional[Any] = None) -> Any:
    """
    Run one experiment and persist config echo, records, summaries and manifest.

    Args:
        config: Validated experiment config
        output_dir: Parent directory, config.output_dir when omitted

    Returns:
        The recipe's result object
    """
    config.validate()
    writer = ExperimentWriter(output_dir or config.output_dir, config.experiment)
    writer.write_config(config.to_dict())
    logger.info(f"Starting {config.experiment} (seed={config.seed}, trials={config.trials})")
    started = time.perf_counter()
    result = RECIPES[config.experiment](config, writer=writer)
    elapsed = time.perf_counter() - started
    writer.write_manifest(config.to_dict(), config.seed, elapsed, summary=result.summary())
    logger.info(f"Finished {config.experiment} in {elapsed:.1f}s")
    return result
