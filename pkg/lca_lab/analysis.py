"""
Analysis
RIP constants (exact enumeration, sampled lower bound and random-matrix estimate),
the scalar conditions of the support-recovery and active-set-size guarantees, the
per-segment distance lemmas and convergence-rate statistics of trajectories.
"""

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from lca_lab.dynamics import Trajectory, steady_state_candidate
from lca_lab.ensemble import ProblemInstance, as_array
from lca_lab.errors import (
    EnumerationTooLargeError,
    InsufficientDataError,
    InvalidArgumentError,
    PreconditionViolatedError,
)

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 2_000_000
ENUMERATION_CHUNK = 4096
FIT_MIN_SAMPLES = 10
FIT_FLOOR = 1e-12
FIT_WINDOW_LOW = 1e-9
FIT_WINDOW_HIGH = 0.5
LEMMA2_SLACK = 1e-9
THEOREM3_DELTA_LIMIT = 1.0 / 3.0

METHOD_BRUTEFORCE = 'bruteforce'
METHOD_SAMPLED = 'sampled'
METHOD_ESTIMATE = 'estimate'


@dataclass(frozen=True)
class RipReport:
    """RIP constant of one order, with the support that attains it when enumerated."""

    order: int
    delta: float
    method: str
    witnessing_support: Optional[Tuple[int, ...]] = None
    lower_bound: bool = False
    supports_examined: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'order': self.order,
            'delta': self.delta,
            'method': self.method,
            'witnessing_support': (
                list(self.witnessing_support) if self.witnessing_support is not None else None
            ),
            'lower_bound': self.lower_bound,
            'supports_examined': self.supports_examined,
        }


class ConditionMargin(NamedTuple):
    lhs: float
    rhs: float
    slack: float


@dataclass(frozen=True)
class TheoremCheck:
    """
    Scalar evaluation of a theorem's conditions.

    holds is true iff the theorem is applicable and every slack is non-negative.
    """

    theorem: str
    margins: Dict[str, ConditionMargin]
    inputs: Dict[str, float]
    applicable: bool = True
    diagnostics: Tuple[str, ...] = ()

    @property
    def holds(self) -> bool:
        return self.applicable and all(m.slack >= 0 for m in self.margins.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'theorem': self.theorem,
            'holds': self.holds,
            'applicable': self.applicable,
            'margins': {name: m._asdict() for name, m in self.margins.items()},
            'inputs': dict(self.inputs),
            'diagnostics': list(self.diagnostics),
        }


@dataclass(frozen=True)
class RateReport:
    d_constant: Optional[float] = None
    theoretical_rate: Optional[float] = None
    fitted_rate: Optional[float] = None
    window: Optional[Tuple[float, float]] = None
    samples_used: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'd_constant': self.d_constant,
            'theoretical_rate': self.theoretical_rate,
            'fitted_rate': self.fitted_rate,
            'window': list(self.window) if self.window is not None else None,
            'samples_used': self.samples_used,
        }


class Lemma1Check(NamedTuple):
    bound: float
    actual: float
    holds: bool


class ActiveSetStats(NamedTuple):
    q_obs: int
    contained: bool
    ratio: float


@dataclass(frozen=True)
class Lemma2Report:
    """Per-trajectory outcome of the bounded-distance check."""

    status: str
    bound: float
    worst_distance: float
    segments_checked: int
    segments_skipped: int
    violations: Tuple[float, ...] = field(default=())

    @property
    def holds(self) -> bool:
        return self.status == 'holds'


# RIP constants

def gram_deviation(gram: np.ndarray) -> float:
    """max(lambda_max - 1, 1 - lambda_min) of a symmetric Gram (sub)matrix."""
    if gram.size == 0:
        return 0.0
    eigenvalues = np.linalg.eigvalsh(gram)
    return float(max(eigenvalues[-1] - 1.0, 1.0 - eigenvalues[0]))


def _scan_supports(gram: np.ndarray, k: int, first_indices: Sequence[int]) -> Tuple[float, Tuple[int, ...], int]:
    """Largest deviation over supports whose smallest index is in first_indices."""
    n = gram.shape[0]
    best, best_support, examined = -np.inf, (), 0
    for first in first_indices:
        tails = itertools.combinations(range(first + 1, n), k - 1)
        while True:
            chunk = list(itertools.islice(tails, ENUMERATION_CHUNK))
            if not chunk:
                break
            idx = np.empty((len(chunk), k), dtype=int)
            idx[:, 0] = first
            if k > 1:
                idx[:, 1:] = np.array(chunk, dtype=int)
            blocks = gram[idx[:, :, None], idx[:, None, :]]
            eigenvalues = np.linalg.eigvalsh(blocks)
            deviation = np.maximum(eigenvalues[:, -1] - 1.0, 1.0 - eigenvalues[:, 0])
            j = int(np.argmax(deviation))
            if deviation[j] > best:
                best, best_support = float(deviation[j]), tuple(int(i) for i in idx[j])
            examined += len(chunk)
    return best, best_support, examined


def rip_bruteforce(
    matrix: Any, k: int, cap: int = DEFAULT_ENUMERATION_CAP, workers: int = 1
) -> RipReport:
    """
    Exact RIP constant of order k by enumerating every size-k support.

    Supports are partitioned by their smallest index; partial maxima are reduced
    in index order, so ties resolve to the lexicographically first support
    regardless of the worker count.

    Args:
        matrix: Measurement matrix with unit columns
        k: Order, 1 <= k <= min(m, n)
        cap: Largest number of supports to enumerate
        workers: Processes used for the enumeration

    Returns:
        RipReport with method 'bruteforce' and the witnessing support

    Raises:
        EnumerationTooLargeError: If C(n, k) exceeds cap
    """
    phi = as_array(matrix)
    m, n = phi.shape
    if not 1 <= k <= min(m, n):
        raise InvalidArgumentError(f"RIP order must satisfy 1 <= k <= min(m, n) = {min(m, n)}, got {k}")
    total = math.comb(n, k)
    if total > cap:
        raise EnumerationTooLargeError(
            f"C({n}, {k}) = {total} supports exceeds the enumeration cap {cap}; "
            f"use rip_estimate or rip_sampled_lower_bound instead"
        )
    gram = phi.T @ phi
    firsts = list(range(n - k + 1))
    if workers > 1 and len(firsts) > 1:
        parts = [firsts[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as executor:
            partials = list(executor.map(_scan_supports, [gram] * len(parts), [k] * len(parts), parts))
    else:
        partials = [_scan_supports(gram, k, firsts)]
    # Ties go to the lexicographically first support, whatever the partition
    best, support, examined = -np.inf, (), 0
    for value, candidate, count in partials:
        examined += count
        if value > best or (value == best and candidate < support):
            best, support = value, candidate
    logger.debug(f"RIP order {k}: delta={best:.6g} over {examined} supports")
    return RipReport(order=k, delta=max(best, 0.0), method=METHOD_BRUTEFORCE,
                     witnessing_support=support, supports_examined=examined)


def rip_sampled_lower_bound(
    matrix: Any, k: int, samples: int, rng: np.random.Generator
) -> RipReport:
    """Lower bound on the order-k RIP constant from randomly drawn supports."""
    phi = as_array(matrix)
    m, n = phi.shape
    if not 1 <= k <= min(m, n):
        raise InvalidArgumentError(f"RIP order must satisfy 1 <= k <= min(m, n) = {min(m, n)}, got {k}")
    if samples < 1:
        raise InvalidArgumentError(f"Need at least one sample, got {samples}")
    gram = phi.T @ phi
    idx = np.sort(np.stack([rng.choice(n, size=k, replace=False) for _ in range(samples)]), axis=1)
    eigenvalues = np.linalg.eigvalsh(gram[idx[:, :, None], idx[:, None, :]])
    deviation = np.maximum(eigenvalues[:, -1] - 1.0, 1.0 - eigenvalues[:, 0])
    j = int(np.argmax(deviation))
    return RipReport(order=k, delta=max(float(deviation[j]), 0.0), method=METHOD_SAMPLED,
                     witnessing_support=tuple(int(i) for i in idx[j]), lower_bound=True,
                     supports_examined=samples)


def rip_estimate(
    s: int, n: int, m: int, constant: float = 1.0, log_s: Optional[int] = None
) -> RipReport:
    """
    Random-matrix estimate delta = constant * sqrt(s * ln(n / log_s) / m).

    log_s defaults to s. An estimate at or above 1 is returned as is with a warning,
    since no guarantee applies there.
    """
    if not 1 <= s <= n:
        raise InvalidArgumentError(f"Order must satisfy 1 <= s <= n, got s={s}, n={n}")
    if m < 1:
        raise InvalidArgumentError(f"m must be positive, got {m}")
    log_s = s if log_s is None else log_s
    if not 1 <= log_s <= n:
        raise InvalidArgumentError(f"log_s must satisfy 1 <= log_s <= n, got {log_s}")
    delta = constant * math.sqrt(s * math.log(n / log_s) / m)
    if delta >= 1.0:
        logger.warning(f"RIP estimate {delta:.4g} for order {s} is not below 1")
    return RipReport(order=s, delta=delta, method=METHOD_ESTIMATE)


# Condition scalars

def _check_delta(delta: float):
    if not 0.0 <= delta < 1.0:
        raise InvalidArgumentError(f"RIP constant must lie in [0, 1), got {delta}")


def alpha(delta: float) -> float:
    """(1 + delta) / (1 - delta)^2."""
    _check_delta(delta)
    return (1.0 + delta) / (1.0 - delta) ** 2


def c_delta(p: float, delta: float, norm_a: float, norm_eps: float, lam: float) -> float:
    """alpha(delta) * (||a_dagger|| + sqrt(1 - delta) ||eps|| + lambda sqrt(p))."""
    _check_delta(delta)
    if p < 0:
        raise InvalidArgumentError(f"p must be non-negative, got {p}")
    return alpha(delta) * (norm_a + math.sqrt(1.0 - delta) * norm_eps + lam * math.sqrt(p))


def delta_bound_thm2(r: float, s: int, alpha_value: float) -> float:
    """Largest order-(S+1) RIP constant admitted for lambda = r * (smallest |a_dagger|)."""
    if not 0.0 < r < 1.0:
        raise InvalidArgumentError(f"r must lie in (0, 1), got {r}")
    return r / ((1.0 + r) * alpha_value * math.sqrt(s))


def delta_bound_thm3(r: float, beta: float) -> float:
    """
    Admissible order-(S+q) RIP constant for q = beta * S, (r sqrt(beta) - 1) / (3 r sqrt(beta) + 1).

    Non-positive bounds are returned as 0 with a warning.
    """
    root = r * math.sqrt(beta)
    if root <= 1.0:
        logger.warning(f"r * sqrt(beta) = {root:.4g} <= 1; no admissible RIP constant")
        return 0.0
    return (root - 1.0) / (3.0 * root + 1.0)


def noise_off_support(instance: ProblemInstance) -> float:
    """||Phi_{off support}^T eps||_inf."""
    off = np.setdiff1d(np.arange(instance.n), instance.signal.support)
    if off.size == 0:
        return 0.0
    return float(np.max(np.abs(instance.matrix.entries[:, off].T @ instance.noise)))


def _inputs(instance: ProblemInstance, delta: float, q: Optional[int] = None) -> Dict[str, float]:
    inputs = {
        's': instance.signal.s,
        'lambda': instance.lam,
        'delta': delta,
        'norm_a': instance.signal.norm,
        'norm_eps': float(np.linalg.norm(instance.noise)),
        'noise_off_support': noise_off_support(instance),
    }
    if q is not None:
        inputs['q'] = q
    return inputs


def _margin(lhs: float, rhs: float) -> ConditionMargin:
    return ConditionMargin(lhs=float(lhs), rhs=float(rhs), slack=float(lhs - rhs))


def check_theorem2(instance: ProblemInstance, delta: float, a0: Any = None) -> TheoremCheck:
    """
    Conditions under which no node outside the true support ever activates.

    initial_distance: C_delta(S) >= ||a_dagger - a(0)||
    threshold: (1 - alpha delta sqrt(S)) lambda >=
        alpha delta (||a_dagger|| + sqrt(1 - delta) ||eps||) + ||Phi_{off}^T eps||_inf

    Slacks are left side minus right side of each inequality written as lhs >= rhs.
    For decaying schedules lambda is the schedule floor.

    Raises:
        PreconditionViolatedError: If a0 is active outside the true support
    """
    _check_delta(delta)
    a0 = np.zeros(instance.n) if a0 is None else np.asarray(a0, dtype=float)
    if a0.shape != (instance.n,):
        raise InvalidArgumentError(f"a0 has shape {a0.shape}, expected ({instance.n},)")
    outside = np.setdiff1d(np.flatnonzero(a0), instance.signal.support)
    if outside.size:
        raise PreconditionViolatedError(
            f"Initial output is active outside the true support at {outside.tolist()}"
        )
    inputs = _inputs(instance, delta)
    s, lam = inputs['s'], inputs['lambda']
    a_value = alpha(delta)
    distance = float(np.linalg.norm(instance.signal.values - a0))
    bound = c_delta(s, delta, inputs['norm_a'], inputs['norm_eps'], lam)
    lhs = (1.0 - a_value * delta * math.sqrt(s)) * lam
    rhs = (a_value * delta * (inputs['norm_a'] + math.sqrt(1.0 - delta) * inputs['norm_eps'])
           + inputs['noise_off_support'])
    return TheoremCheck(
        theorem='thm2',
        margins={'initial_distance': _margin(bound, distance), 'threshold': _margin(lhs, rhs)},
        inputs=inputs,
    )


def check_theorem3(instance: ProblemInstance, delta_bar: float, q: int, u0: Any = None) -> TheoremCheck:
    """
    Conditions under which the active set never exceeds q nodes.

    initial_state: lambda sqrt(q) >= ||u(0)||
    threshold: lambda >= (1 + d) / (1 - 3 d) / sqrt(q) * (||a_dagger|| + sqrt(1 - d) ||eps||)

    A constant delta_bar >= 1/3 makes the theorem inapplicable: the check reports
    holds=False with a diagnostic instead of raising.
    """
    if q < 0:
        raise InvalidArgumentError(f"q must be non-negative, got {q}")
    _check_delta(delta_bar)
    u0 = np.zeros(instance.n) if u0 is None else np.asarray(u0, dtype=float)
    if u0.shape != (instance.n,):
        raise InvalidArgumentError(f"u0 has shape {u0.shape}, expected ({instance.n},)")
    inputs = _inputs(instance, delta_bar, q)
    lam = inputs['lambda']
    margins = {'initial_state': _margin(lam * math.sqrt(q), float(np.linalg.norm(u0)))}
    diagnostics: List[str] = []
    applicable = True
    if delta_bar >= THEOREM3_DELTA_LIMIT:
        applicable = False
        diagnostics.append(f"delta_bar={delta_bar:.4g} >= 1/3; threshold condition has no meaning")
        margins['threshold'] = ConditionMargin(lhs=lam, rhs=math.inf, slack=-math.inf)
    elif q == 0:
        diagnostics.append("q=0 admits no active node; threshold condition needs a zero signal")
        rhs = 0.0 if inputs['norm_a'] + inputs['norm_eps'] == 0 else math.inf
        margins['threshold'] = _margin(lam, rhs)
    else:
        factor = (1.0 + delta_bar) / (1.0 - 3.0 * delta_bar) / math.sqrt(q)
        rhs = factor * (inputs['norm_a'] + math.sqrt(1.0 - delta_bar) * inputs['norm_eps'])
        margins['threshold'] = _margin(lam, rhs)
    return TheoremCheck(theorem='thm3', margins=margins, inputs=inputs,
                        applicable=applicable, diagnostics=tuple(diagnostics))


# Lemmas and active-set statistics

def check_lemma1(
    instance: ProblemInstance,
    active_set: Sequence[int],
    signs: Sequence[int],
    delta: float,
    p: Optional[int] = None,
) -> Lemma1Check:
    """
    Distance from a segment's affine equilibrium to the true signal.

    bound = (||a_dagger|| + sqrt(1 - delta) ||eps|| + lambda sqrt(p)) / (1 - delta),
    with delta exact of order |active_set U true support| and p >= |active_set|.
    """
    _check_delta(delta)
    p = len(active_set) if p is None else p
    if p < len(active_set):
        raise InvalidArgumentError(f"p={p} is smaller than the active set size {len(active_set)}")
    equilibrium = steady_state_candidate(instance.matrix, active_set, signs,
                                         instance.measurement, instance.lam)
    actual = float(np.linalg.norm(equilibrium - instance.signal.values))
    norm_eps = float(np.linalg.norm(instance.noise))
    bound = (instance.signal.norm + math.sqrt(1.0 - delta) * norm_eps
             + instance.lam * math.sqrt(p)) / (1.0 - delta)
    return Lemma1Check(bound=bound, actual=actual, holds=actual <= bound)


def check_lemma2(trajectory: Trajectory, instance: ProblemInstance, p: int, delta: float) -> Lemma2Report:
    """
    Bounded distance along each switching segment.

    A segment qualifies when its active set has at most p nodes and its starting
    output is within C_delta(p) of the true signal. Every sample inside a qualifying
    segment must then stay within C_delta(p) * (1 + 1e-9). Trajectories whose
    segments all fail to qualify report 'precondition-not-met'.
    """
    if not instance.threshold.is_constant:
        raise InvalidArgumentError("Distance bound check needs a constant threshold")
    norm_eps = float(np.linalg.norm(instance.noise))
    bound = c_delta(p, delta, instance.signal.norm, norm_eps, instance.lam)
    limit = bound * (1.0 + LEMMA2_SLACK)
    truth = instance.signal.values
    checked = skipped = 0
    worst = 0.0
    violations: List[float] = []
    for segment in trajectory.segments:
        start_distance = float(np.linalg.norm(segment.start_output - truth))
        if len(segment.active_set) > p or start_distance > bound:
            skipped += 1
            continue
        checked += 1
        distances = [start_distance] + [
            float(np.linalg.norm(state.a - truth))
            for state in trajectory.samples
            if segment.start_time <= state.t <= segment.end_time
        ]
        worst = max(worst, max(distances))
        violations.extend(d for d in distances if d > limit)
    if checked == 0:
        status = 'precondition-not-met'
    else:
        status = 'violated' if violations else 'holds'
    return Lemma2Report(status=status, bound=bound, worst_distance=worst,
                        segments_checked=checked, segments_skipped=skipped,
                        violations=tuple(violations))


def active_set_stats(trajectory: Trajectory, optimal_support: Iterable[int]) -> ActiveSetStats:
    """Largest visited active set, whether every visited set lies in the support, and q_obs / S."""
    support = set(int(i) for i in optimal_support)
    visited = trajectory.visited_active_sets()
    if not visited:
        raise InvalidArgumentError("Trajectory has no samples")
    q_obs = max(len(active) for active in visited)
    contained = all(set(active) <= support for active in visited)
    ratio = q_obs / len(support) if support else float(q_obs > 0) * math.inf
    return ActiveSetStats(q_obs=q_obs, contained=contained, ratio=ratio)


# Convergence rate

def d_constant(
    matrix: Any,
    visited_active_sets: Sequence[Iterable[int]],
    final_active_set: Iterable[int],
    time_constant: float = 1.0,
) -> RateReport:
    """
    Largest Gram deviation over the unions of each visited set with the final set.

    The theoretical rate (1 - d) / tau is reported only when d < 1.
    """
    if not visited_active_sets:
        raise InvalidArgumentError("At least one visited active set is required")
    phi = as_array(matrix)
    final = set(int(i) for i in final_active_set)
    d = 0.0
    for active in visited_active_sets:
        union = np.array(sorted(final.union(int(i) for i in active)), dtype=int)
        columns = phi[:, union]
        d = max(d, gram_deviation(columns.T @ columns))
    rate = (1.0 - d) / time_constant if d < 1.0 else None
    return RateReport(d_constant=d, theoretical_rate=rate)


def theoretical_decay(delta: float, times: Any, time_constant: float = 1.0) -> np.ndarray:
    """exp(-(1 - delta) t / tau)."""
    if delta >= 1.0:
        raise InvalidArgumentError(f"Decay needs delta < 1, got {delta}")
    return np.exp(-(1.0 - delta) * np.asarray(times, dtype=float) / time_constant)


def fit_rate_from_errors(times: Any, errors: Any) -> RateReport:
    """
    Slope of log(error) against time, reported as a positive decay rate.

    Uses the samples with error in [1e-9, 0.5 * initial error].

    Raises:
        InsufficientDataError: With fewer than 10 usable samples
    """
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if times.shape != errors.shape or times.ndim != 1:
        raise InvalidArgumentError("times and errors must be 1-D arrays of equal length")
    if np.count_nonzero(errors > FIT_FLOOR) < FIT_MIN_SAMPLES:
        raise InsufficientDataError(
            f"Need at least {FIT_MIN_SAMPLES} samples with error above {FIT_FLOOR}"
        )
    in_window = (errors >= FIT_WINDOW_LOW) & (errors <= FIT_WINDOW_HIGH * errors[0])
    if np.count_nonzero(in_window) < FIT_MIN_SAMPLES:
        raise InsufficientDataError(
            f"Only {np.count_nonzero(in_window)} samples inside the fitting window"
        )
    slope, _ = np.polyfit(times[in_window], np.log(errors[in_window]), 1)
    window = (float(times[in_window][0]), float(times[in_window][-1]))
    return RateReport(fitted_rate=float(-slope), window=window,
                      samples_used=int(np.count_nonzero(in_window)))


def fit_rate(trajectory: Trajectory, u_star: Any) -> RateReport:
    """Fitted decay rate of ||u(t) - u_star|| along a trajectory."""
    return fit_rate_from_errors(trajectory.times(), trajectory.errors_to(np.asarray(u_star)))
