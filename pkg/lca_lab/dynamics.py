"""
LCA dynamics
Simulates tau * du/dt = -u - (Phi^T Phi - I) a + Phi^T y with a = T_lambda(u)
using either a fixed-step Runge-Kutta integrator or an exact switched-linear
propagator that jumps between threshold crossings.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from lca_lab.errors import (
    DivergenceSuspectedError,
    InvalidArgumentError,
    NumericFailureError,
    SingularSystemError,
)

if TYPE_CHECKING:
    from lca_lab.ensemble import ProblemInstance

logger = logging.getLogger(__name__)

# Simulation defaults (times in units of tau)
DEFAULT_DT = 0.01
DEFAULT_T_MAX = 15.0
DEFAULT_SAMPLE_EVERY = 0.1
DEFAULT_EVENT_TOL = 1e-12
CONVERGENCE_TOL = 1e-9

# Linear algebra
SINGULAR_TOL = 1e-10  # relative to the largest eigenvalue
GRAM_CACHE_MAX_N = 1000

# Event search for the switched backend
EVENT_GRID_POINTS = 64
SEARCH_WINDOW = 1.0
MAX_SWITCHES_PER_NODE = 50
CHI_SERIES_RADIUS = 1e-2
CHI_SERIES_TERMS = 12

BACKEND_FIXED = 'fixed'
BACKEND_SWITCHED = 'switched'
THRESHOLD_KINDS = ('constant', 'exponential-decay')


@dataclass(frozen=True)
class ThresholdSchedule:
    """
    Threshold lambda(t), either constant or decaying exponentially to a floor.

    lambda(t) = lambda_end + (lambda0 - lambda_end) * exp(-decay_rate * t / tau)
    """

    kind: str = 'constant'
    lambda0: float = 0.1
    lambda_end: Optional[float] = None
    decay_rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in THRESHOLD_KINDS:
            raise InvalidArgumentError(
                f"Unknown threshold kind '{self.kind}'. Available kinds: {list(THRESHOLD_KINDS)}"
            )
        if not np.isfinite(self.lambda0) or self.lambda0 <= 0:
            raise InvalidArgumentError(f"lambda0 must be positive, got {self.lambda0}")
        if self.kind == 'constant':
            if self.lambda_end is not None or self.decay_rate is not None:
                raise InvalidArgumentError(
                    "Constant threshold takes no lambda_end or decay_rate"
                )
            return
        if self.lambda_end is None or self.decay_rate is None:
            raise InvalidArgumentError("Decaying threshold needs lambda_end and decay_rate")
        if not 0 < self.lambda_end <= self.lambda0:
            raise InvalidArgumentError(
                f"lambda_end must satisfy 0 < lambda_end <= lambda0, "
                f"got lambda_end={self.lambda_end}, lambda0={self.lambda0}"
            )
        if self.decay_rate <= 0:
            raise InvalidArgumentError(f"decay_rate must be positive, got {self.decay_rate}")

    @classmethod
    def constant(cls, lam: float) -> 'ThresholdSchedule':
        return cls(kind='constant', lambda0=float(lam))

    @classmethod
    def exponential_decay(
        cls, lambda0: float, lambda_end: float, decay_rate: float = 1.0
    ) -> 'ThresholdSchedule':
        return cls(
            kind='exponential-decay',
            lambda0=float(lambda0),
            lambda_end=float(lambda_end),
            decay_rate=float(decay_rate),
        )

    @property
    def is_constant(self) -> bool:
        return self.kind == 'constant'

    @property
    def floor(self) -> float:
        """Smallest threshold the schedule ever reaches."""
        return self.lambda0 if self.is_constant else float(self.lambda_end)

    def value(self, t: float, time_constant: float = 1.0) -> float:
        if self.is_constant:
            return self.lambda0
        excess = self.lambda0 - self.lambda_end
        return self.lambda_end + excess * float(np.exp(-self.decay_rate * t / time_constant))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'lambda0': self.lambda0,
            'lambda_end': self.lambda_end,
            'decay_rate': self.decay_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ThresholdSchedule':
        if 'lambda0' not in data:
            raise InvalidArgumentError("Missing required field: lambda0")
        return cls(
            kind=data.get('kind', 'constant'),
            lambda0=data['lambda0'],
            lambda_end=data.get('lambda_end'),
            decay_rate=data.get('decay_rate'),
        )


def eval_threshold(schedule: ThresholdSchedule, t: float, time_constant: float = 1.0) -> float:
    """
    Evaluate lambda(t) for a schedule.

    Args:
        schedule: Threshold schedule
        t: Time, t >= 0
        time_constant: tau, the decay rate is expressed per unit tau

    Returns:
        Threshold value at time t
    """
    if t < 0:
        raise InvalidArgumentError(f"Threshold time must be non-negative, got {t}")
    return schedule.value(t, time_constant)


def soft_threshold(u: Any, lam: float) -> np.ndarray:
    """
    Entrywise soft thresholding T_lambda.

    Zero where |u_n| <= lambda, u_n - lambda * sign(u_n) elsewhere.

    Raises:
        InvalidArgumentError: If lambda is not positive
    """
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidArgumentError(f"Threshold must be positive, got {lam}")
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - lam, 0.0)


@dataclass(frozen=True, eq=False)
class LcaState:
    """Snapshot of the network at time t."""

    t: float
    u: np.ndarray
    a: np.ndarray
    active_set: Tuple[int, ...]
    signs: Tuple[int, ...]
    threshold: float

    @classmethod
    def from_internal(cls, t: float, u: np.ndarray, lam: float) -> 'LcaState':
        u = np.array(u, dtype=float)
        active = np.flatnonzero(np.abs(u) > lam)
        u.setflags(write=False)
        a = soft_threshold(u, lam)
        a.setflags(write=False)
        return cls(
            t=float(t),
            u=u,
            a=a,
            active_set=tuple(int(i) for i in active),
            signs=tuple(int(v) for v in np.sign(u[active])),
            threshold=float(lam),
        )


@dataclass(frozen=True)
class SwitchEvent:
    """
    Active-set change at one instant.

    Crossings closer than the event tolerance are merged into one event. A node whose
    sign flips within a single fixed step appears in both lists.
    """

    time: float
    activated: Tuple[int, ...]
    deactivated: Tuple[int, ...]
    continuity_gap: float = 0.0

    def rows(self) -> List[Tuple[float, int, str]]:
        out = [(self.time, node, 'deactivate') for node in self.deactivated]
        out.extend((self.time, node, 'activate') for node in self.activated)
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            'time': self.time,
            'activated': list(self.activated),
            'deactivated': list(self.deactivated),
            'continuity_gap': self.continuity_gap,
        }


@dataclass(frozen=True, eq=False)
class Segment:
    """Time interval on which the active set and its signs stay fixed."""

    start_time: float
    end_time: float
    active_set: Tuple[int, ...]
    signs: Tuple[int, ...]
    start_output: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Result of one simulation run."""

    samples: Tuple[LcaState, ...]
    switch_events: Tuple[SwitchEvent, ...]
    backend: str
    final_state: LcaState
    segments: Tuple[Segment, ...]
    converged: bool
    converged_time: Optional[float] = None
    sign_checks: int = 0

    def times(self) -> np.ndarray:
        return np.array([state.t for state in self.samples])

    def internal_states(self) -> np.ndarray:
        return np.stack([state.u for state in self.samples])

    def outputs(self) -> np.ndarray:
        return np.stack([state.a for state in self.samples])

    def active_counts(self) -> np.ndarray:
        return np.array([len(state.active_set) for state in self.samples], dtype=int)

    def errors_to(self, u_star: np.ndarray) -> np.ndarray:
        """l2 distance of every sampled internal state to u_star."""
        return np.linalg.norm(self.internal_states() - np.asarray(u_star)[None, :], axis=1)

    def visited_active_sets(self) -> List[Tuple[int, ...]]:
        seen: Dict[Tuple[int, ...], None] = {}
        for segment in self.segments:
            seen.setdefault(segment.active_set, None)
        for state in self.samples:
            seen.setdefault(state.active_set, None)
        return list(seen)

    def visited_sign_patterns(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        seen: Dict[Tuple[Tuple[int, ...], Tuple[int, ...]], None] = {}
        for segment in self.segments:
            seen.setdefault((segment.active_set, segment.signs), None)
        return list(seen)

    @property
    def max_active_size(self) -> int:
        return max((len(active) for active in self.visited_active_sets()), default=0)


def _matrix_entries(matrix: Any) -> np.ndarray:
    return np.asarray(getattr(matrix, 'entries', matrix), dtype=float)


class LcaSystem:
    """
    Right-hand side of the LCA ODE for one problem instance.

    The Gram matrix is cached for n <= gram_cache_max_n, larger problems apply
    Phi and Phi^T as two rectangular products.
    """

    def __init__(self, instance: 'ProblemInstance', gram_cache_max_n: int = GRAM_CACHE_MAX_N):
        self.phi = _matrix_entries(instance.matrix)
        self.y = np.asarray(instance.measurement, dtype=float)
        self.tau = float(instance.time_constant)
        self.schedule = instance.threshold
        self.n = self.phi.shape[1]
        self.drive = self.phi.T @ self.y
        self.gram = self.phi.T @ self.phi if self.n <= gram_cache_max_n else None

    def coupling(self, a: np.ndarray) -> np.ndarray:
        """(Phi^T Phi - I) a, touching only the active columns."""
        active = np.flatnonzero(a)
        if self.gram is not None:
            return self.gram[:, active] @ a[active] - a
        return self.phi.T @ (self.phi[:, active] @ a[active]) - a

    def rhs(self, u: np.ndarray, lam: float) -> np.ndarray:
        a = soft_threshold(u, lam)
        return (-u - self.coupling(a) + self.drive) / self.tau

    def threshold(self, t: float) -> float:
        return self.schedule.value(t, self.tau)

    def convergence_scale(self) -> float:
        return 1.0 + float(np.max(np.abs(self.drive), initial=0.0))


def lca_rhs(u: Any, lam: float, instance: 'ProblemInstance') -> np.ndarray:
    """
    Evaluate du/dt of the LCA at internal state u for threshold lambda.

    Raises:
        InvalidArgumentError: On dimension mismatch or non-positive lambda
    """
    u = np.asarray(u, dtype=float)
    system = LcaSystem(instance)
    if u.shape != (system.n,):
        raise InvalidArgumentError(f"State has shape {u.shape}, expected ({system.n},)")
    return system.rhs(u, lam)


def _initial_state(u0: Any, n: int) -> np.ndarray:
    if u0 is None:
        return np.zeros(n)
    u0 = np.array(u0, dtype=float)
    if u0.shape != (n,):
        raise InvalidArgumentError(f"Initial state has shape {u0.shape}, expected ({n},)")
    if not np.all(np.isfinite(u0)):
        raise InvalidArgumentError("Initial state must be finite")
    return u0


def default_output_times(t_max: float, sample_every: float = DEFAULT_SAMPLE_EVERY) -> np.ndarray:
    """Uniform sample grid from 0 to t_max inclusive."""
    count = max(int(round(t_max / sample_every)), 1)
    return np.linspace(0.0, t_max, count + 1)


def _checked_output_times(output_times: Optional[Sequence[float]], t_max: float) -> np.ndarray:
    if output_times is None:
        return default_output_times(t_max)
    times = np.asarray(output_times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise InvalidArgumentError("output_times must be a non-empty 1-D sequence")
    if np.any(np.diff(times) <= 0):
        raise InvalidArgumentError("output_times must be strictly increasing")
    if times[0] < 0 or times[-1] > t_max * (1 + 1e-12):
        raise InvalidArgumentError(f"output_times must lie in [0, t_max={t_max}]")
    return times


def _membership_change(
    old_active: np.ndarray, old_signs: np.ndarray, new_active: np.ndarray, new_signs: np.ndarray
) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    before = dict(zip(old_active.tolist(), old_signs.tolist()))
    after = dict(zip(new_active.tolist(), new_signs.tolist()))
    activated = [j for j, z in after.items() if before.get(j) != z]
    deactivated = [j for j, z in before.items() if after.get(j) != z]
    return tuple(sorted(activated)), tuple(sorted(deactivated))


def simulate_fixed_step(
    instance: 'ProblemInstance',
    u0: Any = None,
    dt: float = DEFAULT_DT,
    t_max: float = DEFAULT_T_MAX,
    output_times: Optional[Sequence[float]] = None,
    stop_on_convergence: bool = True,
    convergence_tol: float = CONVERGENCE_TOL,
) -> Trajectory:
    """
    Integrate the LCA with the classical fourth-order Runge-Kutta scheme.

    The threshold schedule is sampled at the stage times, so decaying thresholds
    are supported. Output times are rounded to the nearest step boundary. Once
    ||du/dt||_inf <= convergence_tol * (1 + ||Phi^T y||_inf) (and a decaying
    threshold has reached its floor) the run stops and the remaining samples repeat
    the converged state.

    Args:
        instance: Problem instance
        u0: Initial internal state, zeros when omitted
        dt: Step size, in the time unit of tau
        t_max: Horizon
        output_times: Sample times, defaults to a 0.1 tau grid
        stop_on_convergence: Stop early once the convergence criterion holds
        convergence_tol: Relative tolerance of the convergence criterion

    Returns:
        Trajectory with backend 'fixed'

    Raises:
        InvalidArgumentError: On bad step, horizon or sample times
        NumericFailureError: If the state stops being finite
    """
    if not dt > 0:
        raise InvalidArgumentError(f"Step size must be positive, got {dt}")
    if t_max < dt:
        raise InvalidArgumentError(f"t_max ({t_max}) must be at least dt ({dt})")

    system = LcaSystem(instance)
    u = _initial_state(u0, system.n)
    n_steps = int(np.ceil(t_max / dt - 1e-9))
    times = _checked_output_times(output_times, t_max)
    sample_steps = np.minimum(np.rint(times / dt).astype(int), n_steps)
    sample_steps = np.unique(sample_steps)
    scale = system.convergence_scale()
    floor = system.schedule.floor

    lam = system.threshold(0.0)
    active = np.flatnonzero(np.abs(u) > lam)
    signs = np.sign(u[active]).astype(int)
    segments: List[Segment] = []
    segment_start = (0.0, active, signs, soft_threshold(u, lam))
    events: List[SwitchEvent] = []
    samples: List[LcaState] = []
    next_sample = 0
    converged_time: Optional[float] = None

    if sample_steps[0] == 0:
        samples.append(LcaState.from_internal(0.0, u, lam))
        next_sample = 1

    step = 0
    while step < n_steps:
        t = step * dt
        lam_start = system.threshold(t)
        k1 = system.rhs(u, lam_start)
        if stop_on_convergence and np.max(np.abs(k1), initial=0.0) <= convergence_tol * scale:
            if abs(lam_start - floor) <= convergence_tol * scale:
                converged_time = t
                logger.debug(f"Fixed-step run converged at t={t:.4g}")
                break
        lam_mid = system.threshold(t + 0.5 * dt)
        lam_end = system.threshold(t + dt)
        k2 = system.rhs(u + 0.5 * dt * k1, lam_mid)
        k3 = system.rhs(u + 0.5 * dt * k2, lam_mid)
        k4 = system.rhs(u + dt * k3, lam_end)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        step += 1
        t_next = step * dt
        if not np.all(np.isfinite(u)):
            logger.error(f"Non-finite LCA state after step {step}")
            raise NumericFailureError('Non-finite state in fixed-step integration', t=t_next)

        new_active = np.flatnonzero(np.abs(u) > lam_end)
        new_signs = np.sign(u[new_active]).astype(int)
        if not (np.array_equal(new_active, active) and np.array_equal(new_signs, signs)):
            activated, deactivated = _membership_change(active, signs, new_active, new_signs)
            events.append(SwitchEvent(time=t_next, activated=activated, deactivated=deactivated))
            start_t, start_active, start_signs, start_a = segment_start
            segments.append(
                Segment(start_t, t_next, tuple(start_active.tolist()),
                        tuple(start_signs.tolist()), start_a)
            )
            segment_start = (t_next, new_active, new_signs, soft_threshold(u, lam_end))
            active, signs = new_active, new_signs

        while next_sample < len(sample_steps) and sample_steps[next_sample] == step:
            samples.append(LcaState.from_internal(t_next, u, lam_end))
            next_sample += 1

    # Remaining samples repeat the converged state
    while next_sample < len(sample_steps):
        t_sample = sample_steps[next_sample] * dt
        samples.append(LcaState.from_internal(t_sample, u, system.threshold(t_sample)))
        next_sample += 1

    t_final = n_steps * dt
    lam_final = system.threshold(t_final)
    if converged_time is None:
        residual = np.max(np.abs(system.rhs(u, lam_final)), initial=0.0)
        if residual <= convergence_tol * scale and abs(lam_final - floor) <= convergence_tol * scale:
            converged_time = t_final
    start_t, start_active, start_signs, start_a = segment_start
    segments.append(
        Segment(start_t, t_final, tuple(start_active.tolist()), tuple(start_signs.tolist()), start_a)
    )
    return Trajectory(
        samples=tuple(samples),
        switch_events=tuple(events),
        backend=BACKEND_FIXED,
        final_state=LcaState.from_internal(t_final, u, lam_final),
        segments=tuple(segments),
        converged=converged_time is not None,
        converged_time=converged_time,
    )


def _eigen_floor(mu: np.ndarray) -> float:
    scale = float(np.max(np.abs(mu), initial=0.0))
    return SINGULAR_TOL * (scale if scale > 0 else 1.0)


def _phi_factor(mu: np.ndarray, s: Any, floor: float) -> np.ndarray:
    """(1 - exp(-mu s)) / mu, equal to s where |mu| is below the singular floor."""
    small = np.abs(mu) < floor
    safe = np.where(small, 1.0, mu)
    value = -np.expm1(-safe * s) / safe
    return np.where(small, s, value)


def _psi_factor(mu: np.ndarray, s: Any) -> np.ndarray:
    """Integral of exp(-(s - v)) exp(-mu v) over [0, s]."""
    gap = 1.0 - mu
    degenerate = gap == 0.0
    safe = np.where(degenerate, 1.0, gap)
    value = np.exp(-s) * np.expm1(safe * s) / safe
    return np.where(degenerate, s * np.exp(-s), value)


def _chi_factor(mu: np.ndarray, s: Any, phi_values: np.ndarray) -> np.ndarray:
    """
    Integral of exp(-(s - v)) * phi(mu, v) over [0, s].

    Equals (phi(mu, s) - phi(1, s)) / (1 - mu); near mu = 1 the divided difference
    is replaced by its series in (1 - mu), whose coefficients are regularized lower
    incomplete gamma functions.
    """
    gap = 1.0 - mu
    near = np.abs(gap) < CHI_SERIES_RADIUS
    safe = np.where(near, 1.0, gap)
    value = (phi_values + np.expm1(-s)) / safe
    if np.any(near):
        series = np.zeros(np.broadcast(s, mu).shape)
        for k in range(1, CHI_SERIES_TERMS + 1):
            series = series + gap ** (k - 1) * special.gammainc(k + 1, s)
        value = np.where(near, series, value)
    return value


def phi_fun(A: Any, t: float) -> np.ndarray:
    """
    Compute (I - exp(-A t)) A^{-1} for a symmetric matrix A.

    Eigenvalues with magnitude below SINGULAR_TOL times the largest one use the
    limit value t, so the result is defined for singular A.

    Args:
        A: Symmetric matrix
        t: Duration, t >= 0

    Returns:
        Matrix of the same shape as A
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgumentError(f"phi_fun needs a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-12):
        raise InvalidArgumentError("phi_fun needs a symmetric matrix")
    if t < 0:
        raise InvalidArgumentError(f"Duration must be non-negative, got {t}")
    mu, vectors = linalg.eigh(A)
    factors = _phi_factor(mu, float(t), _eigen_floor(mu))
    return (vectors * factors) @ vectors.T


def steady_state_candidate(
    matrix: Any,
    active_set: Sequence[int],
    signs: Sequence[int],
    y: Any,
    lam: float,
) -> np.ndarray:
    """
    Affine equilibrium of one segment: solve Phi_G^T Phi_G a = Phi_G^T y - lambda z_G.

    Args:
        matrix: Measurement matrix (MeasurementMatrix or array)
        active_set: Indices of the active set
        signs: Signs z on the active set
        y: Measurement vector
        lam: Threshold

    Returns:
        Length-N vector supported on active_set

    Raises:
        SingularSystemError: If Phi_G is numerically rank deficient
    """
    phi = _matrix_entries(matrix)
    idx = np.asarray(active_set, dtype=int)
    z = np.asarray(signs, dtype=float)
    if idx.shape != z.shape:
        raise InvalidArgumentError("active_set and signs must have the same length")
    out = np.zeros(phi.shape[1])
    if idx.size == 0:
        return out
    columns = phi[:, idx]
    gram = columns.T @ columns
    mu = linalg.eigvalsh(gram)
    if mu[0] <= SINGULAR_TOL * mu[-1]:
        raise SingularSystemError(
            f"Gram matrix of active set {idx.tolist()} is singular "
            f"(eigenvalue ratio {mu[0] / mu[-1]:.3g})"
        )
    rhs = columns.T @ np.asarray(y, dtype=float) - lam * z
    out[idx] = linalg.solve(gram, rhs, assume_a='pos')
    return out


class _SegmentPropagator:
    """
    Closed-form LCA solution on a fixed active set, anchored at local time s = 0.

    Active outputs follow a_G(s) = exp(-A s) a_G(0) + phi(A, s) (Phi_G^T y - lambda z),
    with A = Phi_G^T Phi_G diagonalized once. Inactive states integrate the forcing
    Phi_I^T (y - Phi_G a_G(s)) exactly in the same eigenbasis. s is measured in tau.
    """

    def __init__(self, system: LcaSystem, lam: float, active: np.ndarray, signs: np.ndarray,
                 u_start: np.ndarray):
        self.lam = lam
        self.n = system.n
        self.active = active
        self.signs = signs.astype(float)
        self.inactive = np.setdiff1d(np.arange(system.n), active)
        phi_active = system.phi[:, active]
        phi_inactive = system.phi[:, self.inactive]
        if active.size:
            try:
                self.mu, self.vectors = linalg.eigh(phi_active.T @ phi_active)
            except linalg.LinAlgError as exc:
                raise NumericFailureError(
                    f"Eigendecomposition failed for active set {active.tolist()}"
                ) from exc
        else:
            self.mu, self.vectors = np.zeros(0), np.zeros((0, 0))
        self.floor = _eigen_floor(self.mu)
        self.beta = self.vectors.T @ (phi_active.T @ system.y - lam * self.signs)
        self.coupling = (phi_inactive.T @ phi_active) @ self.vectors
        self.drive = phi_inactive.T @ system.y
        self.anchor(u_start)

    def anchor(self, u: np.ndarray):
        self.c = self.vectors.T @ (u[self.active] - self.lam * self.signs)
        self.u_inactive = u[self.inactive].copy()

    def evaluate(self, s: Any) -> np.ndarray:
        """Internal states at local times s, shape (len(s), N)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))[:, None]
        phi_values = _phi_factor(self.mu, s, self.floor)
        weights = np.exp(-self.mu * s) * self.c + phi_values * self.beta
        integral = self.c * _psi_factor(self.mu, s) + self.beta * _chi_factor(self.mu, s, phi_values)
        decay = np.exp(-s)
        out = np.empty((s.shape[0], self.n))
        out[:, self.active] = weights @ self.vectors.T + self.lam * self.signs
        out[:, self.inactive] = (
            decay * self.u_inactive + (1.0 - decay) * self.drive - integral @ self.coupling.T
        )
        return out

    def crossing(self, u: np.ndarray) -> np.ndarray:
        """Positive entries mark nodes that left their operating region."""
        g = np.empty_like(u)
        g[..., self.inactive] = np.abs(u[..., self.inactive]) - self.lam
        g[..., self.active] = self.lam - self.signs * u[..., self.active]
        return g

    def signs_stable(self, u: np.ndarray) -> bool:
        return bool(np.all(self.signs * u[..., self.active] > 0))


def _search_grid(window: float, points: int) -> np.ndarray:
    half = max(points // 2, 2)
    geometric = np.geomspace(window * 1e-6, window, half)
    uniform = np.linspace(0.0, window, points - half + 1)[1:]
    return np.unique(np.concatenate([geometric, uniform]))


def simulate_switched(
    instance: 'ProblemInstance',
    u0: Any = None,
    t_max: float = DEFAULT_T_MAX,
    event_tol: float = DEFAULT_EVENT_TOL,
    output_times: Optional[Sequence[float]] = None,
    max_switches: Optional[int] = None,
    grid_points: int = EVENT_GRID_POINTS,
    window: float = SEARCH_WINDOW,
    convergence_tol: float = CONVERGENCE_TOL,
) -> Trajectory:
    """
    Propagate the LCA exactly between threshold crossings.

    Each segment is solved in closed form. The next crossing is located by sampling
    the closed form on a grid (geometrically refined near the segment start) over a
    search window of `window` tau, then bisecting to event_tol. Crossings within
    event_tol of each other are one multi-node switch. Only constant thresholds are
    supported.

    Args:
        instance: Problem instance with a constant threshold
        u0: Initial internal state, zeros when omitted
        t_max: Horizon
        event_tol: Time tolerance of event location
        output_times: Sample times, defaults to a 0.1 tau grid
        max_switches: Event budget, defaults to 50 * N
        grid_points: Sampling grid size per search window
        window: Search window length in units of tau
        convergence_tol: Relative tolerance used to report convergence

    Returns:
        Trajectory with backend 'switched'

    Raises:
        InvalidArgumentError: If the threshold is not constant
        DivergenceSuspectedError: If the event budget is exhausted
        NumericFailureError: On eigendecomposition failure, a sign flip inside a
            segment or a continuity gap above 10 * event_tol
    """
    if not instance.threshold.is_constant:
        raise InvalidArgumentError(
            "The switched backend needs a constant threshold; use simulate_fixed_step "
            "for decaying schedules"
        )
    if not t_max > 0:
        raise InvalidArgumentError(f"t_max must be positive, got {t_max}")
    if not event_tol > 0:
        raise InvalidArgumentError(f"event_tol must be positive, got {event_tol}")

    system = LcaSystem(instance)
    tau = system.tau
    lam = instance.threshold.lambda0
    u = _initial_state(u0, system.n)
    times = _checked_output_times(output_times, t_max)
    budget = max_switches if max_switches is not None else MAX_SWITCHES_PER_NODE * system.n
    scale = system.convergence_scale()

    active = np.flatnonzero(np.abs(u) > lam)
    signs = np.sign(u[active]).astype(int)
    propagator = _SegmentPropagator(system, lam, active, signs, u)
    segment_start_t, segment_start_a = 0.0, soft_threshold(u, lam)

    samples: List[LcaState] = []
    events: List[SwitchEvent] = []
    segments: List[Segment] = []
    next_sample = 0
    sign_checks = 0
    converged_time: Optional[float] = None
    t_anchor = 0.0
    flipped = np.zeros(0, dtype=int)

    while t_anchor < t_max:
        final_window = window * tau >= t_max - t_anchor
        span = (t_max - t_anchor) / tau if final_window else window
        grid = _search_grid(span, grid_points)
        states = propagator.evaluate(grid)
        crossed = np.any(propagator.crossing(states) > 0, axis=1)

        if crossed.any():
            first = int(np.argmax(crossed))
            if first > 0 and not propagator.signs_stable(states[:first]):
                raise NumericFailureError('Active node changed sign inside a segment',
                                          t=t_anchor)
            sign_checks += 1
            lo = grid[first - 1] if first > 0 else 0.0
            hi = grid[first]
            while (hi - lo) * tau > event_tol:
                mid = 0.5 * (lo + hi)
                if np.any(propagator.crossing(propagator.evaluate(mid)[0]) > 0):
                    hi = mid
                else:
                    lo = mid
            s_end = hi
        else:
            if not propagator.signs_stable(states):
                raise NumericFailureError('Active node changed sign inside a segment',
                                          t=t_anchor)
            sign_checks += 1
            s_end = span

        is_last = final_window and not crossed.any()
        t_end = t_max if is_last else t_anchor + s_end * tau
        while next_sample < len(times) and (
            times[next_sample] < t_end or (is_last and times[next_sample] <= t_max)
        ):
            local = (times[next_sample] - t_anchor) / tau
            samples.append(
                LcaState.from_internal(times[next_sample], propagator.evaluate(local)[0], lam)
            )
            next_sample += 1

        u = propagator.evaluate(s_end)[0]
        if not np.all(np.isfinite(u)):
            raise NumericFailureError('Non-finite state in switched propagation', t=t_end)

        flipped = np.flatnonzero(propagator.crossing(u) > 0) if crossed.any() else flipped[:0]
        if flipped.size:
            was_active = np.isin(flipped, active)
            deactivated = flipped[was_active]
            activated = flipped[~was_active]
            keep = ~np.isin(active, deactivated)
            merged = np.concatenate([active[keep], activated])
            merged_signs = np.concatenate(
                [signs[keep], np.sign(u[activated]).astype(int)]
            )
            order = np.argsort(merged)
            segments.append(Segment(segment_start_t, t_end, tuple(active.tolist()),
                                    tuple(signs.tolist()), segment_start_a))
            active, signs = merged[order], merged_signs[order]
            propagator = _SegmentPropagator(system, lam, active, signs, u)
            gap = float(np.max(np.abs(propagator.evaluate(0.0)[0] - u), initial=0.0))
            if gap > 10 * event_tol:
                raise NumericFailureError(f"State discontinuity {gap:.3g} at switch", t=t_end)
            events.append(SwitchEvent(
                time=t_end,
                activated=tuple(int(j) for j in activated),
                deactivated=tuple(int(j) for j in deactivated),
                continuity_gap=gap,
            ))
            segment_start_t, segment_start_a = t_end, soft_threshold(u, lam)
            if len(events) > budget:
                logger.error(f"Switch budget of {budget} events exhausted at t={t_end:.6g}")
                raise DivergenceSuspectedError(
                    f"More than {budget} switch events; trajectory may be chattering", t=t_end
                )
        else:
            propagator.anchor(u)
            if converged_time is None:
                residual = np.max(np.abs(system.rhs(u, lam)), initial=0.0)
                if residual <= convergence_tol * scale:
                    converged_time = t_end
        t_anchor = t_end

    # A switch landing exactly on t_max leaves the last samples unvisited
    while next_sample < len(times):
        local = max(times[next_sample] - t_anchor, 0.0) / tau
        samples.append(LcaState.from_internal(times[next_sample], propagator.evaluate(local)[0], lam))
        next_sample += 1

    segments.append(Segment(segment_start_t, t_max, tuple(active.tolist()),
                            tuple(signs.tolist()), segment_start_a))
    return Trajectory(
        samples=tuple(samples),
        switch_events=tuple(events),
        backend=BACKEND_SWITCHED,
        final_state=LcaState.from_internal(t_max, u, lam),
        segments=tuple(segments),
        converged=converged_time is not None,
        converged_time=converged_time,
        sign_checks=sign_checks,
    )


def simulate(
    instance: 'ProblemInstance',
    backend: str = BACKEND_FIXED,
    u0: Any = None,
    t_max: float = DEFAULT_T_MAX,
    dt: float = DEFAULT_DT,
    event_tol: float = DEFAULT_EVENT_TOL,
    output_times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Dispatch to the named backend ('fixed' or 'switched')."""
    if backend == BACKEND_FIXED:
        return simulate_fixed_step(instance, u0=u0, dt=dt, t_max=t_max, output_times=output_times)
    if backend == BACKEND_SWITCHED:
        return simulate_switched(instance, u0=u0, t_max=t_max, event_tol=event_tol,
                                 output_times=output_times)
    raise InvalidArgumentError(
        f"Unknown backend '{backend}'. Available backends: {[BACKEND_FIXED, BACKEND_SWITCHED]}"
    )
