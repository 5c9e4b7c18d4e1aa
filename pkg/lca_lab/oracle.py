"""
Reference LASSO solver (ISTA) and first-order optimality checks.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from lca_lab.dynamics import soft_threshold
from lca_lab.ensemble import as_array
from lca_lab.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 100
POWER_TOL = 1e-10
STEP_SLACK = 1e-9
DEFAULT_MAX_ITERS = 20000
DEFAULT_TOL = 1e-10
DEFAULT_KKT_TOL = 1e-6


class SolveStatus(str, Enum):
    CONVERGED = 'converged'
    NOT_CONVERGED = 'not-converged'


class OptimalityCheck(NamedTuple):
    holds: bool
    max_violation: float


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Outcome of ista_solve."""

    solution: np.ndarray
    iterations: int
    final_objective: float
    kkt_residual: float
    status: SolveStatus
    tolerance: float
    step: float
    objective_history: Tuple[float, ...] = ()

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def support(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.solution))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'solution': self.solution.tolist(),
            'iterations': self.iterations,
            'final_objective': self.final_objective,
            'kkt_residual': self.kkt_residual,
            'status': self.status.value,
            'tolerance': self.tolerance,
            'step': self.step,
        }


def _check_problem(phi: np.ndarray, y: np.ndarray, lam: float, a: Optional[np.ndarray] = None):
    if phi.ndim != 2:
        raise InvalidArgumentError(f"Matrix must be 2-D, got shape {phi.shape}")
    if y.shape != (phi.shape[0],):
        raise InvalidArgumentError(f"Measurement has shape {y.shape}, expected ({phi.shape[0]},)")
    if a is not None and a.shape != (phi.shape[1],):
        raise InvalidArgumentError(f"Coefficients have shape {a.shape}, expected ({phi.shape[1]},)")
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidArgumentError(f"Threshold must be positive, got {lam}")


def objective(a: Any, matrix: Any, y: Any, lam: float) -> float:
    """LASSO energy 0.5 * ||y - Phi a||^2 + lambda * ||a||_1."""
    phi, y, a = as_array(matrix), np.asarray(y, dtype=float), np.asarray(a, dtype=float)
    _check_problem(phi, y, lam, a)
    residual = y - phi @ a
    return float(0.5 * residual @ residual + lam * np.sum(np.abs(a)))


def lipschitz_constant(matrix: Any, max_iters: int = POWER_ITERATIONS, tol: float = POWER_TOL) -> float:
    """Largest eigenvalue of Phi^T Phi by power iteration from a fixed start."""
    phi = as_array(matrix)
    v = np.ones(phi.shape[1]) / np.sqrt(phi.shape[1])
    estimate = 0.0
    for _ in range(max_iters):
        w = phi.T @ (phi @ v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - estimate) <= tol * norm:
            estimate = norm
            break
        estimate = norm
    return estimate


def check_optimality(a: Any, matrix: Any, y: Any, lam: float, tol: float = DEFAULT_KKT_TOL) -> OptimalityCheck:
    """
    Subgradient conditions of the LASSO at a.

    On the support Phi_n^T (y - Phi a) must equal lambda * sign(a_n); off the support
    its magnitude must not exceed lambda. The violation is the largest deviation.
    """
    phi, y, a = as_array(matrix), np.asarray(y, dtype=float), np.asarray(a, dtype=float)
    _check_problem(phi, y, lam, a)
    correlation = phi.T @ (y - phi @ a)
    on = a != 0
    violation = 0.0
    if on.any():
        violation = float(np.max(np.abs(correlation[on] - lam * np.sign(a[on]))))
    if (~on).any():
        violation = max(violation, float(np.max(np.abs(correlation[~on]) - lam)))
    violation = max(violation, 0.0)
    return OptimalityCheck(holds=violation <= tol, max_violation=violation)


def ista_solve(
    matrix: Any,
    y: Any,
    lam: float,
    step: Optional[float] = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    kkt_tol: float = DEFAULT_KKT_TOL,
    a0: Any = None,
    record_history: bool = False,
) -> SolveResult:
    """
    Solve min_a 0.5 ||y - Phi a||^2 + lambda ||a||_1 with proximal gradient steps.

    Iterates a <- T_{lambda step}(a - step * Phi^T (Phi a - y)) until the update is
    at most tol * step in the max norm. The status is 'converged' only when the
    iteration settled and the KKT residual is within kkt_tol.

    Args:
        matrix: Measurement matrix
        y: Measurement vector
        lam: Threshold, positive
        step: Step size, at most 1/L; defaults to 1/L from power iteration
        max_iters: Iteration budget
        tol: Stopping tolerance on the update
        kkt_tol: Tolerance for the optimality check
        a0: Starting point, zeros when omitted
        record_history: Keep the objective after every iteration

    Returns:
        SolveResult

    Raises:
        InvalidArgumentError: On bad dimensions, threshold or step
    """
    phi, y = as_array(matrix), np.asarray(y, dtype=float)
    _check_problem(phi, y, lam)
    lipschitz = lipschitz_constant(phi)
    if step is None:
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    elif not step > 0 or step * lipschitz > 1.0 + STEP_SLACK:
        raise InvalidArgumentError(
            f"Step must lie in (0, 1/L] with L={lipschitz:.6g}, got {step}"
        )

    a = np.zeros(phi.shape[1]) if a0 is None else np.array(a0, dtype=float)
    history = []
    settled = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        gradient = phi.T @ (phi @ a - y)
        updated = soft_threshold(a - step * gradient, lam * step)
        change = float(np.max(np.abs(updated - a), initial=0.0))
        a = updated
        if record_history:
            history.append(objective(a, phi, y, lam))
        if change <= tol * step:
            settled = True
            break

    check = check_optimality(a, phi, y, lam, tol=kkt_tol)
    status = SolveStatus.CONVERGED if settled and check.holds else SolveStatus.NOT_CONVERGED
    if status is SolveStatus.NOT_CONVERGED:
        logger.warning(
            f"ISTA did not converge: iterations={iterations}, settled={settled}, "
            f"kkt_residual={check.max_violation:.3g}"
        )
    return SolveResult(
        solution=a,
        iterations=iterations,
        final_objective=objective(a, phi, y, lam),
        kkt_residual=check.max_violation,
        status=status,
        tolerance=tol,
        step=float(step),
        objective_history=tuple(history),
    )
