"""Symbol-level precoding that maximizes the constructive-interference margin.

The margin problem ``max t s.t. T w >= t, ||w||^2 <= P_m`` is solved through its
Lagrangian dual, a least-norm problem over the probability simplex, and the
waveform is recovered in closed form from the dual optimum.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import solve
from scipy.optimize import nnls

from afdm.core import check_psk_order
from utils.errors import DomainError, InfeasibleProblemError, InputShapeError

logger = logging.getLogger(__name__)

_UNIT_MODULUS_TOL = 1e-9


def ci_angle(q: int) -> float:
    """Half-width of a Q-PSK decision sector."""
    return np.pi / check_psk_order(q)


def ci_margin(h_row: np.ndarray, x: np.ndarray, symbol: complex, phi: float) -> float:
    z = complex(np.dot(h_row, x) * np.conj(symbol))
    return z.real * np.sin(phi) - abs(z.imag) * np.cos(phi)


@dataclass
class PrecodeProblem:
    t_matrix: np.ndarray
    power_budget: float
    symbols: np.ndarray
    phi_angle: float

    @property
    def n_subcarriers(self) -> int:
        return self.symbols.shape[0]


@dataclass
class DualQpResult:
    delta: np.ndarray
    converged: bool
    iterations: int
    objective: float


@dataclass
class PrecodeSolution:
    x: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    margin: float
    converged: bool = True
    iterations: int = 0

    def constraint_residual(self, problem: PrecodeProblem) -> float:
        """|t - min_k (T w)_k|, zero at a primal-dual optimum."""
        return float(abs(self.margin - np.min(problem.t_matrix @ self.w)))

    def to_record(self, problem: PrecodeProblem) -> Dict[str, Any]:
        return {
            "t_matrix": problem.t_matrix.tolist(),
            "delta": self.delta.tolist(),
            "w": self.w.tolist(),
            "t": float(self.margin),
            "power_budget": float(problem.power_budget),
            "converged": bool(self.converged),
        }


def build_precode_problem(h: np.ndarray, symbols: np.ndarray, q: int, power_budget: float) -> PrecodeProblem:
    h = np.asarray(h, dtype=complex)
    symbols = np.asarray(symbols, dtype=complex).reshape(-1)
    n = symbols.shape[0]
    if h.shape != (n, n):
        raise InputShapeError(f"channel must be {n}x{n} for {n} target symbols, got {h.shape}")
    if not np.allclose(np.abs(symbols), 1.0, atol=_UNIT_MODULUS_TOL):
        raise DomainError("target symbols must be unit modulus")
    if power_budget <= 0:
        raise DomainError(f"power budget must be positive, got {power_budget}")

    phi = ci_angle(q)
    lambda_a = np.sin(phi) - 1j * np.cos(phi)
    lambda_b = np.sin(phi) + 1j * np.cos(phi)
    rotated = np.conj(symbols)[:, None] * h
    a = lambda_a * rotated
    b = lambda_b * rotated
    t_matrix = np.block([[a.real, -a.imag], [b.real, -b.imag]])
    return PrecodeProblem(t_matrix=t_matrix, power_budget=float(power_budget), symbols=symbols, phi_angle=phi)


def project_to_simplex(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {d >= 0, sum(d) = radius} by sort-and-threshold."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, v.size + 1) > (cssv - radius))[0][-1]
    theta = (cssv[rho] - radius) / (rho + 1)
    return np.clip(v - theta, 0.0, None)


def solve_dual_qp(t_matrix: np.ndarray, tol: float = 1e-8, max_iter: Optional[int] = None) -> DualQpResult:
    """Minimize ||T^T d||^2 over the probability simplex.

    Accelerated projected gradient with adaptive restart; stops once the
    projected step ``||d - P(d - grad/L)||`` falls below tol.
    """
    t_matrix = np.asarray(t_matrix, dtype=float)
    if not np.all(np.isfinite(t_matrix)):
        raise DomainError("constraint matrix must be finite")
    size = t_matrix.shape[0]
    max_iter = max_iter if max_iter is not None else 10 * size ** 2

    gram = t_matrix @ t_matrix.T
    lipschitz = 2.0 * np.linalg.norm(t_matrix, 2) ** 2
    if lipschitz == 0:
        delta = np.full(size, 1.0 / size)
        return DualQpResult(delta=delta, converged=True, iterations=0, objective=0.0)
    step = 1.0 / lipschitz

    def objective(d: np.ndarray) -> float:
        return float(d @ gram @ d)

    delta = np.full(size, 1.0 / size)
    momentum_point = delta.copy()
    momentum = 1.0
    current = objective(delta)
    converged = False

    iteration = 0
    for iteration in range(1, max_iter + 1):
        candidate = project_to_simplex(momentum_point - step * 2.0 * gram @ momentum_point)
        value = objective(candidate)

        if value > current:
            # restart from the last accepted iterate
            momentum = 1.0
            momentum_point = delta.copy()
            candidate = project_to_simplex(delta - step * 2.0 * gram @ delta)
            value = objective(candidate)

        next_momentum = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2))
        momentum_point = candidate + ((momentum - 1.0) / next_momentum) * (candidate - delta)
        delta, current, momentum = candidate, value, next_momentum

        mapped = project_to_simplex(delta - step * 2.0 * gram @ delta)
        if np.linalg.norm(delta - mapped) <= tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Dual QP hit max_iter={max_iter} before reaching tol={tol:g}")
    return DualQpResult(delta=delta, converged=converged, iterations=iteration, objective=current)


def recover_waveform(delta: np.ndarray, t_matrix: np.ndarray, power_budget: float) -> Tuple[np.ndarray, np.ndarray, float]:
    direction = np.asarray(t_matrix, dtype=float).T @ np.asarray(delta, dtype=float)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        raise InfeasibleProblemError("T^T delta vanishes; no waveform attains a positive margin")

    w = np.sqrt(power_budget) * direction / norm
    t = np.sqrt(power_budget) * norm
    n = w.shape[0] // 2
    x = w[:n] + 1j * w[n:]
    return w, x, t


def slp_precode(h: np.ndarray, symbols: np.ndarray, q: int, power_budget: float,
                tol: float = 1e-8, max_iter: Optional[int] = None) -> PrecodeSolution:
    problem = build_precode_problem(h, symbols, q, power_budget)
    dual = solve_dual_qp(problem.t_matrix, tol=tol, max_iter=max_iter)
    w, x, t = recover_waveform(dual.delta, problem.t_matrix, problem.power_budget)
    return PrecodeSolution(x=x, w=w, delta=dual.delta, margin=t,
                           converged=dual.converged, iterations=dual.iterations)


def least_distance_point(g: np.ndarray, h: np.ndarray) -> Optional[np.ndarray]:
    """Minimum-norm w with g w >= h via nonnegative least squares, or None if infeasible."""
    n = g.shape[1]
    e = np.vstack([g.T, h[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = nnls(e, f)
    r = e @ u - f
    if abs(r[-1]) < 1e-14 or np.linalg.norm(r) < 1e-14:
        return None
    return -r[:n] / r[-1]


def socp_reference(t_matrix: np.ndarray, power_budget: float, tol: float = 1e-10,
                   method: str = "bisection") -> Tuple[np.ndarray, float]:
    """Solve the primal margin problem directly, returning (w, t).

    ``bisection`` searches t in [0, sqrt(P_m) min_k ||T_k||] and accepts a level
    when its least-distance point fits the power budget. ``scaled`` solves the
    t = 1 level once and rescales, since the feasible waveforms scale with t.
    """
    t_matrix = np.asarray(t_matrix, dtype=float)
    size = t_matrix.shape[0]
    budget = np.sqrt(power_budget)

    if method == "scaled":
        w_unit = least_distance_point(t_matrix, np.ones(size))
        if w_unit is None or np.linalg.norm(w_unit) == 0:
            raise InfeasibleProblemError("no waveform attains a positive margin")
        t = budget / float(np.linalg.norm(w_unit))
        return t * w_unit, t
    if method != "bisection":
        raise DomainError(f"unknown SOCP method '{method}'")

    low, high = 0.0, budget * float(np.min(np.linalg.norm(t_matrix, axis=1)))
    best = np.zeros(size)
    while high - low > tol * max(1.0, high):
        mid = 0.5 * (low + high)
        w = least_distance_point(t_matrix, np.full(size, mid))
        if w is not None and np.linalg.norm(w) <= budget:
            low, best = mid, w
        else:
            high = mid

    if low == 0.0:
        raise InfeasibleProblemError("no waveform attains a positive margin")
    return best * (budget / np.linalg.norm(best)), low


def socp_precode(h: np.ndarray, symbols: np.ndarray, q: int, power_budget: float) -> PrecodeSolution:
    problem = build_precode_problem(h, symbols, q, power_budget)
    w, t = socp_reference(problem.t_matrix, problem.power_budget, method="scaled")
    n = problem.n_subcarriers
    return PrecodeSolution(x=w[:n] + 1j * w[n:], w=w, delta=np.zeros(2 * n), margin=t)


def mmse_precode(h: np.ndarray, symbols: np.ndarray, power_budget: float, noise_var: float) -> np.ndarray:
    """Regularized channel inversion scaled to the power budget."""
    h = np.asarray(h, dtype=complex)
    symbols = np.asarray(symbols, dtype=complex).reshape(-1)
    n = h.shape[0]
    if h.shape != (n, n) or symbols.shape != (n,):
        raise InputShapeError(f"expected a square channel matching {symbols.shape}, got {h.shape}")

    raw = h.conj().T @ solve(h @ h.conj().T + noise_var * np.eye(n), symbols)
    norm = np.linalg.norm(raw)
    if norm == 0:
        raise InfeasibleProblemError("MMSE precoder produced a zero waveform")
    return np.sqrt(power_budget) * raw / norm
