import logging

import numpy as np
from scipy.linalg import solve

from estimation.dictionary import Dictionary
from utils.errors import DomainError, InputShapeError

logger = logging.getLogger(__name__)


def omp_estimate(y: np.ndarray, dictionary: Dictionary, sparsity: int) -> np.ndarray:
    """Greedy atom selection on normalized columns with a least-squares refit each round."""
    y = np.asarray(y, dtype=complex)
    phi = dictionary.phi
    n_atoms = dictionary.n_atoms
    if y.shape != (dictionary.n_observations,):
        raise InputShapeError(f"observation must have length {dictionary.n_observations}, got {y.shape}")
    if not 1 <= sparsity <= n_atoms:
        raise DomainError(f"sparsity must lie in [1, {n_atoms}], got {sparsity}")

    norms = np.linalg.norm(phi, axis=0)
    normalized = phi / np.where(norms > 0, norms, 1.0)

    support = []
    coeffs = np.zeros(0, dtype=complex)
    residual = y.copy()
    for _ in range(sparsity):
        correlation = np.abs(normalized.conj().T @ residual)
        correlation[support] = -np.inf
        candidate = support + [int(np.argmax(correlation))]

        sub = phi[:, candidate]
        if np.linalg.matrix_rank(sub) < len(candidate):
            logger.info(f"OMP stopped at {len(support)} atoms: selected columns became rank deficient")
            break
        support = candidate
        coeffs, *_ = np.linalg.lstsq(sub, y, rcond=None)
        residual = y - sub @ coeffs

    h_hat = np.zeros(n_atoms, dtype=complex)
    h_hat[support] = coeffs
    return h_hat


def mmse_estimate(y: np.ndarray, dictionary: Dictionary, r_h: np.ndarray, r_w: np.ndarray) -> np.ndarray:
    phi = dictionary.phi
    weighted = solve(r_w, phi)
    information = phi.conj().T @ weighted + solve(r_h, np.eye(r_h.shape[0], dtype=complex))
    return solve(information, weighted.conj().T @ np.asarray(y, dtype=complex))


def bcrlb(dictionary: Dictionary, r_h: np.ndarray, r_w: np.ndarray) -> float:
    """Tr(Phi J^-1 Phi^H) with J the Bayesian Fisher information of the coefficients."""
    phi = dictionary.phi
    information = phi.conj().T @ solve(r_w, phi) + solve(r_h, np.eye(r_h.shape[0], dtype=complex))
    bound = np.trace(phi @ solve(information, phi.conj().T)).real
    return float(max(bound, 0.0))


def mmse_equalize(y: np.ndarray, h: np.ndarray, noise_var: float) -> np.ndarray:
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise InputShapeError(f"equalizer needs a square channel, got {h.shape}")
    gram = h.conj().T @ h + noise_var * np.eye(h.shape[0])
    return solve(gram, h.conj().T @ np.asarray(y, dtype=complex))
