"""Sparse Bayesian learning channel estimator with hierarchical Laplace priors.

The estimator runs EM over the concatenated dictionary: the E-step forms the
Gaussian posterior of the path coefficients, the M-step refreshes the per-atom
variances alpha, the noise variance beta and the Laplace hyperparameters
lambda and nu.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq
from scipy.special import digamma

from estimation.dictionary import Dictionary
from utils.errors import DomainError, EstimatorDivergedError, InputShapeError, ParameterError

logger = logging.getLogger(__name__)

NU_BRACKET = (1e-6, 1e3)
NU_XTOL = 1e-8
_BETA_FLOOR = 1e-12


class SblHyperConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    a: float = Field(default=1e-4, gt=0)
    b: float = Field(default=1e-4, gt=0)
    nu0: float = Field(default=1.0, gt=0)
    lambda0: float = Field(default=1.0, gt=0)
    alpha0: float = Field(default=1.0, gt=0)
    epsilon: float = Field(default=1e-6, gt=0)
    n_max: int = Field(default=200, ge=1)
    eta: Optional[float] = None
    laplace_prior: bool = True
    prune_threshold: float = Field(default=1e-12, gt=0)

    @model_validator(mode="after")
    def _check_eta(self) -> "SblHyperConfig":
        if self.eta is not None and self.eta <= 1:
            raise ValueError(f"combination factor eta must exceed 1, got {self.eta}")
        return self


@dataclass
class SblState:
    mu: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    beta: float
    lam: float
    nu: float

    @classmethod
    def initial(cls, y: np.ndarray, n_atoms: int, hyper: SblHyperConfig,
                beta0: Optional[float] = None) -> "SblState":
        """Start state; beta0 is the pilot noise variance when the receiver knows the SNR."""
        if beta0 is None:
            beta0 = float(np.var(y)) / 10.0
        elif not beta0 > 0:
            raise ParameterError(f"initial noise variance must be positive, got {beta0}")
        beta0 = max(beta0, _BETA_FLOOR)
        return cls(
            mu=np.zeros(n_atoms, dtype=complex),
            sigma=np.diag(np.full(n_atoms, hyper.alpha0)).astype(complex),
            alpha=np.full(n_atoms, hyper.alpha0),
            beta=beta0,
            lam=hyper.lambda0,
            nu=hyper.nu0,
        )

    def snapshot(self) -> dict:
        return {
            "alpha": self.alpha.copy(),
            "mu": self.mu.copy(),
            "beta": self.beta,
            "lambda": self.lam,
            "nu": self.nu,
        }


class MStepResult(NamedTuple):
    alpha: np.ndarray
    beta: float
    lam: float
    nu: float
    nu_root_found: bool


@dataclass
class SblIterationRecord:
    iteration: int
    mu_norm: float
    delta_alpha: float
    beta: float
    lam: float
    nu: float
    sigma_min_eig: float


@dataclass
class SblTrace:
    records: List[SblIterationRecord] = field(default_factory=list)
    converged: bool = False
    nu_failures: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def mu_norms(self) -> np.ndarray:
        return np.array([record.mu_norm for record in self.records])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "iteration": r.iteration,
                    "mu_norm": r.mu_norm,
                    "delta_alpha": r.delta_alpha,
                    "beta": r.beta,
                    "lambda": r.lam,
                    "nu": r.nu,
                }
                for r in self.records
            ],
            columns=["iteration", "mu_norm", "delta_alpha", "beta", "lambda", "nu"],
        )


def _check_observation(y: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    if y.shape != (dictionary.n_observations,):
        raise InputShapeError(
            f"observation must have length {dictionary.n_observations}, got {y.shape}"
        )
    if not np.all(np.isfinite(y)):
        raise DomainError("observation contains non-finite samples")
    return y


def sbl_e_step(y: np.ndarray, dictionary: Dictionary, state: SblState,
               prune_threshold: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance; atoms with alpha below the threshold are pinned to zero."""
    y = _check_observation(y, dictionary)
    n_atoms = dictionary.n_atoms
    mu = np.zeros(n_atoms, dtype=complex)
    sigma = np.zeros((n_atoms, n_atoms), dtype=complex)

    active = np.flatnonzero(state.alpha > prune_threshold)
    if active.size == 0:
        return mu, sigma

    phi = dictionary.phi[:, active]
    precision = phi.conj().T @ phi / state.beta + np.diag(1.0 / state.alpha[active])
    precision = 0.5 * (precision + precision.conj().T)
    factor = cho_factor(precision, lower=True)
    sigma_active = cho_solve(factor, np.eye(active.size, dtype=complex))
    sigma_active = 0.5 * (sigma_active + sigma_active.conj().T)

    mu[active] = sigma_active @ (phi.conj().T @ y) / state.beta
    sigma[np.ix_(active, active)] = sigma_active
    return mu, sigma


def _nu_equation(nu: float, lam: float) -> float:
    return np.log(nu / 2.0) + 1.0 - digamma(nu) + np.log(lam) - lam


def solve_nu(lam: float, nu_prev: float) -> Tuple[float, bool]:
    low, high = NU_BRACKET
    f_low, f_high = _nu_equation(low, lam), _nu_equation(high, lam)
    if not np.isfinite(f_low) or not np.isfinite(f_high) or f_low * f_high > 0:
        return nu_prev, False
    return float(brentq(_nu_equation, low, high, args=(lam,), xtol=NU_XTOL)), True


def alpha_update(s: np.ndarray, lam: float) -> np.ndarray:
    """Positive root of (lam/2)*alpha^2 + alpha - s = 0 for CN coefficients.

    Written as 2s / (1 + sqrt(1 + 2*lam*s)) so it stays exact as lam*s -> 0,
    where it tends to the flat-prior update alpha = s.
    """
    s = np.maximum(np.asarray(s, dtype=float), 0.0)
    return 2.0 * s / (1.0 + np.sqrt(1.0 + 2.0 * lam * s))


def noise_variance_update(expected_error: float, n_obs: int, a: float, b: float) -> float:
    # MAP under CN(0, beta*I) noise and an inverse-Gamma(a, b) prior on beta.
    return max((b + expected_error) / (n_obs + a + 1.0), _BETA_FLOOR)


def lambda_update(alpha_sum: float, n_atoms: float, nu: float) -> float:
    return (max(n_atoms, 1.0) + nu / 2.0 - 1.0) / (alpha_sum / 2.0 + nu / 2.0)


def resolved_atoms(state: SblState, threshold: float = 1e-12) -> float:
    """Effective number of atoms the observation determines, sum of 1 - Sigma_ii/alpha_i."""
    active = np.flatnonzero(state.alpha > threshold)
    if active.size == 0:
        return 0.0
    ratio = np.real(np.diag(state.sigma))[active] / state.alpha[active]
    return float(np.clip(1.0 - ratio, 0.0, 1.0).sum())


def sbl_m_step(y: np.ndarray, dictionary: Dictionary, state: SblState,
               hyper: Optional[SblHyperConfig] = None) -> MStepResult:
    """Refresh alpha, beta, lambda and nu from the E-step posterior held in `state`.

    Lambda's shape counts the resolved atoms, not every dictionary column.
    """
    hyper = hyper or SblHyperConfig()
    y = _check_observation(y, dictionary)
    n_obs = dictionary.n_observations

    s = np.real(np.diag(state.sigma)) + np.abs(state.mu) ** 2
    alpha = alpha_update(s, state.lam) if hyper.laplace_prior else np.maximum(s, 0.0)

    residual = y - dictionary.phi @ state.mu
    spread = np.real(np.trace(dictionary.phi @ state.sigma @ dictionary.phi.conj().T))
    expected_error = float(np.vdot(residual, residual).real + max(spread, 0.0))
    beta = noise_variance_update(expected_error, n_obs, hyper.a, hyper.b)

    if not hyper.laplace_prior:
        return MStepResult(alpha, beta, state.lam, state.nu, True)

    lam = lambda_update(float(alpha.sum()), resolved_atoms(state, hyper.prune_threshold), state.nu)
    nu, found = solve_nu(lam, state.nu)
    if not found:
        logger.warning(f"No root for the nu update at lambda={lam:.4g}; keeping nu={state.nu:.4g}")
    return MStepResult(alpha, beta, lam, nu, found)


def _check_finite(state: SblState, iteration: int) -> None:
    values = [state.mu, state.alpha, np.array([state.beta, state.lam, state.nu])]
    if not all(np.all(np.isfinite(v)) for v in values):
        raise EstimatorDivergedError("SBL state became non-finite", iteration, state.snapshot())
    if np.any(state.alpha < 0) or state.beta <= 0 or state.lam <= 0 or state.nu <= 0:
        raise EstimatorDivergedError("SBL hyperparameters left their domain", iteration, state.snapshot())


def _active_min_eig(sigma: np.ndarray, alpha: np.ndarray, threshold: float) -> float:
    active = np.flatnonzero(alpha > threshold)
    if active.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(sigma[np.ix_(active, active)]).min())


def keep_largest(h_hat: np.ndarray, count: int) -> np.ndarray:
    """Zero all but the `count` largest-magnitude entries."""
    kept = np.zeros_like(h_hat)
    order = np.argsort(-np.abs(h_hat), kind="stable")[:count]
    kept[order] = h_hat[order]
    return kept


def sbl_estimate(y: np.ndarray, dictionary: Dictionary, hyper: Optional[SblHyperConfig] = None,
                 n_paths: Optional[int] = None, beta0: Optional[float] = None) -> Tuple[np.ndarray, SblTrace]:
    hyper = hyper or SblHyperConfig()
    y = _check_observation(y, dictionary)

    retained = None
    if hyper.eta is not None:
        if n_paths is None:
            raise ParameterError("partial combination needs the number of paths")
        retained = int(round(hyper.eta * n_paths))
        if retained > dictionary.n_atoms:
            raise ParameterError(
                f"eta*P={retained} exceeds the dictionary size {dictionary.n_atoms}"
            )

    state = SblState.initial(y, dictionary.n_atoms, hyper, beta0)
    trace = SblTrace()

    for iteration in range(1, hyper.n_max + 1):
        try:
            state.mu, state.sigma = sbl_e_step(y, dictionary, state, hyper.prune_threshold)
        except np.linalg.LinAlgError as e:
            raise EstimatorDivergedError(f"E-step failed: {str(e)}", iteration, state.snapshot()) from e

        step = sbl_m_step(y, dictionary, state, hyper)
        delta_alpha = float(np.sum((step.alpha - state.alpha) ** 2))
        if not step.nu_root_found:
            trace.nu_failures += 1

        state.alpha, state.beta, state.lam, state.nu = step.alpha, step.beta, step.lam, step.nu
        _check_finite(state, iteration)

        trace.records.append(SblIterationRecord(
            iteration=iteration,
            mu_norm=float(np.linalg.norm(state.mu)),
            delta_alpha=delta_alpha,
            beta=state.beta,
            lam=state.lam,
            nu=state.nu,
            sigma_min_eig=_active_min_eig(state.sigma, state.alpha, hyper.prune_threshold),
        ))

        if delta_alpha <= hyper.epsilon:
            trace.converged = True
            break

    if not trace.converged:
        logger.info(f"SBL stopped at n_max={hyper.n_max} without meeting epsilon={hyper.epsilon}")

    h_hat = state.mu.copy()
    if retained is not None:
        h_hat = keep_largest(h_hat, retained)
    return h_hat, trace
