"""Oracle-equivalence checks run by ``cli.py selftest``."""
import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from afdm.core import AfdmConfig, daft, idaft, idaft_reference, psk_symbols
from channel.doubly_selective import (
    effective_channel,
    path_matrix_exact,
    path_matrix_fractional,
    path_matrix_integer,
    PathTap,
    propagate_symbol,
    sample_channel,
)
from precoding.slp import slp_precode, socp_reference, solve_dual_qp
from simulation.pilots import zc_pilot

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _table1_config() -> AfdmConfig:
    return AfdmConfig.from_channel_limits(64, max_delay=2, max_doppler=0.154)


def check_transform_inverse(rng: np.random.Generator) -> Tuple[bool, str]:
    cfg = _table1_config()
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        worst = max(worst, float(np.max(np.abs(daft(idaft(x, cfg), cfg) - x))))
        worst = max(worst, float(np.max(np.abs(idaft(x, cfg) - idaft_reference(x, cfg)))))
    return worst < 1e-10, f"max deviation {worst:.2e}"


def check_channel_forms(rng: np.random.Generator) -> Tuple[bool, str]:
    cfg = _table1_config()
    worst = 0.0
    for _ in range(20):
        tap = PathTap(gain=1.0, delay=int(rng.integers(0, 3)), doppler=float(rng.uniform(-0.154, 0.154)))
        worst = max(worst, float(np.max(np.abs(path_matrix_exact(tap, cfg) - path_matrix_fractional(tap, cfg)))))
        integer_tap = PathTap(gain=1.0, delay=tap.delay, doppler=float(rng.integers(-1, 2)))
        worst = max(worst, float(np.max(np.abs(
            path_matrix_exact(integer_tap, cfg) - path_matrix_integer(integer_tap, cfg)))))
    return worst < 1e-9, f"max deviation {worst:.2e}"


def check_pipeline_oracle(rng: np.random.Generator) -> Tuple[bool, str]:
    cfg = _table1_config()
    worst = 0.0
    for _ in range(20):
        ch = sample_channel(rng, cfg, 3, 2, 0.154, fractional=True)
        x = psk_symbols(rng.integers(0, 4, 64), 4)
        worst = max(worst, float(np.max(np.abs(propagate_symbol(x, ch, 0.0).y - effective_channel(ch) @ x))))
    return worst < 1e-9, f"max deviation {worst:.2e}"


def check_zc_autocorrelation(rng: np.random.Generator) -> Tuple[bool, str]:
    pilot = zc_pilot(64, 1)
    worst = max(abs(np.vdot(pilot, np.roll(pilot, lag))) for lag in range(1, 64))
    return worst < 1e-10, f"max off-peak correlation {worst:.2e}"


def check_identity_precoding(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for q in (4, 8):
        symbols = psk_symbols(rng.integers(0, q, 16), q)
        solution = slp_precode(np.eye(16), symbols, q, power_budget=16.0)
        worst = max(worst, abs(solution.margin - np.sin(np.pi / q)))
    return worst < 1e-6, f"max margin deviation {worst:.2e}"


def check_dual_against_primal(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        t_matrix = rng.standard_normal((16, 16))
        dual = solve_dual_qp(t_matrix, tol=1e-10, max_iter=50000)
        t_dual = float(np.linalg.norm(t_matrix.T @ dual.delta))
        _, t_primal = socp_reference(t_matrix, 1.0)
        worst = max(worst, abs(t_dual - t_primal) / max(t_primal, 1e-12))
    return worst < 1e-4, f"max relative gap {worst:.2e}"


CHECKS: List[Tuple[str, Callable[[np.random.Generator], Tuple[bool, str]]]] = [
    ("transform-inverse", check_transform_inverse),
    ("channel-forms", check_channel_forms),
    ("pipeline-oracle", check_pipeline_oracle),
    ("zc-autocorrelation", check_zc_autocorrelation),
    ("identity-precoding", check_identity_precoding),
    ("dual-vs-primal", check_dual_against_primal),
]


def run_selftest(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check(rng)
        except Exception as e:
            logger.error(f"Self-test {name} raised: {str(e)}")
            passed, detail = False, f"raised {type(e).__name__}: {str(e)}"
        level = logging.INFO if passed else logging.ERROR
        logger.log(level, f"{name}: {'ok' if passed else 'FAILED'} ({detail})")
        results.append(CheckResult(name=name, passed=passed, detail=detail))
    return results
