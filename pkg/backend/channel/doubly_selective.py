import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.linalg import dft

from afdm.core import AfdmConfig, TimeSignal, add_cpp, chirp_diagonal, daft, idaft, remove_cpp
from utils.errors import DomainError, InputShapeError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3e8
_INTEGER_DOPPLER_TOL = 1e-12


def nearest_integer(v: float) -> int:
    """Round to the nearest integer, ties toward zero."""
    return int(math.copysign(math.ceil(abs(v) - 0.5), v))


def max_normalized_doppler(speed_kmh: float, carrier_hz: float, subcarrier_spacing_hz: float) -> float:
    speed = speed_kmh / 3.6
    return speed * carrier_hz / (SPEED_OF_LIGHT * subcarrier_spacing_hz)


@dataclass(frozen=True)
class PathTap:
    gain: complex
    delay: int
    doppler: float

    @property
    def integer_doppler(self) -> int:
        return nearest_integer(self.doppler)

    @property
    def fractional_doppler(self) -> float:
        return self.doppler - self.integer_doppler

    @property
    def is_integer_doppler(self) -> bool:
        return abs(self.fractional_doppler) <= _INTEGER_DOPPLER_TOL

    def to_record(self) -> Dict[str, Any]:
        return {
            "gain_re": float(np.real(self.gain)),
            "gain_im": float(np.imag(self.gain)),
            "delay": int(self.delay),
            "doppler": float(self.doppler),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PathTap":
        return cls(
            gain=complex(record["gain_re"], record["gain_im"]),
            delay=int(record["delay"]),
            doppler=float(record["doppler"]),
        )


@dataclass
class ChannelRealization:
    taps: List[PathTap]
    cfg: AfdmConfig
    _effective: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.taps:
            raise DomainError("a channel needs at least one path")
        for tap in self.taps:
            if tap.delay < 0:
                raise DomainError(f"negative path delay {tap.delay}")
            if self.cfg.max_delay is not None and tap.delay > self.cfg.max_delay:
                raise DomainError(f"path delay {tap.delay} exceeds max_delay={self.cfg.max_delay}")

    @property
    def n_paths(self) -> int:
        return len(self.taps)

    @property
    def max_delay(self) -> int:
        return max(tap.delay for tap in self.taps)

    def to_record(self) -> Dict[str, Any]:
        return {"taps": [tap.to_record() for tap in self.taps]}

    @classmethod
    def from_record(cls, record: Dict[str, Any], cfg: AfdmConfig) -> "ChannelRealization":
        return cls(taps=[PathTap.from_record(tap) for tap in record["taps"]], cfg=cfg)


def path_location(tap: PathTap, cfg: AfdmConfig) -> int:
    """loc_i = alpha_i + 2*N*c1*l_i, the column offset of the path's main peak."""
    return tap.integer_doppler + cfg.chirp_steps * tap.delay


def _prefix_phase_matrix(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    n = cfg.n_subcarriers
    idx = np.arange(n, dtype=float)
    gamma = np.ones(n, dtype=complex)
    wrapped = idx < tap.delay
    gamma[wrapped] = np.exp(-2j * np.pi * cfg.c1 * (n ** 2 - 2 * n * (tap.delay - idx[wrapped])))
    return gamma


def path_matrix_exact(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    """Unit-gain path matrix as the product Lc2 F Lc1 Gamma Delta Pi^l Lc1^H F^H Lc2^H."""
    n = cfg.n_subcarriers
    fourier = dft(n, scale="sqrtn")
    lam1 = np.diag(chirp_diagonal(cfg.c1, n))
    lam2 = np.diag(chirp_diagonal(cfg.c2, n))
    gamma = np.diag(_prefix_phase_matrix(tap, cfg))
    doppler = np.diag(np.exp(-2j * np.pi * tap.doppler * np.arange(n) / n))
    shift = np.roll(np.eye(n), tap.delay, axis=0)

    modulator = lam2 @ fourier @ lam1
    return modulator @ gamma @ doppler @ shift @ modulator.conj().T


def _phase_prefactor(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    n = cfg.n_subcarriers
    p = np.arange(n, dtype=float)[:, None]
    q = np.arange(n, dtype=float)[None, :]
    l = tap.delay
    return np.exp(1j * 2 * np.pi / n * (n * cfg.c1 * l ** 2 - q * l + n * cfg.c2 * (q ** 2 - p ** 2)))


def path_matrix_integer(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    if not tap.is_integer_doppler:
        raise DomainError(f"integer-Doppler form needs integer Doppler, got {tap.doppler}")

    n = cfg.n_subcarriers
    rows = np.arange(n)
    cols = (rows + path_location(tap, cfg)) % n
    matrix = np.zeros((n, n), dtype=complex)
    matrix[rows, cols] = _phase_prefactor(tap, cfg)[rows, cols]
    return matrix


def _dirichlet_sum(theta: np.ndarray, n: int) -> np.ndarray:
    """sum_{k=0}^{n-1} exp(-j 2 pi theta k / n), evaluated in closed form."""
    residue = np.mod(theta, n)
    peak = np.isclose(residue, 0.0, atol=1e-12) | np.isclose(residue, n, atol=1e-12)
    safe_theta = np.where(peak, 1.0, theta)
    numerator = 1 - np.exp(-2j * np.pi * safe_theta)
    denominator = 1 - np.exp(-2j * np.pi * safe_theta / n)
    return np.where(peak, complex(n), numerator / denominator)


def path_matrix_fractional(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    n = cfg.n_subcarriers
    p = np.arange(n, dtype=float)[:, None]
    q = np.arange(n, dtype=float)[None, :]
    theta = p - q + tap.doppler + cfg.chirp_steps * tap.delay
    return _phase_prefactor(tap, cfg) * _dirichlet_sum(theta, n) / n


def path_matrix(tap: PathTap, cfg: AfdmConfig) -> np.ndarray:
    if tap.is_integer_doppler:
        return path_matrix_integer(PathTap(tap.gain, tap.delay, float(tap.integer_doppler)), cfg)
    return path_matrix_fractional(tap, cfg)


def effective_channel(ch: ChannelRealization) -> np.ndarray:
    if ch._effective is None:
        n = ch.cfg.n_subcarriers
        h_eff = np.zeros((n, n), dtype=complex)
        for tap in ch.taps:
            h_eff += tap.gain * path_matrix(tap, ch.cfg)
        ch._effective = h_eff
    return ch._effective.copy()


def truncation_mask(tap: PathTap, cfg: AfdmConfig, k_v: int) -> np.ndarray:
    n = cfg.n_subcarriers
    rows = np.arange(n)[:, None]
    offsets = np.arange(-k_v, k_v + 1)[None, :]
    cols = (rows + path_location(tap, cfg) + offsets) % n
    mask = np.zeros((n, n), dtype=bool)
    mask[np.repeat(rows, offsets.shape[1], axis=1), cols] = True
    return mask


def truncated_channel(ch: ChannelRealization, k_v: int) -> np.ndarray:
    """Effective channel keeping only the 2*k_v+1 columns around every path's main peak."""
    if k_v < 0:
        raise DomainError(f"truncation parameter must be non-negative, got {k_v}")
    n = ch.cfg.n_subcarriers
    k_v = min(k_v, n // 2)
    h_trunc = np.zeros((n, n), dtype=complex)
    for tap in ch.taps:
        h_trunc += tap.gain * np.where(
            truncation_mask(tap, ch.cfg, k_v), path_matrix_fractional(tap, ch.cfg), 0.0
        )
    return h_trunc


def apply_channel_time(s: TimeSignal, ch: ChannelRealization, noise_var: float,
                       rng: Optional[np.random.Generator] = None) -> TimeSignal:
    """Propagate a prefixed time signal; n = 0 is the first sample after the prefix."""
    cfg = ch.cfg
    s = np.asarray(s, dtype=complex)
    if s.ndim != 1 or s.shape[0] != cfg.n_subcarriers + cfg.cpp_len:
        raise InputShapeError(
            f"expected a prefixed signal of length {cfg.n_subcarriers + cfg.cpp_len}, got {s.shape}"
        )
    if cfg.cpp_len < ch.max_delay:
        raise DomainError(f"CPP length {cfg.cpp_len} shorter than delay spread {ch.max_delay}")

    total = s.shape[0]
    time_idx = np.arange(total, dtype=float) - cfg.cpp_len
    r = np.zeros(total, dtype=complex)
    for tap in ch.taps:
        delayed = np.zeros(total, dtype=complex)
        delayed[tap.delay:] = s[:total - tap.delay]
        r += tap.gain * delayed * np.exp(-2j * np.pi * tap.doppler * time_idx / cfg.n_subcarriers)

    if noise_var > 0:
        rng = rng if rng is not None else np.random.default_rng()
        r += complex_awgn(rng, total, noise_var)
    return r


def complex_awgn(rng: np.random.Generator, size: int, noise_var: float) -> np.ndarray:
    scale = np.sqrt(noise_var / 2)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def distinct_tap_capacity(max_delay: int, max_doppler: float) -> int:
    """Number of (delay, integer Doppler) pairs a draw within the limits can land on."""
    # Rounding ties go toward zero, so +-k is reachable only when max_doppler > k - 1/2.
    integer_dopplers = 2 * (math.ceil(max_doppler + 0.5) - 1) + 1
    return (max_delay + 1) * integer_dopplers


def sample_channel(rng: np.random.Generator, cfg: AfdmConfig, n_paths: int, max_delay: int,
                   max_doppler: float, fractional: bool = True,
                   distinct_taps: bool = False) -> ChannelRealization:
    if n_paths < 1:
        raise DomainError(f"number of paths must be positive, got {n_paths}")
    if distinct_taps:
        n_keys = distinct_tap_capacity(max_delay, max_doppler)
        if n_paths > n_keys:
            raise DomainError(
                f"{n_paths} distinct taps requested but only {n_keys} (delay, integer Doppler) "
                f"pairs exist for max_delay={max_delay}, max_doppler={max_doppler}"
            )

    taps: List[PathTap] = []
    seen = set()
    while len(taps) < n_paths:
        gain = complex(*(rng.standard_normal(2) * np.sqrt(1.0 / (2 * n_paths))))
        delay = int(rng.integers(0, max_delay + 1))
        doppler = float(rng.uniform(-max_doppler, max_doppler))
        if not fractional:
            doppler = float(nearest_integer(doppler))
        if distinct_taps:
            key = (delay, nearest_integer(doppler))
            if key in seen:
                continue
            seen.add(key)
        taps.append(PathTap(gain=gain, delay=delay, doppler=doppler))

    return ChannelRealization(taps=taps, cfg=cfg)


@dataclass
class Propagation:
    y: np.ndarray
    signal_power: float
    noise_power: float


def propagate_symbol(x: np.ndarray, ch: ChannelRealization, noise_var: float,
                     rng: Optional[np.random.Generator] = None) -> Propagation:
    """AF-domain symbol through IDAFT, CPP, the time-domain channel and back through DAFT."""
    cfg = ch.cfg
    s = add_cpp(idaft(x, cfg), cfg)
    clean = apply_channel_time(s, ch, 0.0)
    noise = np.zeros_like(clean)
    if noise_var > 0:
        rng = rng if rng is not None else np.random.default_rng()
        noise = complex_awgn(rng, clean.shape[0], noise_var)
    y = daft(remove_cpp(clean + noise, cfg), cfg)
    body = slice(cfg.cpp_len, None)
    return Propagation(
        y=y,
        signal_power=float(np.mean(np.abs(clean[body]) ** 2)),
        noise_power=float(np.mean(np.abs(noise[body]) ** 2)),
    )
