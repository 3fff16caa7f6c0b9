"""AFDM symbol-domain transforms, chirp-periodic prefix and Q-PSK mapping.

AF-domain symbol vectors and time signals are plain complex numpy arrays;
an ``AfdmConfig`` carries the geometry they are interpreted against.
"""
import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.errors import InputShapeError, ParameterError

logger = logging.getLogger(__name__)

# Tolerance for "2*N*c1 is an integer" on float chirp rates such as 3/128.
_INTEGRAL_TOL = 1e-9

AfSymbolVector = np.ndarray
TimeSignal = np.ndarray


class AfdmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_subcarriers: int = Field(gt=0)
    c1: float
    c2: float = 0.0
    cpp_len: int = Field(ge=0)
    psk_order: int = 4
    max_delay: Optional[int] = Field(default=None, ge=0)
    max_doppler: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def _check_chirp_geometry(self) -> "AfdmConfig":
        n = self.n_subcarriers
        if n % 2 != 0:
            raise ValueError(f"n_subcarriers must be even, got {n}")

        chirp_steps = 2 * n * self.c1
        if abs(chirp_steps - round(chirp_steps)) > _INTEGRAL_TOL:
            raise ValueError(f"2*N*c1 must be an integer, got {chirp_steps:.6g}")

        check_psk_order(self.psk_order)

        if self.max_doppler is not None:
            bound = (2 * self.max_doppler + 1) / (2 * n)
            if self.c1 < bound - _INTEGRAL_TOL:
                raise ValueError(
                    f"c1={self.c1:.6g} does not separate paths for max_doppler="
                    f"{self.max_doppler:.6g}; need c1 >= {bound:.6g}"
                )

        if self.max_delay is not None and self.cpp_len < self.max_delay:
            raise ValueError(f"cpp_len={self.cpp_len} shorter than max_delay={self.max_delay}")

        return self

    @classmethod
    def from_channel_limits(cls, n_subcarriers: int, max_delay: int, max_doppler: float,
                            c2: float = 0.0, psk_order: int = 4) -> "AfdmConfig":
        c1 = (2 * math.ceil(max_doppler) + 1) / (2 * n_subcarriers)
        return cls(
            n_subcarriers=n_subcarriers,
            c1=c1,
            c2=c2,
            cpp_len=max_delay,
            psk_order=psk_order,
            max_delay=max_delay,
            max_doppler=max_doppler,
        )

    @property
    def chirp_steps(self) -> int:
        """2*N*c1, the per-delay column offset of a path in the AF domain."""
        return int(round(2 * self.n_subcarriers * self.c1))


def check_psk_order(q: int) -> int:
    if q < 2 or q & (q - 1) != 0:
        raise ParameterError(f"PSK order must be a power of two >= 2, got {q}")
    return q


def bits_per_symbol(q: int) -> int:
    return check_psk_order(q).bit_length() - 1


def psk_constellation(q: int) -> np.ndarray:
    check_psk_order(q)
    k = np.arange(q)
    return np.exp(1j * np.pi * (2 * k + 1) / q)


def gray_encode(indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return indices ^ (indices >> 1)


def gray_decode(codes: np.ndarray) -> np.ndarray:
    decoded = np.asarray(codes, dtype=np.int64).copy()
    shift = decoded >> 1
    while np.any(shift):
        decoded ^= shift
        shift >>= 1
    return decoded


def indices_to_bits(indices: np.ndarray, q: int) -> np.ndarray:
    width = bits_per_symbol(q)
    codes = gray_encode(indices)
    weights = 1 << np.arange(width - 1, -1, -1)
    return ((codes[:, None] & weights) > 0).astype(np.int8).reshape(-1)


def bits_to_indices(bits: np.ndarray, q: int) -> np.ndarray:
    width = bits_per_symbol(q)
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % width != 0:
        raise InputShapeError(
            f"bit count {bits.size} is not divisible by log2(Q)={width}"
        )
    weights = 1 << np.arange(width - 1, -1, -1)
    codes = bits.reshape(-1, width) @ weights
    return gray_decode(codes)


def psk_modulate(bits: np.ndarray, q: int) -> AfSymbolVector:
    return psk_constellation(q)[bits_to_indices(bits, q)]


def psk_symbols(indices: np.ndarray, q: int) -> AfSymbolVector:
    return psk_constellation(q)[np.asarray(indices, dtype=np.int64)]


def psk_demodulate(y: AfSymbolVector, q: int) -> np.ndarray:
    """Nearest-point hard decision; equidistant points resolve to the smaller index."""
    points = psk_constellation(q)
    y = np.asarray(y, dtype=complex).reshape(-1)
    distances = np.abs(y[:, None] - points[None, :])
    closest = distances.min(axis=1, keepdims=True)
    ties = distances <= closest + 1e-12 * (1.0 + closest)
    return np.argmax(ties, axis=1)


def chirp_diagonal(c: float, n: int) -> np.ndarray:
    """Diagonal of Lambda_c = diag(exp(-j 2 pi c k^2))."""
    k = np.arange(n, dtype=float)
    return np.exp(-2j * np.pi * c * k ** 2)


def _check_length(values: np.ndarray, expected: int, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=complex)
    if values.ndim != 1 or values.shape[0] != expected:
        raise InputShapeError(f"{what} must have length {expected}, got shape {values.shape}")
    return values


def idaft(x: AfSymbolVector, cfg: AfdmConfig) -> TimeSignal:
    n = cfg.n_subcarriers
    x = _check_length(x, n, "AF-domain vector")
    spread = np.conj(chirp_diagonal(cfg.c2, n)) * x
    return np.conj(chirp_diagonal(cfg.c1, n)) * np.fft.ifft(spread, norm="ortho")


def daft(r: TimeSignal, cfg: AfdmConfig) -> AfSymbolVector:
    n = cfg.n_subcarriers
    r = _check_length(r, n, "time signal")
    despread = chirp_diagonal(cfg.c1, n) * r
    return chirp_diagonal(cfg.c2, n) * np.fft.fft(despread, norm="ortho")


def idaft_reference(x: AfSymbolVector, cfg: AfdmConfig) -> TimeSignal:
    """Direct O(N^2) evaluation of the IDAFT sum."""
    n = cfg.n_subcarriers
    x = _check_length(x, n, "AF-domain vector")
    idx = np.arange(n, dtype=float)
    phase = cfg.c1 * idx[:, None] ** 2 + np.outer(idx, idx) / n + cfg.c2 * idx[None, :] ** 2
    return np.exp(2j * np.pi * phase) @ x / np.sqrt(n)


def daft_reference(r: TimeSignal, cfg: AfdmConfig) -> AfSymbolVector:
    n = cfg.n_subcarriers
    r = _check_length(r, n, "time signal")
    idx = np.arange(n, dtype=float)
    phase = cfg.c2 * idx[:, None] ** 2 + np.outer(idx, idx) / n + cfg.c1 * idx[None, :] ** 2
    return np.exp(-2j * np.pi * phase) @ r / np.sqrt(n)


def cpp_phase(cfg: AfdmConfig) -> np.ndarray:
    """Phase applied to the prefix samples n = -L_c..-1; all ones when 2*N*c1 is an integer."""
    n = cfg.n_subcarriers
    prefix_idx = np.arange(-cfg.cpp_len, 0, dtype=float)
    return np.exp(-2j * np.pi * cfg.c1 * (n ** 2 + 2 * n * prefix_idx))


def add_cpp(s: TimeSignal, cfg: AfdmConfig) -> TimeSignal:
    n = cfg.n_subcarriers
    s = _check_length(s, n, "time signal")
    if cfg.cpp_len == 0:
        return s.copy()
    prefix = s[n - cfg.cpp_len:] * cpp_phase(cfg)
    return np.concatenate([prefix, s])


def remove_cpp(s: TimeSignal, cfg: AfdmConfig) -> TimeSignal:
    s = _check_length(s, cfg.n_subcarriers + cfg.cpp_len, "prefixed time signal")
    return s[cfg.cpp_len:].copy()
