import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from afdm.core import AfdmConfig, AfSymbolVector
from channel.doubly_selective import ChannelRealization, PathTap, path_matrix
from utils.errors import DomainError, InputShapeError

logger = logging.getLogger(__name__)

# Atoms beyond this multiple of N make the E-step needlessly expensive.
OVERCOMPLETENESS_CAP = 4
PRIOR_FLOOR = 1e-12


@dataclass
class Dictionary:
    phi: np.ndarray
    atoms: List[Tuple[int, float]]
    atom_matrices: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.phi.shape[1]

    @property
    def n_observations(self) -> int:
        return self.phi.shape[0]

    def nearest_atom(self, delay: int, doppler: float) -> int:
        candidates = [i for i, (l, _) in enumerate(self.atoms) if l == delay]
        if not candidates:
            raise DomainError(f"delay {delay} is outside the dictionary grid")
        return min(candidates, key=lambda i: abs(self.atoms[i][1] - doppler))


def doppler_grid(max_doppler: float, oversampling: int) -> np.ndarray:
    span = math.ceil(max_doppler)
    steps = np.arange(-oversampling * span, oversampling * span + 1)
    return steps / oversampling


def build_dictionary(pilot: AfSymbolVector, cfg: AfdmConfig, max_delay: int, max_doppler: float,
                     oversampling: int = 1) -> Dictionary:
    """Concatenate H_i x_p over every (delay, Doppler) grid point.

    Delays run over 0..max_delay and Dopplers over a grid of step 1/oversampling
    covering [-ceil(max_doppler), ceil(max_doppler)], delay-major.
    """
    pilot = np.asarray(pilot, dtype=complex)
    if pilot.shape != (cfg.n_subcarriers,):
        raise InputShapeError(f"pilot must have length {cfg.n_subcarriers}, got {pilot.shape}")
    if not np.any(pilot):
        raise DomainError("pilot must be nonzero")
    if oversampling < 1:
        raise DomainError(f"Doppler oversampling must be a positive integer, got {oversampling}")

    atoms = [(delay, float(doppler))
             for delay in range(max_delay + 1)
             for doppler in doppler_grid(max_doppler, oversampling)]

    if len(atoms) > OVERCOMPLETENESS_CAP * cfg.n_subcarriers:
        logger.warning(
            f"Dictionary has {len(atoms)} atoms for N={cfg.n_subcarriers}; "
            f"E-step cost grows cubically in the atom count"
        )

    atom_matrices = np.stack([path_matrix(PathTap(1.0, delay, doppler), cfg) for delay, doppler in atoms])
    phi = np.einsum("mpq,q->pm", atom_matrices, pilot)
    return Dictionary(phi=phi, atoms=atoms, atom_matrices=atom_matrices)


def reconstruct_channel(h_hat: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    h_hat = np.asarray(h_hat, dtype=complex)
    if h_hat.shape != (dictionary.n_atoms,):
        raise InputShapeError(f"coefficient vector must have length {dictionary.n_atoms}, got {h_hat.shape}")
    return np.tensordot(h_hat, dictionary.atom_matrices, axes=1)


def true_coefficients(ch: ChannelRealization, dictionary: Dictionary) -> np.ndarray:
    """Project the channel taps onto their nearest grid atoms (gains superpose)."""
    coeffs = np.zeros(dictionary.n_atoms, dtype=complex)
    for tap in ch.taps:
        coeffs[dictionary.nearest_atom(tap.delay, tap.doppler)] += tap.gain
    return coeffs


def genie_prior_covariance(ch: ChannelRealization, dictionary: Dictionary,
                           floor: Optional[float] = None) -> np.ndarray:
    floor = PRIOR_FLOOR if floor is None else floor
    variances = np.full(dictionary.n_atoms, floor)
    for tap in ch.taps:
        variances[dictionary.nearest_atom(tap.delay, tap.doppler)] = 1.0 / ch.n_paths
    return np.diag(variances).astype(complex)
