import math

import numpy as np

from afdm.core import AfSymbolVector
from utils.errors import ParameterError


def zc_pilot(n: int, root: int = 1) -> AfSymbolVector:
    """Zadoff-Chu sequence of length n; unit modulus, so already unit average power."""
    if n < 1 or not 1 <= root < max(n, 2):
        raise ParameterError(f"ZC root must satisfy 1 <= root < n, got root={root}, n={n}")
    if math.gcd(root, n) != 1:
        raise ParameterError(f"ZC root {root} is not coprime with length {n}")

    k = np.arange(n, dtype=float)
    if n % 2 == 0:
        return np.exp(-1j * np.pi * root * k ** 2 / n)
    return np.exp(-1j * np.pi * root * k * (k + 1) / n)
