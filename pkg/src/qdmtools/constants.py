"""Physical constants used throughout the package.

Units follow one convention everywhere: frequencies in GHz, magnetic fields
in tesla, lengths in meters. Hyperfine splittings and the thermal coefficient
are kept in their customary units (MHz, kHz/K) and converted where used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    f_zfs: float = 2.87  # GHz
    g: float = 2.003
    mu_b: float = 13.996  # GHz/T
    d_hf_14n: float = 2.16  # MHz
    d_hf_15n: float = 3.03  # MHz
    temp_coeff: float = -74.2  # kHz/K
    mu0: float = 4e-7 * math.pi  # T m/A

    @property
    def gamma(self) -> float:
        """Zeeman coefficient g * mu_B in GHz/T."""
        return self.g * self.mu_b


CONSTANTS = PhysicalConstants()

F_ZFS = CONSTANTS.f_zfs
GAMMA = CONSTANTS.gamma
MU0 = CONSTANTS.mu0
