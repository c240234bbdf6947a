"""Per-unit bases and measurement/process noise levels."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Bases:
    """System bases used at the reporting boundary.

    ``v_base`` is the magnitude of a nominal dq voltage phasor (line-to-line,
    volts) and ``s_base`` the three-phase apparent power base. The current
    base follows the usual three-phase convention ``S / (sqrt(3) V)``.
    """

    v_base: float = 13.2e3
    s_base: float = 10e6

    def __post_init__(self):
        if self.v_base <= 0 or self.s_base <= 0:
            raise ValueError("bases must be positive")

    @property
    def i_base(self) -> float:
        return self.s_base / (math.sqrt(3.0) * self.v_base)

    def voltage_to_pu(self, v):
        return v / self.v_base

    def current_to_pu(self, i):
        return i / self.i_base


@dataclass(frozen=True)
class NoiseSpec:
    """Noise levels in per-unit variance, applied to each real (d or q) component.

    Defaults are the PMU-grade levels used throughout the experiments:
    5e-4 pu for voltage and current measurements and 1e-4 pu process noise.
    """

    sigma2_u: float = 5e-4
    sigma2_x: float = 5e-4
    sigma2_q: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        # zero is allowed for noiseless generation; estimators need positive weights
        if min(self.sigma2_u, self.sigma2_x, self.sigma2_q) < 0:
            raise ValueError("noise variances must be non-negative")

    def voltage_variance(self, bases: Bases) -> float:
        """Voltage measurement variance in V^2."""
        return self.sigma2_u * bases.v_base**2

    def current_variance(self, bases: Bases) -> float:
        """Current measurement variance in A^2."""
        return self.sigma2_x * bases.i_base**2

    def process_variance(self, bases: Bases) -> float:
        """Branch-current process noise variance in A^2."""
        return self.sigma2_q * bases.i_base**2
