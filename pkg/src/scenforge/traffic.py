"""IDM parameters and helpers shared by the generator and the simulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class IDMParams:
    s0: float = 2.0
    T: float = 1.5
    a_max: float = 2.0
    b: float = 4.0
    delta: float = 4.0
    b_hard: float = 7.5
    lookahead: float = 50.0
    margin: float = 0.5

    def vector(self, dt: float) -> np.ndarray:
        """Parameter vector in kernel order."""
        return np.array([self.s0, self.T, self.a_max, self.b, self.delta, self.b_hard, dt,
                         self.lookahead, self.margin], dtype=np.float64)


def idm_acceleration(v: float, v0: float, gap: float | None, dv: float,
                     params: IDMParams | None = None) -> float:
    """IDM acceleration; ``gap=None`` means free road."""
    p = (params or IDMParams()).vector(0.1)
    return kernels.idm_accel(float(v), float(v0), -1.0 if gap is None else float(gap), float(dv), p)


def equilibrium_speed(v0: float, gap: float | None, params: IDMParams | None = None) -> float:
    """Speed at which IDM acceleration is zero behind a leader at the same speed."""
    p = params or IDMParams()
    if gap is None or v0 <= 0.0:
        return max(v0, 0.0)

    def f(v):
        return 1.0 - (v / v0) ** p.delta - ((p.s0 + v * p.T) / max(gap, 1e-3)) ** 2

    if f(0.0) <= 0.0:
        return 0.0
    lo, hi = 0.0, v0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo
