"""Survival-probability schedules p(t), loss weights and attrition bounds.

A schedule maps diffusion time ``t`` in ``[0, 1]`` to the probability that a
single unit of count survives the forward thinning process up to ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

DEFAULT_P_MIN = math.exp(-15.0)
DEFAULT_NUM_STEPS = 1000
NLL_T_FLOOR = 1e-4
_BETA_TOL = 1e-12


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    BLACKOUT_CONTINUOUS = "blackout_cont"
    BLACKOUT_DISCRETE = "blackout_disc"


class WeightKind(str, Enum):
    NEG_PRIME = "neg_prime"
    NLL = "nll"
    CONSTANT = "constant"


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _check_time(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t!r}")
    return arr


def _maybe_scalar(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


@dataclass(frozen=True)
class PSchedule:
    """Survival-probability schedule.

    Attributes:
        kind: Functional family of the schedule.
        p_min: Endpoint offset for the Blackout families; ``p(0) = 1 - p_min``
            and ``p(1) = p_min``. Ignored by the cosine schedule.
        num_steps: Grid size ``T`` of the discrete Blackout schedule.
    """

    kind: ScheduleKind = ScheduleKind.COSINE
    p_min: float = DEFAULT_P_MIN
    num_steps: int = DEFAULT_NUM_STEPS

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not 0.0 < self.p_min < 0.5:
            raise ValueError(f"p_min must lie in (0, 0.5), got {self.p_min}")
        if self.num_steps < 2 and self.kind is ScheduleKind.BLACKOUT_DISCRETE:
            raise ValueError("blackout_disc needs num_steps >= 2")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be positive, got {self.num_steps}")

    @classmethod
    def from_name(cls, name: str, p_min: float = DEFAULT_P_MIN,
                  num_steps: int = DEFAULT_NUM_STEPS) -> "PSchedule":
        try:
            kind = ScheduleKind(name)
        except ValueError:
            valid = ", ".join(k.value for k in ScheduleKind)
            raise ValueError(f"unknown schedule {name!r}; expected one of {valid}") from None
        return cls(kind=kind, p_min=p_min, num_steps=num_steps)

    @property
    def name(self) -> str:
        return self.kind.value

    # logit-space endpoints of the Blackout interpolation
    @property
    def _logit_start(self) -> float:
        # logit(1 - p_min) without rounding 1 - p_min first
        return -_logit(self.p_min)

    @property
    def _logit_span(self) -> float:
        return 2.0 * _logit(self.p_min)

    def snap(self, t):
        """Round ``t`` to the native grid ``k / (T - 1)`` (discrete kind only)."""
        arr = _check_time(t)
        if self.kind is ScheduleKind.BLACKOUT_DISCRETE:
            m = self.num_steps - 1
            arr = np.rint(arr * m) / m
        return _maybe_scalar(arr, t)

    def p(self, t):
        return p_of(self, t)

    def dp(self, t):
        return dp_dt(self, t)


def p_of(schedule: PSchedule, t):
    """Survival probability ``p(t)``; accepts scalars or arrays."""
    arr = np.asarray(schedule.snap(t), dtype=np.float64)
    if schedule.kind is ScheduleKind.COSINE:
        out = np.cos(0.5 * np.pi * arr) ** 2
        # cos(pi/2) is 6e-17 in floating point; the endpoint is exactly zero
        out = np.where(arr == 1.0, 0.0, out)
    else:
        z = schedule._logit_start + arr * schedule._logit_span
        out = 1.0 / (1.0 + np.exp(-z))
    return _maybe_scalar(out, t)


def dp_dt(schedule: PSchedule, t):
    """Analytic time derivative of ``p``. Always non-positive."""
    arr = np.asarray(schedule.snap(t), dtype=np.float64)
    if schedule.kind is ScheduleKind.COSINE:
        out = -0.5 * np.pi * np.sin(np.pi * arr)
        out = np.where((arr == 0.0) | (arr == 1.0), 0.0, out)
    else:
        p = np.asarray(p_of(schedule, arr))
        out = p * (1.0 - p) * schedule._logit_span
    return _maybe_scalar(out, t)


@dataclass(frozen=True)
class WeightSpec:
    kind: WeightKind = WeightKind.NEG_PRIME

    def __post_init__(self):
        object.__setattr__(self, "kind", WeightKind(self.kind))


def weight(spec: WeightSpec, schedule: PSchedule, t):
    """Loss weight ``w(t)`` for time ``t``.

    ``NLL`` uses a uniform time density, so the weight is
    ``-p'(t) / (1 - p(t))``; it diverges as ``p -> 1`` and is evaluated at
    ``max(t, 1e-4)`` to stay finite.
    """
    arr = _check_time(t)
    if spec.kind is WeightKind.CONSTANT:
        out = np.ones_like(arr)
    elif spec.kind is WeightKind.NEG_PRIME:
        out = -np.asarray(dp_dt(schedule, arr))
    else:
        tc = np.maximum(arr, NLL_T_FLOOR)
        out = -np.asarray(dp_dt(schedule, tc)) / (1.0 - np.asarray(p_of(schedule, tc)))
    return _maybe_scalar(out, t)


def reverse_time_grid(num_steps: int) -> np.ndarray:
    """Decreasing grid ``1 = t_0 > ... > t_T = 0`` with ``num_steps`` intervals."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    return np.linspace(1.0, 0.0, num_steps + 1)


def sigma_max(p_t: float, p_s: float) -> float:
    """Largest attrition rate that keeps the birth probability <= 1."""
    if p_t <= 0.0:
        return 1.0
    return min(1.0, (1.0 - p_s) / p_t)


def beta(p_t: float, p_s: float, sigma: float) -> float:
    """Birth probability that compensates attrition ``sigma`` from t to s."""
    if p_t >= 1.0:
        raise ZeroDivisionError("no reverse step exists from p(t) = 1")
    b = (p_s - (1.0 - sigma) * p_t) / (1.0 - p_t)
    # absorb rounding noise at the boundaries; genuine violations pass through
    if -_BETA_TOL < b < 0.0:
        return 0.0
    if 1.0 < b < 1.0 + _BETA_TOL:
        return 1.0
    return b
