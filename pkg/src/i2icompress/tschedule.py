"""Gamma-curve timestep schedules.

``gamma_curve`` places ``n`` points at ``T_max * t**gamma`` for ``t`` uniform
on [0, 1]. ``gamma > 1`` packs points near timestep 0 (low noise, the detail
end); ``gamma < 1`` packs them near ``T_max`` (high noise, the structure end).

``scaled_gamma_curve`` remaps ``t`` affinely before the power so that, with
strength ``alpha``, the largest point drops below ``T_max`` for ``gamma > 1``
and the smallest point rises above 0 for ``gamma < 1``::

    t' = (T_max * t - lo) / (hi - lo)
    (lo, hi) = (0, T_max + alpha * (gamma - 1))       gamma >= 1
               (alpha * (1 - 1/gamma), T_max)          gamma <  1
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_ALPHA_FRACTION = 0.03


def default_alpha(t_max: int) -> float:
    """Scale strength as a fraction of the trained horizon (30 at T = 1000)."""
    return DEFAULT_ALPHA_FRACTION * (t_max + 1)


@dataclass(frozen=True)
class GammaSpec:
    gamma: float
    n: int
    t_max: int = 999
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.n < 2:
            raise ValueError(f"need at least 2 steps, got {self.n}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.gamma < 1 and self.alpha * (1.0 / self.gamma - 1.0) >= self.t_max:
            raise ValueError(
                f"lower bound alpha*(1/gamma-1) = {self.alpha * (1.0 / self.gamma - 1.0):.3f} "
                f"reaches T_max = {self.t_max}"
            )

    def bounds(self) -> tuple[float, float]:
        if self.gamma >= 1:
            return 0.0, self.t_max + self.alpha * (self.gamma - 1.0)
        return self.alpha * (1.0 - 1.0 / self.gamma), float(self.t_max)


@dataclass(frozen=True)
class TimestepSchedule:
    steps: tuple[int, ...]
    provenance: str = "uniform"

    def __post_init__(self) -> None:
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"timesteps must be strictly increasing: {steps}")

    def __len__(self) -> int:
        return len(self.steps)

    def to_csv_line(self) -> str:
        return ",".join(str(s) for s in self.steps)

    @classmethod
    def from_csv_line(cls, line: str, provenance: str = "csv") -> "TimestepSchedule":
        return cls(tuple(int(v) for v in line.strip().split(",") if v.strip()), provenance)


def _unit_grid(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / (n - 1)


def gamma_curve(gamma: float, n: int, t_max: int = 999) -> np.ndarray:
    spec = GammaSpec(gamma, n, t_max)
    return spec.t_max * _unit_grid(spec.n) ** spec.gamma


def scaled_gamma_curve(gamma: float, n: int, t_max: int = 999, alpha: float | None = None) -> np.ndarray:
    if alpha is None:
        alpha = default_alpha(t_max)
    spec = GammaSpec(gamma, n, t_max, alpha)
    lo, hi = spec.bounds()
    t_prime = (spec.t_max * _unit_grid(spec.n) - lo) / (hi - lo)
    return spec.t_max * t_prime**spec.gamma


def discretize(points: Sequence[float], t_max: int, provenance: str = "") -> TimestepSchedule:
    """Round to integers, then push collisions apart to get a strictly increasing sequence.

    Duplicates are nudged upward; if that overflows ``t_max`` the tail is
    clamped and earlier entries are nudged downward.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n > t_max + 1:
        raise ValueError(f"cannot place {n} distinct timesteps in [0, {t_max}]")
    if (np.diff(pts) < 0).any() or pts.min(initial=0) < 0 or pts.max(initial=0) > t_max:
        raise ValueError("points must be non-decreasing within [0, t_max]")
    v = np.floor(pts + 0.5).astype(np.int64)
    for i in range(1, n):
        if v[i] <= v[i - 1]:
            v[i] = v[i - 1] + 1
    if n and v[-1] > t_max:
        v[-1] = t_max
        for i in range(n - 2, -1, -1):
            if v[i] >= v[i + 1]:
                v[i] = v[i + 1] - 1
    return TimestepSchedule(tuple(int(s) for s in v), provenance)


def uniform_schedule(n: int, t_max: int = 999) -> TimestepSchedule:
    return discretize(gamma_curve(1.0, n, t_max), t_max, "uniform")


def gamma_schedule(gamma: float, n: int, t_max: int = 999, alpha: float | None = None) -> TimestepSchedule:
    if alpha is None:
        alpha = default_alpha(t_max)
    pts = np.clip(scaled_gamma_curve(gamma, n, t_max, alpha), 0.0, t_max)
    return discretize(pts, t_max, f"gamma={gamma:.6g},alpha={alpha:.6g}")
