"""Forward noising, the conditional denoising loss and a DDIM sampler.

Images live in [-1, 1]. The all-zero condition is the "null" condition used
for classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, sse, stream
from .tschedule import TimestepSchedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if (t < 0).any() or (t >= schedule.T).any():
        raise ValueError(f"timestep outside [0, {schedule.T - 1}]")
    return t


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with ``t`` scalar or one per batch item."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = _check_t(schedule, t)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def training_loss(model, x0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator, p_drop: float = 0.1) -> Tensor:
    """Mean squared error between predicted and true noise at uniformly drawn timesteps.

    Each item's condition is replaced by zeros with probability ``p_drop``.
    """
    n = x0.shape[0]
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    keep = (rng.random(n) >= p_drop).astype(cond.dtype).reshape(-1, 1, 1, 1)
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(x_t, cond * keep, t)
    return sse(pred, Tensor(eps, dtype=pred.dtype), reduction="mean")


@dataclass(frozen=True)
class SamplerSpec:
    timesteps: TimestepSchedule
    eta: float = 0.0
    guidance: float = 1.0
    depths: tuple[int, ...] | None = None  # optional per-step depth, aligned with descending timesteps
    clip_x0: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.guidance}")
        if self.depths is not None and len(self.depths) != len(self.timesteps):
            raise ValueError("depths must give one depth per scheduled step")

    @property
    def passes(self) -> int:
        return 1 if self.guidance == 1.0 else 2


def ddim_sigma(ab_t: float, ab_prev: float, eta: float) -> float:
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)


def expected_invocations(spec: SamplerSpec, batch: int) -> int:
    return batch * len(spec.timesteps) * spec.passes


def initial_noise(seeds: Sequence[int], shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    return np.stack([stream(s, "x_T").standard_normal(shape) for s in seeds]).astype(dtype)


def ddim_sample(model, cond: np.ndarray, spec: SamplerSpec, seeds: Sequence[int],
                schedule: NoiseSchedule, x_T: np.ndarray | None = None) -> np.ndarray:
    """Run DDIM from the largest scheduled timestep down; returns clamped x0 estimates.

    ``seeds`` gives one noise seed per batch item; initial noise and the
    per-step stochastic term are drawn from that item's own streams.
    """
    steps = np.asarray(spec.timesteps.steps, dtype=np.int64)
    if len(steps) == 0:
        raise ValueError("empty timestep schedule")
    if (np.diff(steps) <= 0).any() or steps[0] < 0 or steps[-1] >= schedule.T:
        raise ValueError(f"timesteps must be strictly increasing within [0, {schedule.T - 1}]")
    n = cond.shape[0]
    if len(seeds) != n:
        raise ValueError(f"need one seed per batch item, got {len(seeds)} for {n}")
    cfg = model.config
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    dtype = next(iter(model.params.values())).dtype
    x = initial_noise(seeds, shape, dtype) if x_T is None else x_T.astype(dtype, copy=True)
    cond = cond.astype(dtype, copy=False)
    z_streams = [stream(s, "ddim_z") for s in seeds] if spec.eta > 0 else None
    order = steps[::-1]
    ab = schedule.alpha_bars
    null = np.zeros_like(cond)
    for k, tau in enumerate(order):
        depth = None if spec.depths is None else spec.depths[k]
        if spec.passes == 1:
            eps = model(x, cond, int(tau), depth=depth).data
        else:
            both = model(np.concatenate([x, x]), np.concatenate([cond, null]), int(tau), depth=depth).data
            e_cond, e_unc = both[:n], both[n:]
            eps = e_unc + spec.guidance * (e_cond - e_unc)
        a_t = ab[tau]
        x0_hat = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if k == len(order) - 1:
            return np.clip(x0_hat, -1.0, 1.0).astype(dtype, copy=False)
        if spec.clip_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        a_prev = ab[order[k + 1]]
        sigma = ddim_sigma(a_t, a_prev, spec.eta)
        x = np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev - sigma**2) * eps
        if sigma > 0:
            z = np.stack([g.standard_normal(shape) for g in z_streams])
            x = x + sigma * z
        x = x.astype(dtype, copy=False)
    raise AssertionError("unreachable")
