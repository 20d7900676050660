"""Noise schedules and the forward (noising) processes.

Steps are 1-indexed: ``t`` runs from 1 to ``T`` and ``t = 0`` is the clean
state, for which ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_cloud


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_step(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def noise_scale(self, t: int) -> float:
        return noise_scale(t, self)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ScheduleError("betas must be a non-empty 1D array")
    if not np.all((betas > 0) & (betas < 1)):
        raise ScheduleError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars)


def make_linear_schedule(T: int = 1000, beta_start: float = 3.5e-5,
                         beta_end: float = 0.007) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError("a linear schedule needs T >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def noise_scale(t: int, sched: NoiseSchedule) -> float:
    """Standard deviation of the offset added at step ``t``: sqrt(1 - alpha_bar_t)."""
    return float(np.sqrt(1.0 - sched.alpha_bar(sched.check_step(t))))


def _check_noise(x0: np.ndarray, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ScheduleError(f"noise shape {eps.shape} does not match points {x0.shape}")
    return eps


def forward_noise_global(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form DDPM marginal: sqrt(a_bar) * x0 + sqrt(1 - a_bar) * eps."""
    x0 = as_cloud(x0)
    eps = _check_noise(x0, eps)
    ab = sched.alpha_bar(sched.check_step(t))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_noise_local(points, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Point-wise local noising: each point is the origin of its own offset."""
    pts = as_cloud(points)
    eps = _check_noise(pts, eps)
    return pts + noise_scale(t, sched) * eps
