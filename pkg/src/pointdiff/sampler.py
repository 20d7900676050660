"""Reverse diffusion with classifier-free guidance.

A noise predictor is any object with a ``predict(noisy, condition, t)`` method
returning one 3-vector per noisy point. ``condition=None`` is the null token,
i.e. the unconditional branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .geometry import EmptyInputError, as_cloud, replicate
from .schedule import NoiseSchedule, ScheduleError, forward_noise_local, noise_scale


class SamplerError(ValueError):
    pass


class NoisePredictor(Protocol):
    def predict(self, noisy: np.ndarray, condition, t: int) -> np.ndarray: ...


SOLVERS = ("ddpm", "ddim")
SIGMA_MODES = ("std", "verbatim")


@dataclass
class SamplerConfig:
    s: float = 6.0
    steps: int = 50
    stochastic: bool = False
    sigma_mode: str = "std"
    seed: int = 0
    # "ddim": deterministic first-order jump between visited steps.
    # "ddpm": the one-step reverse update applied at every visited step.
    solver: str = "ddim"
    replicate: int = 10

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise SamplerError(f"steps must lie in [1, {T}], got {self.steps}")
        if not np.isfinite(self.s):
            raise SamplerError("guidance weight must be finite")
        if self.sigma_mode not in SIGMA_MODES:
            raise SamplerError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.solver not in SOLVERS:
            raise SamplerError(f"unknown solver {self.solver!r}")
        if self.replicate < 1:
            raise SamplerError("replicate must be >= 1")


def _vectors(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise SamplerError(f"{name} must be an (N, 3) array, got {a.shape}")
    return a


def cfg_combine(eps_uncond, eps_cond, s: float) -> np.ndarray:
    """Guided noise: eps_uncond + s * (eps_cond - eps_uncond)."""
    eu = _vectors(eps_uncond, "eps_uncond")
    ec = _vectors(eps_cond, "eps_cond")
    if eu.shape != ec.shape:
        raise SamplerError(f"prediction lengths differ: {len(eu)} vs {len(ec)}")
    if s == 1:
        return ec.copy()
    return eu + s * (ec - eu)


def posterior_sigma(t: int, sched: NoiseSchedule, sigma_mode: str = "std") -> float:
    ab_prev = sched.alpha_bar(t - 1)
    var = (1.0 - ab_prev) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)
    return float(np.sqrt(var)) if sigma_mode == "std" else float(var)


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule,
                 config: SamplerConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """One reverse update, x_{t-1} = x_t - (1 - a_t) / sqrt(1 - a_bar_t) * eps_hat + sigma_t z.

    The signal is never rescaled. The noise term is dropped for
    deterministic configs and at ``t == 1``.
    """
    config = config or SamplerConfig()
    x_t = as_cloud(x_t)
    eps_hat = _vectors(eps_hat, "eps_hat")
    if eps_hat.shape != x_t.shape:
        raise SamplerError(f"noise estimate has {len(eps_hat)} rows for {len(x_t)} points")
    t = sched.check_step(t)
    coef = (1.0 - sched.alpha(t)) / np.sqrt(1.0 - sched.alpha_bar(t))
    out = x_t - coef * eps_hat
    if config.stochastic and t > 1:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        out = out + posterior_sigma(t, sched, config.sigma_mode) * rng.standard_normal(x_t.shape)
    return out


def jump_step(x_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic move from step ``t`` to ``t_next < t`` under local noising.

    Estimates the clean points as ``x_t - scale_t * eps_hat`` and re-noises them
    to ``t_next`` along the same direction; ``t_next == 0`` returns the estimate.
    """
    x_t = as_cloud(x_t)
    eps_hat = _vectors(eps_hat, "eps_hat")
    if eps_hat.shape != x_t.shape:
        raise SamplerError(f"noise estimate has {len(eps_hat)} rows for {len(x_t)} points")
    t = sched.check_step(t)
    t_next = sched.check_step(t_next, allow_zero=True)
    if t_next >= t:
        raise SamplerError("jump target must precede the current step")
    scale_next = 0.0 if t_next == 0 else noise_scale(t_next, sched)
    return x_t - (noise_scale(t, sched) - scale_next) * eps_hat


def step_sequence(T: int, steps: int) -> np.ndarray:
    """Strictly decreasing visited steps, evenly strided from T down to 1."""
    if not 1 <= steps <= T:
        raise SamplerError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([1], dtype=np.int64)
    return np.round(np.linspace(T, 1, steps)).astype(np.int64)


def build_initial_noisy(scan, K: int, sched: NoiseSchedule, seed: int) -> np.ndarray:
    """Replicate the scan ``K`` times and push every copy to step T."""
    scan = as_cloud(scan)
    if len(scan) == 0:
        raise EmptyInputError("cannot build a noisy cloud from an empty scan")
    pts = replicate(scan, K)
    eps = np.random.default_rng(seed).standard_normal(pts.shape)
    return forward_noise_local(pts, sched.T, eps, sched)


def _predict(predictor, noisy, condition, t):
    fn = predictor.predict if hasattr(predictor, "predict") else predictor
    return fn(noisy, condition, t)


StepCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def sample(predictor, condition, init, sched: NoiseSchedule,
           config: SamplerConfig | None = None,
           callback: StepCallback | None = None) -> np.ndarray:
    """Denoise ``init`` down to step 0, guided by ``condition``.

    ``callback(t, x_t, eps_cond, eps_guided)`` runs at every visited step
    before the update, which is how per-step noise statistics get recorded.
    """
    config = config or SamplerConfig()
    try:
        config.validate(sched.T)
    except ScheduleError as e:
        raise SamplerError(str(e)) from e
    x = as_cloud(init).copy()
    rng = np.random.default_rng(config.seed)
    ts = step_sequence(sched.T, config.steps)
    for i, t in enumerate(ts):
        t = int(t)
        eps_u = np.asarray(_predict(predictor, x, None, t), dtype=np.float64)
        eps_c = np.asarray(_predict(predictor, x, condition, t), dtype=np.float64)
        eps = cfg_combine(eps_u, eps_c, config.s)
        if callback is not None:
            callback(t, x, eps_c, eps)
        if config.solver == "ddim":
            t_next = int(ts[i + 1]) if i + 1 < len(ts) else 0
            x = jump_step(x, eps, t, t_next, sched)
        else:
            x = reverse_step(x, eps, t, sched, config, rng)
    return x


class ConsistentOraclePredictor:
    """Predicts the one noise vector that explains each point's offset from ``base``.

    Ignores the condition entirely, so the guided and unguided branches agree.
    """

    def __init__(self, base, sched: NoiseSchedule):
        self.base = as_cloud(base).copy()
        self.sched = sched

    def predict(self, noisy, condition, t: int) -> np.ndarray:
        x = as_cloud(noisy)
        if x.shape != self.base.shape:
            raise SamplerError(f"oracle built for {len(self.base)} points, got {len(x)}")
        return (x - self.base) / noise_scale(t, self.sched)


def consistent_oracle_predictor(base, sched: NoiseSchedule) -> ConsistentOraclePredictor:
    return ConsistentOraclePredictor(base, sched)
