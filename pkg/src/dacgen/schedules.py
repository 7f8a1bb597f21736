"""Noise schedules and deterministic diffusion stepping.

Step-index convention used across the package: a latent "at step t" has
noise level alpha_bar(t), where t counts forward-noising applications.
t = 0 is clean data (alpha_bar = 1 exactly), t = T is the noisiest state.
alpha_bar(t) for t >= 1 reads the 0-based coefficient arrays at t - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients for a T-step chain."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Noise level at step t, with alpha_bar(0) = 1 for clean data."""
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"step index {t} outside [0, {self.num_steps}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def validate(self) -> None:
        T = self.num_steps
        if T < 1:
            raise ValueError("schedule must have at least one step")
        for name, arr in (("betas", self.betas), ("alphas", self.alphas),
                          ("alpha_bars", self.alpha_bars)):
            if arr.shape != (T,):
                raise ValueError(f"{name} must have shape ({T},)")
        if not np.all((self.betas > 0.0) & (self.betas < 1.0)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if not np.allclose(self.alphas, 1.0 - self.betas, rtol=0, atol=1e-15):
            raise ValueError("alphas must equal 1 - betas")
        cum = np.cumprod(self.alphas)
        if not np.allclose(self.alpha_bars, cum, rtol=1e-12, atol=0):
            raise ValueError("alpha_bars must be the cumulative product of alphas")
        if not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")


def make_schedule(num_steps: int, beta_start: float, beta_end: float,
                  kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` interpolates betas evenly between beta_start and beta_end.
    ``cosine`` uses the squared-cosine alpha_bar curve; the beta bounds are
    validated but only used to clip the derived betas into a sane range.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos((steps / num_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        betas = 1.0 - f[1:] / f[:-1]
        betas = np.clip(betas, 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    sched = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
    sched.validate()
    return sched


def subsample_schedule(parent: NoiseSchedule, num_steps: int) -> NoiseSchedule:
    """Derive a short sampling schedule from a long training schedule.

    Picks num_steps evenly spaced alpha_bar values from the parent (always
    including the parent's last step) and rebuilds betas so the child is a
    valid schedule in its own right.
    """
    T = parent.num_steps
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}]")
    idx = np.round(np.linspace(T - 1, 0, num_steps)).astype(int)[::-1]
    bars = parent.alpha_bars[idx]
    alphas = bars / np.concatenate(([1.0], bars[:-1]))
    sched = NoiseSchedule(betas=1.0 - alphas, alphas=alphas, alpha_bars=bars)
    sched.validate()
    return sched


def forward_diffuse(x0: torch.Tensor, t: int, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Noise clean data to step t: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def predict_x0(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int,
               sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward map given a noise estimate: the one-shot clean preview."""
    abar = sched.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def ddim_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int,
              sched: NoiseSchedule) -> torch.Tensor:
    """One deterministic reverse step t -> t-1 (stochasticity fixed to zero).

    Predicts the clean image from eps_pred, then re-noises it to the
    predecessor level. At t = 1 the result is exactly the clean prediction.
    """
    if t < 1:
        raise ValueError("ddim_step needs t >= 1 (step 0 has no predecessor)")
    if t > sched.num_steps:
        raise ValueError(f"step index {t} outside [1, {sched.num_steps}]")
    abar_prev = sched.alpha_bar(t - 1)
    x0_hat = predict_x0(z_t, eps_pred, t, sched)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_pred
