"""Exactly-invertible coupled-latent stepping.

Two latent branches are advanced alternately, each denoised against the
other's noise prediction, then mixed with weight p. Every denoise step has
a closed-form algebraic inverse, so a chain can be undone to round-off.
All arithmetic here is float64 regardless of the noise model's precision;
the 1e-4 round-trip budget over 50 steps is unreachable in float32.

eps_fn is any callable (latents, step) -> predicted noise; bind a trained
denoiser with Denoiser.bind(sched, cond).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .schedules import NoiseSchedule


@dataclass
class LatentPair:
    x: torch.Tensor
    y: torch.Tensor
    t: int

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError("coupled latents must share a shape")
        if self.t < 0:
            raise ValueError("step index must be non-negative")
        self.x = self.x.to(torch.float64)
        self.y = self.y.to(torch.float64)

    def clone(self) -> "LatentPair":
        return LatentPair(self.x.clone(), self.y.clone(), self.t)


@dataclass(frozen=True)
class EdictCoeffs:
    a_t: float
    b_t: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("mixing weight p must lie strictly inside (0, 1)")
        if self.a_t == 0.0:
            raise ValueError("a_t must be nonzero (inversion divides by it)")


def coeffs_at(sched: NoiseSchedule, t: int, p: float) -> EdictCoeffs:
    """Step coefficients such that a plain step is z_{t-1} = a*z_t + b*eps."""
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"step index {t} outside [1, {sched.num_steps}]")
    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t - 1)
    if abar_t == 0.0:
        raise ValueError("alpha_bar(t) is zero")
    a_t = math.sqrt(abar_prev / abar_t)
    b_t = math.sqrt(1.0 - abar_prev) - math.sqrt(abar_prev * (1.0 - abar_t) / abar_t)
    return EdictCoeffs(a_t=a_t, b_t=b_t, p=p)


def init_pair(shape: tuple, seed: int, t: int) -> LatentPair:
    """Seeded pure-noise pair (both branches identical) at step t."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float64)
    return LatentPair(z, z.clone(), t)


def edict_denoise_step(pair: LatentPair, eps_fn, coeffs: EdictCoeffs) -> LatentPair:
    """Coupled denoise step t -> t-1."""
    if pair.t < 1:
        raise ValueError("cannot denoise below step 0")
    a, b, p = coeffs.a_t, coeffs.b_t, coeffs.p
    x_inter = a * pair.x + b * eps_fn(pair.y, pair.t)
    y_inter = a * pair.y + b * eps_fn(x_inter, pair.t)
    x_new = p * x_inter + (1.0 - p) * y_inter
    y_new = p * y_inter + (1.0 - p) * x_new
    return LatentPair(x_new, y_new, pair.t - 1)


def edict_invert_step(pair: LatentPair, eps_fn, coeffs_next: EdictCoeffs) -> LatentPair:
    """Exact inverse of the denoise step, t -> t+1; coeffs are those of t+1."""
    a, b, p = coeffs_next.a_t, coeffs_next.b_t, coeffs_next.p
    t_next = pair.t + 1
    y_inter = (pair.y - (1.0 - p) * pair.x) / p
    x_inter = (pair.x - (1.0 - p) * y_inter) / p
    y_new = (y_inter - b * eps_fn(x_inter, t_next)) / a
    x_new = (x_inter - b * eps_fn(y_new, t_next)) / a
    return LatentPair(x_new, y_new, t_next)


def roundtrip_error(pair0: LatentPair, steps: int, eps_fn,
                    sched: NoiseSchedule, p: float) -> float:
    """Denoise `steps` steps, invert them, and report max-abs deviation."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps > pair0.t:
        raise ValueError(f"cannot take {steps} denoise steps from step {pair0.t}")
    pair = pair0.clone()
    with torch.no_grad():
        for _ in range(steps):
            pair = edict_denoise_step(pair, eps_fn, coeffs_at(sched, pair.t, p))
        for _ in range(steps):
            pair = edict_invert_step(pair, eps_fn, coeffs_at(sched, pair.t + 1, p))
    err_x = (pair.x - pair0.x).abs().max()
    err_y = (pair.y - pair0.y).abs().max()
    return float(torch.maximum(err_x, err_y))
