"""Classifier-driven gradients on coupled latents, the per-branch update,
and the weighted merge back to a single latent.

Latents are never classified raw: gradients chain through a one-shot
denoised preview of the clean image before the classifier sees anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .edict import LatentPair
from .schedules import NoiseSchedule, predict_x0

PROB_FLOOR = 1e-12


class NonFiniteGradientError(RuntimeError):
    """The latent diverged far enough that gradients stopped being finite."""


@dataclass(frozen=True)
class GuidanceConfig:
    eta_x: float = 1.0
    eta_y: float = 1.0
    alpha: float = 0.5
    grad_scale: float = 3e-3
    max_steps: int = 200

    def __post_init__(self):
        problems = []
        if self.eta_x <= 0:
            problems.append("eta_x must be > 0")
        if self.eta_y <= 0:
            problems.append("eta_y must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.grad_scale <= 0:
            problems.append("grad_scale must be > 0")
        if self.max_steps < 0:
            problems.append("max_steps must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))


def one_shot_preview(z: torch.Tensor, t: int, eps_fn, sched: NoiseSchedule,
                     clamp: bool = True) -> torch.Tensor:
    """Denoised clean-image estimate of a latent at step t (identity at t=0)."""
    img = z if t == 0 else predict_x0(z, eps_fn(z, t), t, sched)
    return img.clamp(-1.0, 1.0) if clamp else img


def cross_entropy(probs: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample -log p[label] with probability clamping at 1e-12."""
    if isinstance(labels, int):
        labels = torch.full((probs.shape[0],), labels, dtype=torch.long)
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def latent_gradient(classifier, decode, z: torch.Tensor, loss_kind: str,
                    label) -> torch.Tensor:
    """d loss / d z for cross-entropy toward (or away from) a label.

    decode maps latents to images differentiably; `away` is exactly the
    negated `toward` gradient.
    """
    if loss_kind not in ("cross_entropy_toward", "cross_entropy_away"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    leaf = z.detach().clone().requires_grad_(True)
    loss = cross_entropy(classifier.probs(decode(leaf)), label).sum()
    (grad,) = torch.autograd.grad(loss, leaf)
    if loss_kind == "cross_entropy_away":
        grad = -grad
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("latent gradient is not finite")
    return grad


def guide_pair(pair: LatentPair, g_x: torch.Tensor, g_y: torch.Tensor,
               cfg: GuidanceConfig) -> LatentPair:
    """One descent step on each branch; the step index is untouched."""
    if g_x.shape != pair.x.shape or g_y.shape != pair.y.shape:
        raise ValueError("gradient shapes must match the latent pair")
    return LatentPair(
        pair.x - cfg.eta_x * cfg.grad_scale * g_x,
        pair.y - cfg.eta_y * cfg.grad_scale * g_y,
        pair.t,
    )


def merge_pair(pair: LatentPair, alpha: float) -> torch.Tensor:
    """z = alpha*x + (1-alpha)*y."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * pair.x + (1.0 - alpha) * pair.y


def finite_diff_check(classifier, decode, z: torch.Tensor, label: int,
                      h: float = 1e-3, num_coords: int = 32,
                      seed: int = 0) -> float:
    """Central-difference spot check of latent_gradient.

    Compares the analytic gradient against (l(z+h) - l(z-h)) / 2h on a
    seeded random coordinate subset; returns the worst relative error.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    z = z.detach().to(torch.float64)
    analytic = latent_gradient(classifier, decode, z, "cross_entropy_toward", label)

    def loss_at(flat_z):
        with torch.no_grad():
            probs = classifier.probs(decode(flat_z.reshape(z.shape)))
        return float(cross_entropy(probs, label).sum())

    gen = torch.Generator().manual_seed(seed)
    count = min(z.numel(), max(32, num_coords))
    coords = torch.randperm(z.numel(), generator=gen)[:count]
    flat = z.reshape(-1)
    worst = 0.0
    for i in coords.tolist():
        bumped = flat.clone()
        bumped[i] = flat[i] + h
        up = loss_at(bumped)
        bumped[i] = flat[i] - h
        down = loss_at(bumped)
        numeric = (up - down) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst
