"""Black-box bi-path ensemble attack.

Surrogate probabilities are aggregated into one distribution; the loss
pulls toward the weakest (lowest-probability) class while pushing off the
runner-up, and gradients flow only through the surrogates. The held-out
target model is queried forward-only, solely for the success check, and a
semantic-consistency initialization can warm-start the chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dac import AttackResult, DivergedRunError, LATENT_SHAPE
from .edict import LatentPair, coeffs_at, edict_denoise_step, init_pair
from .guidance import (GuidanceConfig, NonFiniteGradientError, cross_entropy,
                       guide_pair, merge_pair, one_shot_preview)
from .images import ImageBatch
from .prompts import PromptSpec
from .schedules import NoiseSchedule


@dataclass
class EnsembleSpec:
    surrogates: list
    betas: list[float]

    def __post_init__(self):
        if len(self.surrogates) < 1:
            raise ValueError("ensemble needs at least one surrogate")
        if len(self.betas) != len(self.surrogates):
            raise ValueError("betas must match the surrogate count")
        for b in self.betas:
            if not (b > 0 and torch.isfinite(torch.tensor(b))):
                raise ValueError("betas must be positive and finite")
        counts = {s.num_classes for s in self.surrogates}
        if len(counts) != 1:
            raise ValueError("surrogates must share a class count")

    @property
    def num_classes(self) -> int:
        return self.surrogates[0].num_classes


@dataclass(frozen=True)
class BiPathLoss:
    loss_div: float
    loss_tar: float
    combined: float


def aggregate_ensemble(probs: list[torch.Tensor], betas) -> torch.Tensor:
    """Beta-weighted mean of probability rows; still sums to one."""
    if len(probs) == 0:
        raise ValueError("nothing to aggregate")
    if len(probs) != len(betas):
        raise ValueError("probability list and betas differ in length")
    total = None
    norm = 0.0
    for p, beta in zip(probs, betas):
        if beta <= 0:
            raise ValueError("betas must be positive")
        total = beta * p if total is None else total + beta * p
        norm += beta
    return total / norm


def second_highest_label(probs: torch.Tensor, exclude: int) -> int:
    """Runner-up class: argmax with `exclude` removed, ties to lowest index."""
    if probs.ndim != 1:
        raise ValueError("expects a single probability row")
    M = probs.shape[0]
    if M < 2:
        raise ValueError("need at least two classes")
    if not 0 <= exclude < M:
        raise ValueError(f"exclude label {exclude} outside [0, {M})")
    masked = probs.clone()
    masked[exclude] = -torch.inf
    return int(masked.argmax())


def bipath_loss(agg_probs: torch.Tensor, y_second: int, y_target: int) -> BiPathLoss:
    """Diversion and target components, combined as their exact mean."""
    if agg_probs.ndim != 1:
        raise ValueError("expects a single probability row")
    loss_div = -float(cross_entropy(agg_probs[None], y_second))
    loss_tar = float(cross_entropy(agg_probs[None], y_target))
    return BiPathLoss(loss_div=loss_div, loss_tar=loss_tar,
                      combined=(loss_div + loss_tar) / 2.0)


def _combined_loss(agg: torch.Tensor, y_second: torch.Tensor,
                   y_target: torch.Tensor) -> torch.Tensor:
    loss_div = -cross_entropy(agg, y_second)
    loss_tar = cross_entropy(agg, y_target)
    return (loss_div + loss_tar) / 2.0


def _aggregate_on(ensemble: EnsembleSpec, images: torch.Tensor) -> torch.Tensor:
    return aggregate_ensemble([s.probs(images) for s in ensemble.surrogates],
                              ensemble.betas)


def bipath_gradient(ensemble: EnsembleSpec, decode, z: torch.Tensor,
                    y_second, y_target) -> torch.Tensor:
    """d combined-loss / d z, chained through aggregation and the preview."""
    if isinstance(y_second, int):
        y_second = torch.full((z.shape[0],), y_second, dtype=torch.long)
    if isinstance(y_target, int):
        y_target = torch.full((z.shape[0],), y_target, dtype=torch.long)
    leaf = z.detach().clone().requires_grad_(True)
    agg = _aggregate_on(ensemble, decode(leaf))
    loss = _combined_loss(agg, y_second, y_target).sum()
    (grad,) = torch.autograd.grad(loss, leaf)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("bi-path gradient is not finite")
    return grad


def semantic_init(spec: PromptSpec, scorer, steps: int, sched: NoiseSchedule,
                  denoiser, p: float, seed: int, n: int = 1,
                  alpha: float = 0.5, init_scale: float = 0.1) -> LatentPair:
    """Similarity-guided warm start for the attack chain.

    Rolls the coupled chain forward `steps` denoise steps, ascending the
    image/prompt similarity on each branch along the way, then merges and
    re-splits. steps=0 returns the pure seeded noise pair.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps > sched.num_steps:
        raise ValueError("cannot warm-start for more steps than the chain has")
    pair = init_pair((n, *LATENT_SHAPE), seed, sched.num_steps)
    if steps == 0:
        return pair
    eps_fn = denoiser.bind(sched, spec.condition)
    text_emb = scorer.embed_text(spec.expanded_prompt)

    def ascent_grad(latents: torch.Tensor, t: int) -> torch.Tensor:
        leaf = latents.detach().clone().requires_grad_(True)
        img_emb = scorer.embed_images(one_shot_preview(leaf, t, eps_fn, sched))
        cos = torch.nn.functional.cosine_similarity(img_emb, text_emb[None], dim=-1)
        (grad,) = torch.autograd.grad(-cos.sum(), leaf)
        return grad

    for _ in range(steps):
        t = pair.t
        g_x = ascent_grad(pair.x, t)
        g_y = ascent_grad(pair.y, t)
        pair = LatentPair(pair.x - init_scale * g_x, pair.y - init_scale * g_y, t)
        pair = edict_denoise_step(pair, eps_fn, coeffs_at(sched, t, p))
    merged = alpha * pair.x + (1.0 - alpha) * pair.y
    return LatentPair(merged, merged.clone(), pair.t)


def _check_black_box(ensemble: EnsembleSpec, held_out) -> None:
    for surrogate in ensemble.surrogates:
        if surrogate is held_out or getattr(surrogate, "name", None) == getattr(held_out, "name", object()):
            raise ValueError(
                f"held-out model {getattr(held_out, 'name', held_out)!r} is part of the ensemble"
            )


def run_bpdac_suite(spec: PromptSpec, origin_label: int, ensemble: EnsembleSpec,
                    held_out, cfg: GuidanceConfig, seeds: list[int], *,
                    denoiser, sched: NoiseSchedule, mix_p: float = 0.93,
                    scorer=None, init_steps: int = 0,
                    init_scale: float = 0.1) -> list[AttackResult]:
    """Batched bi-path attack; success is the held-out model leaving origin."""
    _check_black_box(ensemble, held_out)
    if not 0 <= origin_label < ensemble.num_classes:
        raise ValueError(f"origin label {origin_label} outside [0, {ensemble.num_classes})")
    if init_steps > 0 and scorer is None:
        raise ValueError("semantic initialization needs a scorer")
    n = len(seeds)
    if n == 0:
        return []

    eps_fn = denoiser.bind(sched, spec.condition)
    if init_steps > 0:
        starts = [semantic_init(spec, scorer, init_steps, sched, denoiser,
                                mix_p, seed, alpha=cfg.alpha, init_scale=init_scale)
                  for seed in seeds]
        pair = LatentPair(torch.cat([s.x for s in starts]),
                          torch.cat([s.y for s in starts]), starts[0].t)
    else:
        chunks = [init_pair((1, *LATENT_SHAPE), s, sched.num_steps) for s in seeds]
        pair = LatentPair(torch.cat([c.x for c in chunks]),
                          torch.cat([c.y for c in chunks]), sched.num_steps)

    origin = torch.full((n,), origin_label, dtype=torch.long)
    total = min(pair.t, cfg.max_steps)
    done = torch.zeros(n, dtype=torch.bool)
    final = torch.zeros((n, *LATENT_SHAPE), dtype=torch.float64)
    predicted = torch.full((n,), -1, dtype=torch.long)
    steps_used = np.zeros(n, dtype=np.int64)
    trace = np.full((n, total), np.nan)

    for k in range(1, total + 1):
        t = pair.t
        live = ~done
        steps_used[live.numpy()] = k

        z = merge_pair(pair, cfg.alpha)
        with torch.no_grad():
            preview = one_shot_preview(z, t, eps_fn, sched)
            held_preds = held_out.probs(preview).argmax(dim=-1)
            agg = _aggregate_on(ensemble, preview)

        masked = agg.clone()
        masked[torch.arange(n), origin] = -torch.inf
        y_second = masked.argmax(dim=-1)
        y_target = agg.argmin(dim=-1)
        trace[live.numpy(), k - 1] = _combined_loss(agg, y_second, y_target)[live].numpy()

        hit = held_preds != origin
        newly = live & hit
        final[newly] = preview[newly]
        predicted[newly] = held_preds[newly]
        done |= newly
        if bool(done.all()):
            break

        def decode(latents, step=t):
            return one_shot_preview(latents, step, eps_fn, sched)

        try:
            g_x = bipath_gradient(ensemble, decode, pair.x, y_second, y_target)
            g_y = bipath_gradient(ensemble, decode, pair.y, y_second, y_target)
        except NonFiniteGradientError:
            raise DivergedRunError(k) from None
        mask = (~done).to(torch.float64)[:, None, None, None]
        pair = guide_pair(pair, g_x * mask, g_y * mask, cfg)
        merged = merge_pair(pair, cfg.alpha)
        pair = LatentPair(merged, merged.clone(), t)
        pair = edict_denoise_step(pair, eps_fn, coeffs_at(sched, t, mix_p))
        if not (torch.isfinite(pair.x).all() and torch.isfinite(pair.y).all()):
            raise DivergedRunError(k)

    open_rows = ~done
    if total > 0 and bool(open_rows.any()):
        z = merge_pair(pair, cfg.alpha)
        with torch.no_grad():
            image = one_shot_preview(z, pair.t, eps_fn, sched)
            preds = held_out.probs(image).argmax(dim=-1)
        final[open_rows] = image[open_rows]
        predicted[open_rows] = preds[open_rows]
        done |= open_rows & (preds != origin)
    elif total == 0:
        with torch.no_grad():
            final = one_shot_preview(merge_pair(pair, cfg.alpha), pair.t, eps_fn, sched)

    config = {
        "eta_x": cfg.eta_x, "eta_y": cfg.eta_y, "alpha": cfg.alpha,
        "grad_scale": cfg.grad_scale, "max_steps": cfg.max_steps,
        "mix_p": mix_p, "targeted": False, "chain_steps": sched.num_steps,
        "surrogates": [s.name for s in ensemble.surrogates],
        "betas": list(ensemble.betas),
        "held_out": getattr(held_out, "name", "unknown"),
        "init_steps": init_steps, "label_name": spec.label_name,
        "prompt": spec.expanded_prompt,
    }
    results = []
    for i, seed in enumerate(seeds):
        results.append(AttackResult(
            final_image=ImageBatch(final[i:i + 1].clone()),
            success=bool(done[i]),
            steps_used=int(steps_used[i]),
            per_step_loss=trace[i, :steps_used[i]].copy(),
            predicted_label=int(predicted[i]),
            target_label=origin_label,
            seed=seed,
            config=dict(config),
        ))
    return results


def run_bpdac(spec: PromptSpec, origin_label: int, ensemble: EnsembleSpec,
              held_out, cfg: GuidanceConfig, seed: int, *, denoiser,
              sched: NoiseSchedule, mix_p: float = 0.93, scorer=None,
              init_steps: int = 0, init_scale: float = 0.1) -> AttackResult:
    """Single-seed bi-path attack; see run_bpdac_suite."""
    return run_bpdac_suite(
        spec, origin_label, ensemble, held_out, cfg, [seed], denoiser=denoiser,
        sched=sched, mix_p=mix_p, scorer=scorer, init_steps=init_steps,
        init_scale=init_scale,
    )[0]
