"""White-box synthesis loop: interleaves coupled denoising with latent-pair
guidance until the target classifier emits the attacker's label.

The chain checks the classifier on a clean-image preview every step and
exits as soon as it succeeds. Suites of seeds run as one batched chain
(per-sample math is independent, so results match solo runs); run_dac is
the single-seed surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .edict import LatentPair, coeffs_at, edict_denoise_step, init_pair
from .guidance import (GuidanceConfig, NonFiniteGradientError, guide_pair,
                       latent_gradient, merge_pair, one_shot_preview)
from .images import ImageBatch
from .prompts import PromptSpec
from .schedules import NoiseSchedule

LATENT_SHAPE = (3, 32, 32)
NO_PREDICTION = -1


class DivergedRunError(RuntimeError):
    def __init__(self, step_index: int):
        super().__init__(f"latents diverged (non-finite) at attack step {step_index}")
        self.step_index = step_index


@dataclass
class AttackResult:
    final_image: ImageBatch
    success: bool
    steps_used: int
    per_step_loss: np.ndarray
    predicted_label: int
    target_label: int
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.per_step_loss) != self.steps_used:
            raise ValueError("loss trace length must equal steps_used")
        targeted = self.config.get("targeted", True)
        classified = self.predicted_label != NO_PREDICTION
        hit = classified and (
            self.predicted_label == self.target_label if targeted
            else self.predicted_label != self.target_label
        )
        if self.success != hit:
            raise ValueError("success flag inconsistent with predicted label")


def _freeze(state: dict, rows: torch.Tensor, images: torch.Tensor,
            preds: torch.Tensor) -> None:
    state["final"][rows] = images[rows]
    state["predicted"][rows] = preds[rows]
    state["done"] |= rows


def _check_finite(pair: LatentPair, step: int) -> None:
    if not (torch.isfinite(pair.x).all() and torch.isfinite(pair.y).all()):
        raise DivergedRunError(step)


def run_dac_suite(spec: PromptSpec, target_label: int, classifier, denoiser,
                  sched: NoiseSchedule, cfg: GuidanceConfig, seeds: list[int],
                  mix_p: float = 0.93, targeted: bool = True,
                  start_pair: LatentPair | None = None) -> list[AttackResult]:
    """Run the attack for many seeds as one batched chain.

    Targeted mode succeeds when the classifier emits target_label;
    untargeted mode treats target_label as the origin class and succeeds on
    any other prediction.
    """
    n = len(seeds)
    if n == 0:
        return []
    eps_fn = denoiser.bind(sched, spec.condition)
    if start_pair is None:
        chunks = [init_pair((1, *LATENT_SHAPE), s, sched.num_steps) for s in seeds]
        pair = LatentPair(
            torch.cat([c.x for c in chunks]), torch.cat([c.y for c in chunks]),
            sched.num_steps,
        )
    else:
        if start_pair.x.shape[0] != n:
            raise ValueError("start pair batch size must match the seed count")
        pair = start_pair.clone()

    labels = torch.full((n,), target_label, dtype=torch.long)
    kind = "cross_entropy_toward" if targeted else "cross_entropy_away"
    total = min(pair.t, cfg.max_steps)
    state = {
        "done": torch.zeros(n, dtype=torch.bool),
        "final": torch.zeros((n, *LATENT_SHAPE), dtype=torch.float64),
        "predicted": torch.full((n,), NO_PREDICTION, dtype=torch.long),
    }
    steps_used = np.zeros(n, dtype=np.int64)
    trace = np.full((n, total), np.nan)

    for k in range(1, total + 1):
        t = pair.t
        live = ~state["done"]
        steps_used[live.numpy()] = k

        z = merge_pair(pair, cfg.alpha)
        with torch.no_grad():
            preview = one_shot_preview(z, t, eps_fn, sched)
            probs = classifier.probs(preview)
        preds = probs.argmax(dim=-1)
        ce = -torch.log(probs.gather(1, labels[:, None]).squeeze(1).clamp_min(1e-12))
        objective = ce if targeted else -ce
        trace[live.numpy(), k - 1] = objective[live].numpy()

        hit = (preds == labels) if targeted else (preds != labels)
        _freeze(state, live & hit, preview, preds)
        if bool(state["done"].all()):
            break

        def decode(latents, step=t):
            return one_shot_preview(latents, step, eps_fn, sched)

        try:
            g_x = latent_gradient(classifier, decode, pair.x, kind, labels)
            g_y = latent_gradient(classifier, decode, pair.y, kind, labels)
        except NonFiniteGradientError:
            raise DivergedRunError(k) from None
        mask = (~state["done"]).to(torch.float64)[:, None, None, None]
        pair = guide_pair(pair, g_x * mask, g_y * mask, cfg)
        merged = merge_pair(pair, cfg.alpha)
        pair = LatentPair(merged, merged.clone(), t)
        pair = edict_denoise_step(pair, eps_fn, coeffs_at(sched, t, mix_p))
        _check_finite(pair, k)

    open_rows = ~state["done"]
    if total > 0 and bool(open_rows.any()):
        z = merge_pair(pair, cfg.alpha)
        with torch.no_grad():
            image = one_shot_preview(z, pair.t, eps_fn, sched)
            preds = classifier.probs(image).argmax(dim=-1)
        hit = (preds == labels) if targeted else (preds != labels)
        state["final"][open_rows] = image[open_rows]
        state["predicted"][open_rows] = preds[open_rows]
        state["done"] |= open_rows & hit
    elif total == 0:
        with torch.no_grad():
            state["final"] = one_shot_preview(merge_pair(pair, cfg.alpha), pair.t,
                                              eps_fn, sched)

    config = {
        "eta_x": cfg.eta_x, "eta_y": cfg.eta_y, "alpha": cfg.alpha,
        "grad_scale": cfg.grad_scale, "max_steps": cfg.max_steps,
        "mix_p": mix_p, "targeted": targeted, "chain_steps": sched.num_steps,
        "classifier": getattr(classifier, "name", "unknown"),
        "label_name": spec.label_name, "prompt": spec.expanded_prompt,
    }
    results = []
    for i, seed in enumerate(seeds):
        results.append(AttackResult(
            final_image=ImageBatch(state["final"][i:i + 1].clone()),
            success=bool(state["done"][i]),
            steps_used=int(steps_used[i]),
            per_step_loss=trace[i, :steps_used[i]].copy(),
            predicted_label=int(state["predicted"][i]),
            target_label=target_label,
            seed=seed,
            config=dict(config),
        ))
    return results


def run_dac(spec: PromptSpec, target_label: int, classifier, denoiser,
            sched: NoiseSchedule, cfg: GuidanceConfig, seed: int,
            mix_p: float = 0.93, targeted: bool = True) -> AttackResult:
    """Single-seed white-box attack; see run_dac_suite."""
    return run_dac_suite(spec, target_label, classifier, denoiser, sched, cfg,
                         [seed], mix_p=mix_p, targeted=targeted)[0]
