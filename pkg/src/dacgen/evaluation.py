"""Attack metrics, transfer matrices, and defense-robustness evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .dac import AttackResult
from .images import ImageBatch


@dataclass
class MetricsReport:
    asr_percent: float
    avg_steps: float | None
    mean_semantic_score: float | None
    per_model_table: dict = field(default_factory=dict)
    defense_table: dict = field(default_factory=dict)
    run_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.asr_percent <= 100.0:
            raise ValueError("asr_percent must lie in [0, 100]")
        if self.run_count < 1:
            raise ValueError("run_count must be >= 1")


def asr(results: list[AttackResult]) -> float:
    """Attack success rate in percent."""
    if not results:
        raise ValueError("no results to evaluate")
    return 100.0 * sum(r.success for r in results) / len(results)


def avg_attack_steps(results: list[AttackResult]) -> float:
    """Mean steps over successful runs only; failures report through ASR."""
    used = [r.steps_used for r in results if r.success]
    if not used:
        raise ValueError("no successful runs to average")
    return sum(used) / len(used)


def semantic_score(image: ImageBatch | torch.Tensor, caption: str, scorer) -> float:
    """Clamped scaled cosine between the image and caption embeddings.

    Batches are scored per image and averaged.
    """
    values = image.values if isinstance(image, ImageBatch) else image
    if values.ndim == 3:
        values = values[None]
    with torch.no_grad():
        img_emb = scorer.embed_images(values.to(torch.float64))
    txt_emb = scorer.embed_text(caption)
    img_norm = img_emb.norm(dim=-1)
    if float(txt_emb.norm()) == 0.0 or bool((img_norm == 0).any()):
        raise ValueError("zero-norm embedding; cannot score")
    cos = F.cosine_similarity(img_emb, txt_emb[None], dim=-1)
    return float(torch.clamp(100.0 * cos, min=0.0).mean())


def mean_semantic_score(results: list[AttackResult], scorer) -> float:
    """Average semantic score of final images against their own prompts."""
    if not results:
        raise ValueError("no results to score")
    scores = [semantic_score(r.final_image, r.config["prompt"], scorer)
              for r in results]
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class TransferCell:
    asr_percent: float
    white_box: bool


def transfer_matrix(zoo, attack_runner, seeds: list[int],
                    sources: list[tuple[str, ...]] | None = None,
                    targets: list[str] | None = None) -> dict:
    """ASR table over (surrogate set, target model) pairs.

    attack_runner(source_names, target_name, seeds) -> list[AttackResult].
    Cells whose target sits inside the source set are flagged white-box.
    """
    names = zoo.names()
    if len(names) < 2:
        raise ValueError("transfer evaluation needs at least two models")
    if sources is None:
        sources = [(n,) for n in names]
    if targets is None:
        targets = list(names)
    table: dict = {}
    for source in sources:
        row = {}
        for target in targets:
            results = attack_runner(source, target, seeds)
            row[target] = TransferCell(asr_percent=asr(results),
                                       white_box=target in source)
        table[source] = row
    return table


def _resize_pad_one(img: torch.Tensor, new: int, ox: int, oy: int) -> torch.Tensor:
    shrunk = F.interpolate(img[None], size=(new, new), mode="bilinear",
                           align_corners=False)[0]
    out = torch.zeros_like(img)
    out[:, oy:oy + new, ox:ox + new] = shrunk
    return out


def apply_defense(image: ImageBatch, kind: str, params: dict | None = None,
                  seed: int = 0) -> ImageBatch:
    """Input-transformation defenses.

    resize_pad: random shrink to s in [min_scale, 1] then zero-pad back at a
    random offset. noise_smooth: emit n noisy copies per image (prediction
    averaging happens in defended_predict); sigma=0, n=1 is the identity.
    """
    params = dict(params or {})
    gen = torch.Generator().manual_seed(seed)
    values = image.values
    if kind == "resize_pad":
        min_scale = float(params.pop("min_scale", 0.85))
        if params:
            raise ValueError(f"unknown resize_pad params: {sorted(params)}")
        if not 0.0 < min_scale <= 1.0:
            raise ValueError("min_scale must lie in (0, 1]")
        h = values.shape[-1]
        out = []
        for i in range(len(values)):
            scale = min_scale + (1.0 - min_scale) * float(torch.rand((), generator=gen))
            new = max(1, round(scale * h))
            ox = int(torch.randint(0, h - new + 1, (), generator=gen))
            oy = int(torch.randint(0, h - new + 1, (), generator=gen))
            out.append(_resize_pad_one(values[i], new, ox, oy))
        return ImageBatch(torch.stack(out), image.labels)
    if kind == "noise_smooth":
        sigma = float(params.pop("sigma", 0.1))
        n = int(params.pop("n", 8))
        if params:
            raise ValueError(f"unknown noise_smooth params: {sorted(params)}")
        if sigma < 0 or n < 1:
            raise ValueError("need sigma >= 0 and n >= 1")
        if sigma == 0.0 and n == 1:
            return image
        copies = values.repeat_interleave(n, dim=0)
        noise = torch.randn(copies.shape, generator=gen, dtype=copies.dtype)
        return ImageBatch((copies + sigma * noise).clamp(-1.0, 1.0), None)
    raise ValueError(f"unknown defense kind {kind!r}")


def defended_predict(classifier, image: ImageBatch, kind: str,
                     params: dict | None = None, seed: int = 0) -> torch.Tensor:
    """Predicted labels after the defense; noise_smooth averages predictions."""
    transformed = apply_defense(image, kind, params, seed)
    with torch.no_grad():
        probs = classifier.probs(transformed.values)
    n_copies = len(transformed) // len(image)
    if n_copies > 1:
        probs = probs.reshape(len(image), n_copies, -1).mean(dim=1)
    return probs.argmax(dim=-1)


def asr_under_defense(results: list[AttackResult], classifier, kind: str,
                      params: dict | None = None, seed: int = 0) -> float:
    """Re-evaluate attack success on defended predictions."""
    if not results:
        raise ValueError("no results to evaluate")
    hits = 0
    for offset, r in enumerate(results):
        pred = int(defended_predict(classifier, r.final_image, kind, params,
                                    seed + offset)[0])
        if r.config.get("targeted", True):
            hits += pred == r.target_label
        else:
            hits += pred != r.target_label
    return 100.0 * hits / len(results)


def weighted_asr(batches: list[list[AttackResult]]) -> float:
    """ASR of a concatenation, as the run-weighted mean of per-batch ASRs."""
    flat = [r for batch in batches for r in batch]
    return asr(flat)
