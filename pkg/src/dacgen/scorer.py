"""Two-tower image/caption embedding model used for semantic scoring and
the similarity-guided warm start.

A small convolutional image tower and a bag-of-words text tower are trained
contrastively on (shape image, caption) pairs. The interface is just two
embed functions, so any differentiable scorer can stand in.
"""

from __future__ import annotations

import re
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .images import ImageBatch

EMBED_DIM = 32

CAPTION_PATTERNS = (
    "A photo of a {label}, centered, clearly visible",
    "a {label} on a dark background",
    "an image of a {label}",
    "one {label} in the middle of the frame",
    "{label}",
)


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class _ImageTower(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.c1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.fc = nn.Linear(64, dim)

    def forward(self, x):
        h = F.relu(self.c1(x))
        h = F.relu(self.c2(h))
        h = F.relu(self.c3(h))
        return self.fc(h.mean(dim=(2, 3)))


class SemanticScorer:
    """Embeds images and captions into one space; unnormalized outputs."""

    def __init__(self, image_net: _ImageTower, token_table: torch.Tensor,
                 text_proj: torch.Tensor, vocab: dict[str, int]):
        self.image_net = image_net
        self.token_table = token_table
        self.text_proj = text_proj
        self.vocab = vocab
        self.image_net.eval()

    def embed_images(self, values: torch.Tensor) -> torch.Tensor:
        """Differentiable [N, C, H, W] -> [N, D]; keeps the caller's dtype."""
        net_dtype = next(self.image_net.parameters()).dtype
        return self.image_net(values.to(net_dtype)).to(values.dtype)

    def embed_text(self, caption: str) -> torch.Tensor:
        """[D] float64 bag-of-words embedding; unknown tokens are dropped."""
        ids = [self.vocab[tok] for tok in tokenize(caption) if tok in self.vocab]
        if not ids:
            return torch.zeros(self.text_proj.shape[1], dtype=torch.float64)
        pooled = self.token_table[ids].mean(dim=0)
        return (pooled @ self.text_proj).to(torch.float64)

    def state_dict(self) -> dict:
        state = {f"image.{k}": v for k, v in self.image_net.state_dict().items()}
        state["token_table"] = self.token_table
        state["text_proj"] = self.text_proj
        return state


def captions_for(label_name: str) -> list[str]:
    return [pat.format(label=label_name.lower()) for pat in CAPTION_PATTERNS]


def train_scorer(data: ImageBatch, class_names: list[str], epochs: int,
                 seed: int, batch_size: int = 256, lr: float = 2e-3,
                 dim: int = EMBED_DIM) -> SemanticScorer:
    """Contrastive training against per-class caption variants."""
    if len(data) == 0 or data.labels is None:
        raise ValueError("scorer training needs labeled data")

    vocab: dict[str, int] = {}
    class_caption_tokens: list[list[list[int]]] = []
    for name in class_names:
        per_class = []
        for caption in captions_for(name):
            ids = []
            for tok in tokenize(caption):
                if tok not in vocab:
                    vocab[tok] = len(vocab)
                ids.append(vocab[tok])
            per_class.append(ids)
        class_caption_tokens.append(per_class)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        image_net = _ImageTower(dim)
        token_table = nn.Parameter(0.1 * torch.randn(len(vocab), dim))
        text_proj = nn.Parameter(torch.eye(dim) + 0.01 * torch.randn(dim, dim))
        logit_scale = nn.Parameter(torch.tensor(2.0))
        gen = torch.Generator().manual_seed(seed + 1)

        params = list(image_net.parameters()) + [token_table, text_proj, logit_scale]
        opt = torch.optim.Adam(params, lr=lr)
        x_all = data.values.to(torch.float32)
        y_all = data.labels

        def text_embed_batch(labels: torch.Tensor, variant: torch.Tensor) -> torch.Tensor:
            rows = []
            for lbl, var in zip(labels.tolist(), variant.tolist()):
                ids = class_caption_tokens[lbl][var]
                rows.append(token_table[ids].mean(dim=0))
            return torch.stack(rows) @ text_proj

        image_net.train()
        for _ in range(max(0, epochs)):
            perm = torch.randperm(len(x_all), generator=gen)
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                x = x_all[idx] + 0.05 * torch.randn(x_all[idx].shape, generator=gen)
                y = y_all[idx]
                variant = torch.randint(0, len(CAPTION_PATTERNS), (len(idx),), generator=gen)
                img = F.normalize(image_net(x), dim=-1)
                txt = F.normalize(text_embed_batch(y, variant), dim=-1)
                # one text row per class in the batch; contrast image against all classes
                logits = logit_scale.exp().clamp(max=100.0) * (img @ txt.T)
                match = (y[:, None] == y[None, :]).to(torch.float32)
                target = match / match.sum(dim=1, keepdim=True)
                loss = -(F.log_softmax(logits, dim=1) * target).sum(dim=1).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
        image_net.eval()

    return SemanticScorer(image_net, token_table.detach().clone(),
                          text_proj.detach().clone(), vocab)


def save_scorer(scorer: SemanticScorer, path: str | Path) -> str:
    return save_checkpoint(path, "scorer", scorer.state_dict(),
                           {"vocab": scorer.vocab})


def load_scorer(path: str | Path) -> SemanticScorer:
    payload = load_checkpoint(path, expect_kind="scorer")
    state = payload["state"]
    dim = state["text_proj"].shape[1]
    net = _ImageTower(dim)
    net.load_state_dict({k[len("image."):]: v for k, v in state.items()
                         if k.startswith("image.")})
    net.eval()
    return SemanticScorer(net, state["token_table"], state["text_proj"],
                          payload["meta"]["vocab"])
