"""Conditional noise-prediction network, its training loop, and DDIM sampling.

The network conditions on the noise level itself (log-SNR features) rather
than a raw step index, so one trained model serves any subsampled schedule.
Parameters are trained in float32 for CPU speed; callers feed float64
latents and get float64 predictions back (casts happen at the boundary and
are autograd-transparent).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint, schedule_from_payload, schedule_payload
from .images import ImageBatch
from .schedules import NoiseSchedule, ddim_step, predict_x0

COND_DIM = 16
_TIME_FREQS = tuple(0.05 * (2.0 ** k) for k in range(8))


def _time_features(abar: torch.Tensor) -> torch.Tensor:
    """Fourier features of log-SNR; abar is a per-sample tensor in (0, 1]."""
    logsnr = torch.log(abar.clamp(1e-8, 1.0 - 1e-8)) - torch.log1p(-abar.clamp(max=1.0 - 1e-8))
    feats = [f(freq * logsnr) for freq in _TIME_FREQS for f in (torch.sin, torch.cos)]
    return torch.stack(feats, dim=-1)


class DenoiserNet(nn.Module):
    """Small UNet predicting injected noise.

    Full-resolution stem and input shortcut keep the near-identity solution
    (needed at high noise levels) cheap to represent; class/time embeddings
    modulate the trunk via scale-and-shift.
    """

    def __init__(self, cond_dim: int = COND_DIM, ch: int = 48, emb_dim: int = 64):
        super().__init__()
        self.cond_dim = cond_dim
        self.emb = nn.Sequential(
            nn.Linear(len(_TIME_FREQS) * 2 + cond_dim, emb_dim), nn.SiLU(),
            nn.Linear(emb_dim, emb_dim), nn.SiLU(),
        )
        self.film_mid = nn.Linear(emb_dim, 2 * ch)
        self.film_up = nn.Linear(emb_dim, 2 * (ch // 2))
        self.stem = nn.Conv2d(3, 16, 3, padding=1)
        self.down1 = nn.Conv2d(16, ch // 2, 3, stride=2, padding=1)
        self.enc16 = nn.Conv2d(ch // 2, ch // 2, 3, padding=1)
        self.down2 = nn.Conv2d(ch // 2, ch, 3, stride=2, padding=1)
        self.mid1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.mid2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm_mid = nn.GroupNorm(4, ch)
        self.up1 = nn.Conv2d(ch, (ch // 2) * 4, 1)
        self.dec16 = nn.Conv2d(ch // 2, ch // 2, 3, padding=1)
        self.up2 = nn.Conv2d(ch // 2, 16 * 4, 1)
        self.dec32 = nn.Conv2d(16, 16, 3, padding=1)
        self.head = nn.Conv2d(16, 3, 3, padding=1)
        self.shortcut = nn.Conv2d(3, 3, 1)

    def forward(self, z: torch.Tensor, abar: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        e = self.emb(torch.cat([_time_features(abar), cond], dim=-1))
        h32 = F.silu(self.stem(z))
        h16 = F.silu(self.down1(h32))
        h16 = F.silu(self.enc16(h16))
        h = F.silu(self.down2(h16))
        scale, shift = self.film_mid(e)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = F.silu(self.norm_mid(self.mid1(h)))
        h = F.silu(self.mid2(h))
        h = F.pixel_shuffle(self.up1(h), 2) + h16
        scale, shift = self.film_up(e)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = F.silu(self.dec16(h))
        h = F.pixel_shuffle(self.up2(h), 2) + h32
        h = F.silu(self.dec32(h))
        return self.head(h) + self.shortcut(z)


class Denoiser:
    """Trained noise predictor plus its class-embedding table.

    predict() is deterministic given (z, t, cond, parameters) and keeps the
    output in the caller's dtype.
    """

    def __init__(self, net: DenoiserNet, cond_table: torch.Tensor,
                 train_sched: NoiseSchedule):
        self.net = net
        self.cond_table = cond_table
        self.train_sched = train_sched
        self.net.eval()

    @property
    def num_classes(self) -> int:
        return self.cond_table.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.cond_table.shape[1]

    def predict(self, z: torch.Tensor, t: int, sched: NoiseSchedule,
                cond: torch.Tensor) -> torch.Tensor:
        """Predicted noise for latents at step t of the given schedule."""
        if z.ndim != 4:
            raise ValueError("latents must be [N, C, H, W]")
        net_dtype = next(self.net.parameters()).dtype
        abar = torch.full((z.shape[0],), sched.alpha_bar(t), dtype=net_dtype)
        if cond.ndim == 1:
            cond = cond[None].expand(z.shape[0], -1)
        out = self.net(z.to(net_dtype), abar, cond.to(net_dtype))
        return out.to(z.dtype)

    def bind(self, sched: NoiseSchedule, cond: torch.Tensor):
        """Curried eps_fn(z, t) for the coupling and attack loops."""
        return lambda z, t: self.predict(z, t, sched, cond)

    def as_double(self) -> "Denoiser":
        """Float64 copy, for finite-difference verification."""
        import copy

        net = copy.deepcopy(self.net).double()
        return Denoiser(net, self.cond_table.double(), self.train_sched)

    def state_dict(self) -> dict:
        state = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        state["cond_table"] = self.cond_table
        return state


def train_denoiser(data: ImageBatch, sched: NoiseSchedule, num_classes: int,
                   epochs: int, seed: int, batch_size: int = 256,
                   lr: float = 2e-3, cond_dim: int = COND_DIM) -> Denoiser:
    """Train the conditional denoiser on labeled images.

    Minimizes MSE between injected and predicted noise; all randomness
    (init, shuffling, step/noise draws) derives from the seed.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.labels is None:
        raise ValueError("denoiser training needs labeled data")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if int(data.labels.max()) >= num_classes:
        raise ValueError("labels exceed num_classes")

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = DenoiserNet(cond_dim=cond_dim)
        table = nn.Embedding(num_classes, cond_dim)
        gen = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(list(net.parameters()) + list(table.parameters()), lr=lr)

        x_all = data.values.to(torch.float32)
        y_all = data.labels
        T = sched.num_steps
        bars = torch.from_numpy(np.asarray(sched.alpha_bars)).to(torch.float32)

        net.train()
        for _ in range(max(0, epochs)):
            perm = torch.randperm(len(x_all), generator=gen)
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                x0 = x_all[idx]
                t = torch.randint(1, T + 1, (len(idx),), generator=gen)
                abar = bars[t - 1]
                eps = torch.randn(x0.shape, generator=gen)
                sqrt_ab = abar.sqrt()[:, None, None, None]
                sqrt_1mab = (1.0 - abar).sqrt()[:, None, None, None]
                z = sqrt_ab * x0 + sqrt_1mab * eps
                pred = net(z, abar, table(y_all[idx]))
                loss = F.mse_loss(pred, eps)
                opt.zero_grad()
                loss.backward()
                opt.step()
        net.eval()

    return Denoiser(net, table.weight.detach().clone(), sched)


def sample(denoiser: Denoiser, sched: NoiseSchedule, cond: torch.Tensor,
           seed: int, n: int = 1, clip_preview: bool = True) -> ImageBatch:
    """Deterministic DDIM draw: pure noise at step T down to a clean image.

    clip_preview applies the standard clean-prediction clamp to [-1, 1]
    each step (re-expressed through the noise estimate, so the update stays
    the plain deterministic step); without it, early-step prediction error
    gets amplified by 1/sqrt(alpha_bar) and the chain can blow up.
    """
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n, 3, 32, 32), generator=gen, dtype=torch.float64)
    if cond.ndim == 1:
        cond = cond[None].expand(n, -1)
    with torch.no_grad():
        for t in range(sched.num_steps, 0, -1):
            eps = denoiser.predict(z, t, sched, cond)
            if clip_preview:
                abar = sched.alpha_bar(t)
                x0 = predict_x0(z, eps, t, sched).clamp(-1.0, 1.0)
                eps = (z - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)
            z = ddim_step(z, eps, t, sched)
    return ImageBatch(z.clamp(-1.0, 1.0))


def save_denoiser(denoiser: Denoiser, path: str | Path) -> str:
    meta = {
        "schedule": schedule_payload(denoiser.train_sched),
        "num_classes": denoiser.num_classes,
        "cond_dim": denoiser.cond_dim,
    }
    return save_checkpoint(path, "denoiser", denoiser.state_dict(), meta)


def load_denoiser(path: str | Path) -> Denoiser:
    payload = load_checkpoint(path, expect_kind="denoiser")
    meta = payload["meta"]
    net = DenoiserNet(cond_dim=meta["cond_dim"])
    state = payload["state"]
    net.load_state_dict({k[len("net."):]: v for k, v in state.items() if k.startswith("net.")})
    net.eval()
    sched = schedule_from_payload(meta["schedule"])
    return Denoiser(net, state["cond_table"], sched)
