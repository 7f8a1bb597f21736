"""Image batch container and 8-bit PNG import/export.

Pixel convention everywhere: float tensors [N, C, H, W] in [-1, 1].
PNG export uses the affine map [-1, 1] -> [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


@dataclass
class ImageBatch:
    values: torch.Tensor
    labels: torch.Tensor | None = None

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"values must be [N, C, H, W], got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("image values must be finite")
        if self.labels is not None:
            if self.labels.ndim != 1 or len(self.labels) != len(self.values):
                raise ValueError("labels must be a 1-d array matching the batch size")
            if (self.labels < 0).any():
                raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, indices) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[indices]
        return ImageBatch(self.values[indices], labels)


def to_uint8(values: torch.Tensor) -> np.ndarray:
    """[-1, 1] float [N, C, H, W] -> uint8 [N, H, W, C]."""
    arr = values.detach().cpu().numpy()
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(0, 2, 3, 1)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """uint8 [N, H, W, C] -> [-1, 1] float64 [N, C, H, W]."""
    values = arr.astype(np.float64).transpose(0, 3, 1, 2) / 127.5 - 1.0
    return torch.from_numpy(values)

def save_png(values: torch.Tensor, path: str | Path) -> None:
    """Write the first image of the batch (or a lone [C, H, W] image) as PNG."""
    if values.ndim == 3:
        values = values[None]
    Image.fromarray(to_uint8(values)[0]).save(str(path), format="PNG")


def load_png(path: str | Path) -> torch.Tensor:
    """Read a PNG back to a [1, C, H, W] float64 tensor in [-1, 1]."""
    arr = np.asarray(Image.open(str(path)).convert("RGB"))
    return from_uint8(arr[None])
