"""Procedurally generated shapes corpus: 8 classes, 32x32, seed-deterministic.

Classes are shape x color-family: {circle, square, triangle, cross} drawn in
a warm ("red") or cool ("blue") palette on a dark textured background.
Labels are exact by construction; no files are downloaded.
"""

from __future__ import annotations

import colorsys

import numpy as np
import torch

from .images import ImageBatch

RES = 32
SHAPES = ("circle", "square", "triangle", "cross")
FAMILIES = ("red", "blue")
CLASS_NAMES = tuple(f"{fam} {shape}" for fam in FAMILIES for shape in SHAPES)
NUM_CLASSES = len(CLASS_NAMES)

_SPLIT_IDS = {"train": 0, "test": 1}


def class_name(label_id: int) -> str:
    if not 0 <= label_id < NUM_CLASSES:
        raise ValueError(f"label id {label_id} outside [0, {NUM_CLASSES})")
    return CLASS_NAMES[label_id]


def label_for_name(name: str) -> int:
    try:
        return CLASS_NAMES.index(name.strip().lower())
    except ValueError:
        raise ValueError(f"unknown class name {name!r}; known: {', '.join(CLASS_NAMES)}")


def _shape_sdf(shape: str, dx: np.ndarray, dy: np.ndarray, size: float,
               rot: float) -> np.ndarray:
    c, s = np.cos(rot), np.sin(rot)
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    if shape == "circle":
        return np.hypot(dx, dy) - size
    if shape == "square":
        half = 0.82 * size
        return np.maximum(np.abs(rx), np.abs(ry)) - half
    if shape == "triangle":
        # Equilateral: intersection of three half-planes at the inradius.
        r_in = 0.55 * size
        sdf = np.full_like(dx, -np.inf)
        for k in range(3):
            ang = rot + np.pi / 2 + 2.0 * np.pi * k / 3.0
            sdf = np.maximum(sdf, dx * np.cos(ang) + dy * np.sin(ang) - r_in)
        return sdf
    if shape == "cross":
        w = 0.34 * size
        bar1 = np.maximum(np.abs(rx) - size, np.abs(ry) - w)
        bar2 = np.maximum(np.abs(ry) - size, np.abs(rx) - w)
        return np.minimum(bar1, bar2)
    raise ValueError(f"unknown shape {shape!r}")


def _render(label_id: int, rng: np.random.Generator) -> np.ndarray:
    family = FAMILIES[label_id // len(SHAPES)]
    shape = SHAPES[label_id % len(SHAPES)]

    cx = 15.5 + rng.uniform(-2.5, 2.5)
    cy = 15.5 + rng.uniform(-2.5, 2.5)
    size = rng.uniform(8.0, 11.5)
    # mild rotation jitter only: free rotation makes the classes too hard
    # for desk-scale nets and smears the class modes the denoiser must learn
    tilt = np.pi / 12.0
    rot = 0.0 if shape == "circle" else rng.uniform(-tilt, tilt)

    if family == "red":
        hue = rng.uniform(-0.04, 0.10) % 1.0
    else:
        hue = rng.uniform(0.52, 0.68)
    sat = rng.uniform(0.7, 1.0)
    val = rng.uniform(0.75, 1.0)
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 2.0 - 1.0

    yy, xx = np.mgrid[0:RES, 0:RES].astype(np.float64)
    sdf = _shape_sdf(shape, xx - cx, yy - cy, size, rot)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)

    bg = rng.uniform(-0.75, -0.45) + rng.uniform(-0.06, 0.06, size=3)
    img = bg[:, None, None] + rng.normal(0.0, 0.05, size=(3, RES, RES))
    img = img * (1.0 - alpha) + fg[:, None, None] * alpha
    return np.clip(img, -1.0, 1.0)


def make_shapes(per_class: int, seed: int, split: str = "train") -> ImageBatch:
    """Render per_class images for each of the 8 classes.

    Deterministic in (per_class, seed, split); train and test splits draw
    from disjoint random streams.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if split not in _SPLIT_IDS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_IDS)}")
    images = np.empty((NUM_CLASSES * per_class, 3, RES, RES), dtype=np.float64)
    labels = np.empty(NUM_CLASSES * per_class, dtype=np.int64)
    row = 0
    for label_id in range(NUM_CLASSES):
        seeds = np.random.SeedSequence(
            entropy=seed, spawn_key=(_SPLIT_IDS[split], label_id)
        ).generate_state(per_class)
        for k in range(per_class):
            images[row] = _render(label_id, np.random.default_rng(seeds[k]))
            labels[row] = label_id
            row += 1
    return ImageBatch(torch.from_numpy(images), torch.from_numpy(labels))
