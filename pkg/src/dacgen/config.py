"""Flat, human-diffable run configuration.

One YAML mapping of typed scalars; every key has a default, unknown keys
are rejected, and validation reports every violated constraint at once so
nothing heavy starts on a half-broken config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .shapes import NUM_CLASSES

MODES = ("dac_targeted", "dac_untargeted", "bpdac")
SCHEDULE_KINDS = ("linear", "cosine")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    # reproducibility and output
    seed: int = 0
    out_dir: str = "runs/latest"
    # dataset
    dataset_seed: int = 1234
    train_per_class: int = 2000
    test_per_class: int = 400
    # diffusion schedule
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    schedule_kind: str = "linear"
    sampling_steps: int = 50
    # guidance
    eta_x: float = 1.0
    eta_y: float = 1.0
    alpha: float = 0.5
    grad_scale: float = 3e-3
    max_steps: int = 200
    # coupled stepping
    mix_p: float = 0.93
    # attack
    mode: str = "dac_targeted"
    target_label: int = 0
    origin_label: int = 0
    target_model: str = "stride3x3"
    surrogates: str = "stride3x3,wide5x5,fullconv"
    held_out: str = "pixelmlp"
    semantic_init_steps: int = 10
    init_scale: float = 0.1
    num_seeds: int = 50
    # training
    denoiser_epochs: int = 30
    zoo_epochs: int = 10
    scorer_epochs: int = 8
    batch_size: int = 256
    # artifact locations
    denoiser_path: str = "checkpoints/denoiser.pt"
    zoo_dir: str = "checkpoints/zoo"
    scorer_path: str = "checkpoints/scorer.pt"
    transcript_path: str = "llm_transcript.jsonl"
    # ablation sweep
    ablate_etas: str = "0.1,0.5,1.0"
    ablate_grad_scales: str = "3e-4,1e-3,3e-3,1e-2"
    ablate_seeds: int = 30
    # defense stand-ins
    defense_sigma: float = 0.1
    defense_n: int = 8
    defense_min_scale: float = 0.85

    def surrogate_names(self) -> list[str]:
        return [s.strip() for s in self.surrogates.split(",") if s.strip()]

    def eta_sweep(self) -> list[float]:
        return [float(v) for v in self.ablate_etas.split(",") if v.strip()]

    def grad_scale_sweep(self) -> list[float]:
        return [float(v) for v in self.ablate_grad_scales.split(",") if v.strip()]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        p: list[str] = []
        if self.train_per_class < 1:
            p.append("train_per_class must be >= 1")
        if self.test_per_class < 1:
            p.append("test_per_class must be >= 1")
        if self.train_steps < 1:
            p.append("train_steps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            p.append("betas must satisfy 0 < beta_start <= beta_end < 1")
        if self.schedule_kind not in SCHEDULE_KINDS:
            p.append(f"schedule_kind must be one of {SCHEDULE_KINDS}")
        if not 1 <= self.sampling_steps <= self.train_steps:
            p.append("sampling_steps must lie in [1, train_steps]")
        if self.eta_x <= 0:
            p.append("eta_x must be > 0")
        if self.eta_y <= 0:
            p.append("eta_y must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            p.append("alpha must lie in [0, 1]")
        if self.grad_scale <= 0:
            p.append("grad_scale must be > 0")
        if self.max_steps < 0:
            p.append("max_steps must be >= 0")
        if not 0.0 < self.mix_p < 1.0:
            p.append("mix_p must lie strictly inside (0, 1)")
        if self.mode not in MODES:
            p.append(f"mode must be one of {MODES}")
        if not 0 <= self.target_label < NUM_CLASSES:
            p.append(f"target_label must lie in [0, {NUM_CLASSES})")
        if not 0 <= self.origin_label < NUM_CLASSES:
            p.append(f"origin_label must lie in [0, {NUM_CLASSES})")
        if self.mode == "bpdac":
            names = self.surrogate_names()
            if not names:
                p.append("bpdac mode needs at least one surrogate")
            if not self.held_out:
                p.append("bpdac mode needs a held_out model")
            elif self.held_out in names:
                p.append("held_out must not appear among the surrogates")
            if len(set(names)) != len(names):
                p.append("surrogate names must be unique")
        if self.semantic_init_steps < 0:
            p.append("semantic_init_steps must be >= 0")
        if self.init_scale <= 0:
            p.append("init_scale must be > 0")
        if self.num_seeds < 1:
            p.append("num_seeds must be >= 1")
        for name in ("denoiser_epochs", "zoo_epochs", "scorer_epochs"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be >= 0")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.ablate_seeds < 1:
            p.append("ablate_seeds must be >= 1")
        try:
            if any(v <= 0 for v in self.eta_sweep()):
                p.append("ablate_etas must all be > 0")
        except ValueError:
            p.append("ablate_etas must be a comma-separated list of numbers")
        try:
            if any(v <= 0 for v in self.grad_scale_sweep()):
                p.append("ablate_grad_scales must all be > 0")
        except ValueError:
            p.append("ablate_grad_scales must be a comma-separated list of numbers")
        if self.defense_sigma < 0:
            p.append("defense_sigma must be >= 0")
        if self.defense_n < 1:
            p.append("defense_n must be >= 1")
        if not 0.0 < self.defense_min_scale <= 1.0:
            p.append("defense_min_scale must lie in (0, 1]")
        if p:
            raise ConfigError(p)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "float"}
_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "int"}


def build_config(values: dict) -> RunConfig:
    """RunConfig from a key/value mapping, with full validation."""
    problems = [f"unknown key {k!r}" for k in values if k not in _FIELDS]
    coerced = {}
    for key, value in values.items():
        if key not in _FIELDS:
            continue
        if key in _FLOAT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{key} must be a number, got {value!r}")
                continue
            coerced[key] = float(value)
        elif key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                problems.append(f"{key} must be an integer, got {value!r}")
                continue
            coerced[key] = value
        else:
            if not isinstance(value, str):
                problems.append(f"{key} must be a string, got {value!r}")
                continue
            coerced[key] = value
    if problems:
        raise ConfigError(problems)
    config = RunConfig(**coerced)
    config.validate()
    return config


def parse_config(text: str) -> RunConfig:
    """Parse a flat YAML document into a validated RunConfig."""
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["config document must be a flat key/value mapping"])
    return build_config(data)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(["config document must be a flat key/value mapping"])
        data.update(loaded)
    if overrides:
        data.update(overrides)
    return build_config(data)
