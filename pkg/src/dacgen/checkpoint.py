"""Self-describing binary checkpoint container shared by all trained models.

Every file carries a format version, a kind tag, the full noise schedule it
was trained against (when applicable), and a checksum of its parameters.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def params_checksum(state_dict: dict) -> str:
    """SHA-256 over parameter bytes in sorted key order."""
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        digest.update(key.encode())
        digest.update(state_dict[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def schedule_payload(sched) -> dict:
    return {
        "betas": np.asarray(sched.betas),
        "alphas": np.asarray(sched.alphas),
        "alpha_bars": np.asarray(sched.alpha_bars),
    }


def schedule_from_payload(payload: dict):
    from .schedules import NoiseSchedule

    sched = NoiseSchedule(
        betas=payload["betas"], alphas=payload["alphas"],
        alpha_bars=payload["alpha_bars"],
    )
    sched.validate()
    return sched


def save_checkpoint(path: str | Path, kind: str, state_dict: dict,
                    meta: dict | None = None) -> str:
    """Write a checkpoint; returns the parameter checksum."""
    checksum = params_checksum(state_dict)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "state": state_dict,
        "checksum": checksum,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))
    return checksum


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ValueError(
            f"checkpoint {path} holds {payload.get('kind')!r}, expected {expect_kind!r}"
        )
    if params_checksum(payload["state"]) != payload["checksum"]:
        raise ValueError(f"checksum mismatch in {path}: file corrupted")
    return payload
