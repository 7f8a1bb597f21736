"""Per-run records and run manifests.

Each attack run leaves a versioned JSON record plus its PNG; a directory of
records is the unit the evaluation layer consumes. The manifest captures
everything needed to re-run a command bit-identically (live LLM calls
excepted; those replay from the transcript).
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dac import AttackResult
from .images import load_png, save_png, ImageBatch

RECORD_VERSION = 1
MANIFEST_VERSION = 1


def write_run_record(result: AttackResult, out_dir: str | Path, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png = f"{name}.png"
    save_png(result.final_image.values, out / png)
    record = {
        "record_version": RECORD_VERSION,
        "seed": result.seed,
        "success": result.success,
        "steps_used": result.steps_used,
        "predicted_label": result.predicted_label,
        "target_label": result.target_label,
        "per_step_loss": [float(v) for v in result.per_step_loss],
        "config": result.config,
        "image": png,
    }
    path = out / f"{name}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def read_run_record(path: str | Path) -> AttackResult:
    path = Path(path)
    record = json.loads(path.read_text())
    if record.get("record_version") != RECORD_VERSION:
        raise ValueError(f"unsupported record version in {path}")
    image = ImageBatch(load_png(path.parent / record["image"]))
    return AttackResult(
        final_image=image,
        success=record["success"],
        steps_used=record["steps_used"],
        per_step_loss=np.asarray(record["per_step_loss"], dtype=np.float64),
        predicted_label=record["predicted_label"],
        target_label=record["target_label"],
        seed=record["seed"],
        config=record["config"],
    )


def load_run_dir(run_dir: str | Path) -> list[AttackResult]:
    run_dir = Path(run_dir)
    paths = sorted(p for p in run_dir.glob("run_*.json"))
    if not paths:
        raise FileNotFoundError(f"no run records under {run_dir}")
    return [read_run_record(p) for p in paths]


def write_manifest(out_dir: str | Path, command: str, config: dict,
                   checksums: dict | None = None, events: list[str] = (),
                   records: list[str] = (), wall_clock_s: float | None = None,
                   transcript: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "version": __version__,
        "command": command,
        "config": config,
        "checksums": checksums or {},
        "events": list(events),
        "records": list(records),
        "transcript": transcript,
        "wall_clock_s": wall_clock_s,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(out_dir: str | Path) -> dict:
    return json.loads((Path(out_dir) / "manifest.json").read_text())
