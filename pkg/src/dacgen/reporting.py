"""Report emission: structured summary, comma-separated tables, PNG plots.

Outputs are byte-stable for fixed inputs: JSON is sorted and fully precise,
figures carry fixed metadata and dpi.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import MetricsReport, TransferCell

_PNG_META = {"Software": "dacgen"}


@dataclass
class SweepSeries:
    """Measurements along one swept parameter, one row per value."""

    name: str
    param_name: str
    values: list[float]
    asr: list[float]
    avg_steps: list[float | None]
    score: list[float] = field(default_factory=list)

    def __post_init__(self):
        lens = {len(self.values), len(self.asr), len(self.avg_steps)}
        if self.score:
            lens.add(len(self.score))
        if len(lens) != 1:
            raise ValueError("sweep columns must have equal lengths")


def report_to_dict(report: MetricsReport) -> dict:
    payload = {
        "asr_percent": report.asr_percent,
        "avg_steps": report.avg_steps,
        "mean_semantic_score": report.mean_semantic_score,
        "per_model_table": dict(report.per_model_table),
        "run_count": report.run_count,
    }
    if report.defense_table:
        payload["defense_table"] = dict(report.defense_table)
    return payload


def report_from_dict(payload: dict) -> MetricsReport:
    return MetricsReport(
        asr_percent=payload["asr_percent"],
        avg_steps=payload["avg_steps"],
        mean_semantic_score=payload["mean_semantic_score"],
        per_model_table=dict(payload.get("per_model_table", {})),
        defense_table=dict(payload.get("defense_table", {})),
        run_count=payload["run_count"],
    )


def parse_report(path: str | Path) -> MetricsReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def _cell_text(value) -> str:
    if isinstance(value, TransferCell):
        text = f"{value.asr_percent:.1f}"
        return text + "*" if value.white_box else text
    return f"{float(value):.1f}"


def write_transfer_csv(table: dict, path: str | Path) -> Path:
    """Nested {source: {target: cell}} or flat {model: asr} to CSV.

    White-box cells carry a trailing '*'.
    """
    path = Path(path)
    lines = []
    if table and isinstance(next(iter(table.values())), dict):
        targets = sorted({t for row in table.values() for t in row})
        lines.append("source," + ",".join(targets))
        for source in sorted(table, key=str):
            name = "+".join(source) if isinstance(source, tuple) else str(source)
            cells = [_cell_text(table[source][t]) if t in table[source] else ""
                     for t in targets]
            lines.append(name + "," + ",".join(cells))
    else:
        lines.append("model,asr_percent")
        for model in sorted(table):
            lines.append(f"{model},{_cell_text(table[model])}")
    path.write_text("\n".join(lines) + "\n")
    return path


def plot_sweep(sweep: SweepSeries, path: str | Path) -> Path:
    """Three-panel line plot: ASR, average steps, semantic score vs parameter."""
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    panels = [
        ("ASR (%)", sweep.asr),
        ("average attack steps", sweep.avg_steps),
        ("semantic score", sweep.score if sweep.score else [None] * len(sweep.values)),
    ]
    for ax, (label, ys) in zip(axes, panels):
        xs = [x for x, y in zip(sweep.values, ys) if y is not None]
        kept = [y for y in ys if y is not None]
        ax.plot(xs, kept, marker="o", color="#1f5fa8")
        ax.set_xlabel(sweep.param_name)
        ax.set_ylabel(label)
        ax.set_xscale("log" if max(sweep.values) / min(sweep.values) > 20 else "linear")
        ax.grid(True, alpha=0.3)
    fig.suptitle(sweep.name)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def emit_report(report: MetricsReport, out_dir: str | Path,
                sweeps: list[SweepSeries] = (),
                transfer: dict | None = None) -> list[Path]:
    """Write summary.json, transfer.csv, and one sweep figure per series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    summary = out / "summary.json"
    summary.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    written.append(summary)

    table = transfer if transfer is not None else report.per_model_table
    if table:
        written.append(write_transfer_csv(table, out / "transfer.csv"))

    for sweep in sweeps:
        written.append(plot_sweep(sweep, out / f"sweep_{sweep.name}.png"))
    return written
