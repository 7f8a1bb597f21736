"""Command-line entry points.

Commands: train-denoiser | train-zoo | attack | evaluate | ablate | report.
Every command validates the full config before loading anything heavy,
writes a manifest next to its artifacts, and uses only seeded randomness.
Exit codes: 0 success, 2 configuration error, 3 diverged run.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys
import time
from dataclasses import fields
from pathlib import Path

import yaml

from .bpdac import run_bpdac_suite
from .config import ConfigError, RunConfig, load_config
from .dac import DivergedRunError, run_dac_suite
from .denoiser import load_denoiser, save_denoiser, train_denoiser
from .evaluation import (asr, asr_under_defense, avg_attack_steps,
                         mean_semantic_score, MetricsReport)
from .guidance import GuidanceConfig
from .prompts import (CachedLlmClient, SubprocessLlmClient, TranscriptCache,
                      build_prompt_spec)
from .records import load_run_dir, write_manifest, write_run_record
from .reporting import SweepSeries, emit_report, parse_report
from .schedules import make_schedule, subsample_schedule
from .scorer import load_scorer, save_scorer, train_scorer
from .shapes import CLASS_NAMES, NUM_CLASSES, class_name, make_shapes
from .zoo import ARCHITECTURES, ZooRegistry, train_classifier


def _train_sched(cfg: RunConfig):
    return make_schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end,
                         cfg.schedule_kind)


def _attack_sched(cfg: RunConfig):
    chain = max(1, min(cfg.max_steps, cfg.train_steps))
    return subsample_schedule(_train_sched(cfg), chain)


def _llm_client(cfg: RunConfig) -> CachedLlmClient:
    cache = TranscriptCache(cfg.transcript_path)
    mode = os.environ.get("DACGEN_LLM", "cache")
    if mode == "live":
        command = os.environ.get("DACGEN_LLM_CMD", "")
        if not command:
            raise ConfigError(["DACGEN_LLM=live needs DACGEN_LLM_CMD"])
        return CachedLlmClient(cache, SubprocessLlmClient(shlex.split(command)))
    if mode != "cache":
        raise ConfigError([f"DACGEN_LLM must be 'cache' or 'live', got {mode!r}"])
    return CachedLlmClient(cache)


def _guidance(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(eta_x=cfg.eta_x, eta_y=cfg.eta_y, alpha=cfg.alpha,
                          grad_scale=cfg.grad_scale, max_steps=cfg.max_steps)


def cmd_train_denoiser(cfg: RunConfig) -> int:
    t0 = time.time()
    data = make_shapes(cfg.train_per_class, cfg.dataset_seed, "train")
    sched = _train_sched(cfg)
    denoiser = train_denoiser(data, sched, NUM_CLASSES, cfg.denoiser_epochs,
                              cfg.seed, batch_size=cfg.batch_size)
    checksum = save_denoiser(denoiser, cfg.denoiser_path)
    write_manifest(Path(cfg.denoiser_path).parent, "train-denoiser",
                   cfg.to_dict(), {"denoiser": checksum},
                   wall_clock_s=time.time() - t0)
    print(f"denoiser trained ({cfg.denoiser_epochs} epochs) -> {cfg.denoiser_path}")
    return 0


def cmd_train_zoo(cfg: RunConfig) -> int:
    t0 = time.time()
    train = make_shapes(cfg.train_per_class, cfg.dataset_seed, "train")
    test = make_shapes(cfg.test_per_class, cfg.dataset_seed, "test")
    registry = ZooRegistry(cfg.zoo_dir)
    checksums = {}
    for offset, name in enumerate(sorted(ARCHITECTURES)):
        entry = train_classifier(name, train, cfg.zoo_epochs, cfg.seed + offset,
                                 test_data=test, batch_size=cfg.batch_size)
        registry.register(entry)
        checksums[name] = entry.checksum
        print(f"{name}: test accuracy {entry.test_accuracy:.3f}")
    scorer = train_scorer(train, list(CLASS_NAMES), cfg.scorer_epochs, cfg.seed)
    checksums["scorer"] = save_scorer(scorer, cfg.scorer_path)
    write_manifest(cfg.zoo_dir, "train-zoo", cfg.to_dict(), checksums,
                   wall_clock_s=time.time() - t0)
    print(f"zoo + scorer ready under {cfg.zoo_dir}")
    return 0


def _attack_results(cfg: RunConfig, events: list[str]):
    denoiser = load_denoiser(cfg.denoiser_path)
    registry = ZooRegistry(cfg.zoo_dir)
    sched = _attack_sched(cfg)
    guidance = _guidance(cfg)
    client = _llm_client(cfg)
    seeds = [cfg.seed + i for i in range(cfg.num_seeds)]

    if cfg.mode == "bpdac":
        label = cfg.origin_label
        spec = build_prompt_spec(label, class_name(label), denoiser.cond_table,
                                 client, events)
        ensemble, held_out = registry.split(cfg.surrogate_names(), cfg.held_out)
        scorer = load_scorer(cfg.scorer_path) if cfg.semantic_init_steps > 0 else None
        results = run_bpdac_suite(
            spec, label, ensemble, held_out, guidance, seeds, denoiser=denoiser,
            sched=sched, mix_p=cfg.mix_p, scorer=scorer,
            init_steps=cfg.semantic_init_steps, init_scale=cfg.init_scale)
    else:
        targeted = cfg.mode == "dac_targeted"
        label = cfg.target_label if targeted else cfg.origin_label
        spec = build_prompt_spec(label, class_name(label), denoiser.cond_table,
                                 client, events)
        classifier = registry.load(cfg.target_model).classifier
        results = run_dac_suite(spec, label, classifier, denoiser, sched,
                                guidance, seeds, mix_p=cfg.mix_p,
                                targeted=targeted)
    return results


def cmd_attack(cfg: RunConfig) -> int:
    t0 = time.time()
    events: list[str] = []
    results = _attack_results(cfg, events)
    record_names = []
    for r in results:
        name = f"run_{r.seed:05d}"
        write_run_record(r, cfg.out_dir, name)
        record_names.append(name)
    write_manifest(cfg.out_dir, "attack", cfg.to_dict(), events=events,
                   records=record_names, wall_clock_s=time.time() - t0,
                   transcript=cfg.transcript_path)
    print(f"{cfg.mode}: ASR {asr(results):.1f}% over {len(results)} seeds "
          f"-> {cfg.out_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    t0 = time.time()
    results = load_run_dir(cfg.out_dir)
    registry = ZooRegistry(cfg.zoo_dir)

    by_model: dict[str, list] = {}
    for r in results:
        model = r.config.get("held_out") or r.config.get("classifier", "unknown")
        by_model.setdefault(model, []).append(r)
    per_model = {m: asr(rs) for m, rs in by_model.items()}

    try:
        score = mean_semantic_score(results, load_scorer(cfg.scorer_path))
    except FileNotFoundError:
        score = None

    defense_table = {}
    defenses = {
        "resize_pad": {"min_scale": cfg.defense_min_scale},
        "noise_smooth": {"sigma": cfg.defense_sigma, "n": cfg.defense_n},
    }
    for kind, params in defenses.items():
        hits = 0.0
        for model, rs in by_model.items():
            classifier = registry.load(model).classifier
            hits += asr_under_defense(rs, classifier, kind, params,
                                      seed=cfg.seed) * len(rs)
        defense_table[kind] = hits / len(results)

    report = MetricsReport(
        asr_percent=asr(results),
        avg_steps=avg_attack_steps(results) if any(r.success for r in results) else None,
        mean_semantic_score=score,
        per_model_table=per_model,
        defense_table=defense_table,
        run_count=len(results),
    )
    written = emit_report(report, Path(cfg.out_dir) / "report")
    write_manifest(Path(cfg.out_dir) / "report", "evaluate", cfg.to_dict(),
                   records=[p.name for p in written],
                   wall_clock_s=time.time() - t0)
    print(f"evaluated {len(results)} runs: ASR {report.asr_percent:.1f}% "
          f"-> {Path(cfg.out_dir) / 'report'}")
    return 0


def _sweep_cell(cfg: RunConfig, eta: float, grad_scale: float, scorer) -> dict:
    cell_cfg = RunConfig(**{**cfg.to_dict(), "eta_x": eta, "eta_y": eta,
                            "grad_scale": grad_scale,
                            "num_seeds": cfg.ablate_seeds})
    results = _attack_results(cell_cfg, [])
    successes = [r for r in results if r.success]
    return {
        "eta": eta,
        "grad_scale": grad_scale,
        "asr_percent": asr(results),
        "avg_steps": avg_attack_steps(results) if successes else None,
        "semantic_score": mean_semantic_score(results, scorer),
    }


def cmd_ablate(cfg: RunConfig) -> int:
    import json

    t0 = time.time()
    scorer = load_scorer(cfg.scorer_path)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for eta in cfg.eta_sweep():
        for grad_scale in cfg.grad_scale_sweep():
            cell = _sweep_cell(cfg, eta, grad_scale, scorer)
            cells.append(cell)
            name = f"cell_eta{eta:g}_gs{grad_scale:g}.json"
            (out / name).write_text(json.dumps(cell, indent=2, sort_keys=True) + "\n")
            print(f"eta={eta:g} grad_scale={grad_scale:g}: "
                  f"ASR {cell['asr_percent']:.1f}%, steps {cell['avg_steps']}, "
                  f"score {cell['semantic_score']:.1f}")

    def slice_series(name, param, fixed_key, fixed_value):
        rows = sorted((c for c in cells if c[fixed_key] == fixed_value),
                      key=lambda c: c[param])
        return SweepSeries(
            name=name, param_name=param,
            values=[c[param] for c in rows],
            asr=[c["asr_percent"] for c in rows],
            avg_steps=[c["avg_steps"] for c in rows],
            score=[c["semantic_score"] for c in rows],
        )

    sweeps = [
        slice_series("eta", "eta", "grad_scale", cfg.grad_scale),
        slice_series("grad_scale", "grad_scale", "eta", cfg.eta_x),
    ]
    (out / "sweeps.json").write_text(json.dumps(
        {"cells": cells,
         "slices": [{k: getattr(s, k) for k in
                     ("name", "param_name", "values", "asr", "avg_steps", "score")}
                    for s in sweeps]},
        indent=2, sort_keys=True) + "\n")

    best = max(cells, key=lambda c: (c["asr_percent"], c["semantic_score"]))
    report = MetricsReport(
        asr_percent=best["asr_percent"], avg_steps=best["avg_steps"],
        mean_semantic_score=best["semantic_score"], run_count=cfg.ablate_seeds,
    )
    written = emit_report(report, out, sweeps=sweeps)
    write_manifest(out, "ablate", cfg.to_dict(),
                   records=[p.name for p in written] + ["sweeps.json"],
                   wall_clock_s=time.time() - t0)
    print(f"ablation grid ({len(cells)} cells) -> {out}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    import json

    out = Path(cfg.out_dir)
    summary = out / "summary.json"
    if not summary.exists():
        candidate = out / "report" / "summary.json"
        if candidate.exists():
            summary = candidate
            out = candidate.parent
    if not summary.exists():
        raise ConfigError([f"no summary.json under {cfg.out_dir}; run evaluate or ablate first"])
    report = parse_report(summary)
    sweeps = []
    sweeps_file = out / "sweeps.json"
    if sweeps_file.exists():
        payload = json.loads(sweeps_file.read_text())
        sweeps = [SweepSeries(**row) for row in payload.get("slices", [])]
    written = emit_report(report, out, sweeps=sweeps)
    print("report files: " + ", ".join(p.name for p in written))
    return 0


COMMANDS = {
    "train-denoiser": cmd_train_denoiser,
    "train-zoo": cmd_train_zoo,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dacgen",
        description="Source-free adversarial CAPTCHA generation and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="YAML config file")
        for f in fields(RunConfig):
            cmd.add_argument(f"--{f.name}", default=None, metavar="VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for f in fields(RunConfig):
            raw = getattr(args, f.name)
            if raw is not None:
                overrides[f.name] = yaml.safe_load(raw)
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except DivergedRunError as exc:
        print(exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
