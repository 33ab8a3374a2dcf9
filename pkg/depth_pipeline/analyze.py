"""Run every probe over (model, trajectory, turn) cells and write artifacts plus a manifest."""
from __future__ import annotations

import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List

import numpy as np
from tqdm import tqdm

from depth_pipeline.run_config import RunConfig, build_model, resolve_path
from utils.causal import PositionPolicy, baseline_trace, future_effect_map, logit_change_profile, resolve_pivot
from utils.comparison import compare_trajectory, summarize_turn
from utils.effective_depth import average_curves, effective_depth_report
from utils.logit_lens import lens_curves
from utils.model import Weights
from utils.probes import VARIANTS, classify_regime, cosine_profiles, count_phase_changes, regime_histogram
from utils.storage import (
    emit_ed_table,
    file_digest,
    write_cosine_profile,
    write_csv,
    write_future_effect,
    write_json,
    write_lens_curves,
    write_logit_change,
    write_report,
)
from utils.svg_charts import diverging_scale, emit_bar_svg, emit_heatmap_svg, sequential_scale
from utils.trajectory import (
    TokenizedTrajectory,
    Trajectory,
    load_trajectory,
    prefix_for_turn,
    save_trajectory,
    synthesize,
    tokenize,
)

logger = logging.getLogger(__name__)

ARTIFACT_KINDS = ("future_effect", "logit_change", "cosine", "lens", "effective_depth")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Cell:
    model: str
    trajectory: str
    domain: str
    turn: int

    @property
    def relative_dir(self) -> Path:
        return Path("cells") / self.model / self.trajectory / f"turn_{self.turn:02d}"


def load_trajectories(config: RunConfig, out_dir: Path) -> List[tuple[str, Trajectory]]:
    """Named trajectories in config order; synthesized ones are saved under out_dir/trajectories."""
    named: List[tuple[str, Trajectory]] = []
    seen: Dict[str, int] = {}

    def unique(name: str) -> str:
        seen[name] = seen.get(name, 0) + 1
        return name if seen[name] == 1 else f"{name}_{seen[name]}"

    for rel in config.trajectory_paths:
        path = resolve_path(config.base_dir, rel)
        named.append((unique(path.stem), load_trajectory(path)))
    for spec in config.synthesize:
        name = unique(spec.name)
        trajectory = synthesize(spec.domain, spec.n_turns, spec.seed)
        save_trajectory(trajectory, out_dir / "trajectories" / f"{name}.json")
        named.append((name, trajectory))
    return named


def _turns_for(config: RunConfig, tok: TokenizedTrajectory) -> tuple[int, ...]:
    if config.turns == "all":
        return tuple(range(1, tok.n_turns + 1))
    return tuple(config.turns)


def analyze_cell(
    weights: Weights,
    model_digest: str,
    cell: Cell,
    tok: TokenizedTrajectory,
    config: RunConfig,
    cell_dir: Path,
    kinds: Iterable[str] = ARTIFACT_KINDS,
    workers: int = 1,
) -> Dict[str, Any]:
    """All requested probes for one turn; returns the summary and the per-layer curves."""
    kinds = set(kinds)
    r = cell.turn
    tokens = prefix_for_turn(tok, r)
    baseline = baseline_trace(weights, tokens)
    probe_positions = PositionPolicy.parse(config.probe_policy).candidates(len(tokens), tok.turn_offsets)
    summary: Dict[str, Any] = {"n_tokens": len(tokens)}
    curves: Dict[str, Any] = {}
    title = f"{cell.model} / {cell.trajectory} / turn {r}"
    fe_map = None

    if "future_effect" in kinds:
        fe_map = future_effect_map(
            weights, tok, r, config.position_policy, baseline=baseline, workers=workers
        )
        write_future_effect(fe_map, cell_dir / "future_effect.csv", model_digest)
        emit_heatmap_svg(
            fe_map.values, sequential_scale(fe_map.values), cell_dir / "future_effect.svg",
            title=f"Future Effect E(s, l): {title}",
        )
        summary["defined_entries"] = fe_map.defined_count()

    if "logit_change" in kinds and resolve_pivot(tok, r, config.pivot) >= len(tokens) - 1:
        logger.warning("%s: pivot leaves no later tokens, logit change skipped", title)
        summary["logit_change_skipped"] = "pivot leaves no later tokens"
    elif "logit_change" in kinds:
        profile = logit_change_profile(
            weights, tok, r, config.pivot, metric=config.logit_change_metric, baseline=baseline, workers=workers
        )
        write_logit_change(profile, cell_dir / "logit_change.csv", model_digest)
        emit_bar_svg(profile.values, cell_dir / "logit_change.svg", title=f"Logit change (pivot {profile.pivot}): {title}")
        summary["pivot"] = profile.pivot
        summary["max_logit_change"] = max(profile.values)

    profiles = None
    if kinds & {"cosine", "effective_depth"}:
        profiles = cosine_profiles(baseline, probe_positions, turn=r, aggregate=config.aggregate)
        curves["cosine"] = profiles["block"].aggregate
    if "cosine" in kinds:
        rows = []
        for i, l in enumerate(profiles["block"].layers):
            block = float(profiles["block"].aggregate[i])
            rows.append([l] + [float(profiles[v].aggregate[i]) for v in VARIANTS] + [classify_regime(block, config.tau)])
        write_csv(cell_dir / "cosine_aggregate.csv", ["layer", *VARIANTS, "regime"], rows)
        for variant, cosine in profiles.items():
            write_cosine_profile(cosine, cell_dir / f"cosine_{variant}.csv")
            matrix = np.where(cosine.degenerate, np.nan, cosine.values)
            emit_heatmap_svg(
                matrix, diverging_scale(), cell_dir / f"cosine_{variant}.svg",
                title=f"Residual cosine ({variant}): {title}",
                row_label="l (layer)", col_label="t (position)",
                row_ticks=cosine.layers, col_ticks=cosine.positions,
            )
        summary["regimes"] = {v: regime_histogram(profiles[v].aggregate, config.tau) for v in VARIANTS}
        summary["phase_changes"] = {v: count_phase_changes(profiles[v].aggregate, config.tau) for v in VARIANTS}

    if kinds & {"lens", "effective_depth"}:
        lens = lens_curves(
            baseline, probe_positions, weights["final_norm"], weights["unembed"],
            top_k=config.overlap_top_k, direction=config.kl_direction, aggregate=config.aggregate,
        )
        curves["kl"], curves["overlap"] = lens.kl, lens.overlap
        if "lens" in kinds:
            write_lens_curves(lens, cell_dir / "lens_curves.csv")

    if "effective_depth" in kinds:
        report = effective_depth_report(
            cell.model, cell.domain, curves["cosine"], curves["kl"], curves["overlap"],
            convention=config.ratio_convention, kl_fraction=config.kl_fraction,
            overlap_threshold=config.overlap_threshold,
        )
        write_report(report, cell_dir / "effective_depth.json")
        summary["effective_depth"] = dict(report.ed)

    if fe_map is not None and profiles is not None:
        turn_summary = summarize_turn(fe_map, profiles, tau=config.tau, strong=config.strong_effect)
        summary["mean_effect"] = turn_summary.mean_effect
        summary["strong_count"] = turn_summary.strong_count
        curves["turn_summary"] = turn_summary
    return {"summary": summary, "curves": curves}


def run_turn_analysis(
    config: RunConfig,
    *,
    kinds: Iterable[str] = ARTIFACT_KINDS,
    progress: bool = True,
) -> Dict[str, Any]:
    """Analyse every (model, trajectory, turn) cell and write the manifest last."""
    kinds = tuple(k for k in ARTIFACT_KINDS if k in set(kinds))
    out_dir = config.out_path
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "run_config.json", config.to_dict())

    trajectories = load_trajectories(config, out_dir)
    models = []
    for spec in config.models:
        weights = build_model(spec, config.base_dir)
        models.append((spec.label, weights, weights.digest()))
        logger.info("model %s ready (%d layers)", spec.label, weights.config.n_layers)

    jobs = []
    for label, weights, digest in models:
        for name, trajectory in trajectories:
            try:
                tok = tokenize(trajectory, weights.config.vocab_size)
                turns = _turns_for(config, tok)
            except Exception as error:  # recorded per cell below
                tok, turns = error, config.turns if config.turns != "all" else (1,)
            for r in turns:
                jobs.append((Cell(label, name, trajectory.domain, r), weights, digest, tok))

    cell_workers = config.workers if len(jobs) > 1 else 1
    inner_workers = 1 if cell_workers > 1 else config.workers

    def run(job) -> Dict[str, Any]:
        cell, weights, digest, tok = job
        cell_dir = out_dir / cell.relative_dir
        if cell_dir.exists():
            shutil.rmtree(cell_dir)
        record: Dict[str, Any] = {
            "model": cell.model, "trajectory": cell.trajectory, "domain": cell.domain, "turn": cell.turn,
        }
        started = time.perf_counter()
        try:
            if isinstance(tok, Exception):
                raise tok
            result = analyze_cell(weights, digest, cell, tok, config, cell_dir, kinds, inner_workers)
        except Exception as error:
            logger.error("cell %s/%s turn %d failed: %s", cell.model, cell.trajectory, cell.turn, error)
            if cell_dir.exists():
                shutil.rmtree(cell_dir)
            record.update(status="failed", error=f"{type(error).__name__}: {error}")
            return {"record": record, "curves": None}
        record.update(status="ok", n_tokens=result["summary"]["n_tokens"], summary=result["summary"])
        if config.record_timings:
            record["seconds"] = round(time.perf_counter() - started, 3)
        return {"record": record, "curves": result["curves"]}

    bar = tqdm(total=len(jobs), desc="cells", unit="cell", disable=not progress)
    results = []
    if cell_workers > 1:
        with ThreadPoolExecutor(max_workers=cell_workers) as pool:
            for result in pool.map(run, jobs):
                results.append(result)
                bar.update(1)
    else:
        for job in jobs:
            results.append(run(job))
            bar.update(1)
    bar.close()

    reports = _domain_reports(config, jobs, results, out_dir) if "effective_depth" in kinds else []
    if {"future_effect", "cosine"} <= set(kinds):
        _turn_comparisons(jobs, results, out_dir)

    manifest = {
        "config_digest": config.digest(),
        "models": {label: digest for label, _, digest in models},
        "kinds": list(kinds),
        "cells": [r["record"] for r in results],
        "reports": [report.to_dict() for report in reports],
    }
    written = sorted(
        p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST_NAME
    )
    manifest["files"] = [{"path": rel, "sha256": file_digest(out_dir / rel)} for rel in written]
    write_json(out_dir / MANIFEST_NAME, manifest)
    logger.info("manifest with %d files written to %s", len(manifest["files"]), out_dir / MANIFEST_NAME)
    return manifest


def _domain_reports(config: RunConfig, jobs, results, out_dir: Path):
    """One report per (model, domain): criteria applied to curves averaged over its cells."""
    grouped: Dict[tuple[str, str], List[Dict[str, Any]]] = {}
    for (cell, *_), result in zip(jobs, results):
        if result["curves"] is not None:
            grouped.setdefault((cell.model, cell.domain), []).append(result["curves"])
    reports = []
    for (model, domain), cell_curves in grouped.items():
        report = effective_depth_report(
            model,
            domain,
            average_curves([c["cosine"] for c in cell_curves]),
            average_curves([c["kl"] for c in cell_curves]),
            average_curves([c["overlap"] for c in cell_curves]),
            convention=config.ratio_convention,
            kl_fraction=config.kl_fraction,
            overlap_threshold=config.overlap_threshold,
            cells=len(cell_curves),
        )
        write_report(report, out_dir / "reports" / f"{model}__{domain}.json")
        reports.append(report)
    if reports:
        emit_ed_table(reports, out_dir / "effective_depth_table.csv")
    return reports


def _turn_comparisons(jobs, results, out_dir: Path) -> None:
    grouped: Dict[tuple[str, str], list] = {}
    for (cell, *_), result in zip(jobs, results):
        if result["curves"] is not None and "turn_summary" in result["curves"]:
            grouped.setdefault((cell.model, cell.trajectory), []).append(result["curves"]["turn_summary"])
    for (model, trajectory), summaries in grouped.items():
        write_json(out_dir / "cells" / model / trajectory / "turn_comparison.json", compare_trajectory(summaries))
