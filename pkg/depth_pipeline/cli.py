#!/usr/bin/env python3
"""Command-line entry: synthesize trajectories, initialise models, run and render analyses."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from depth_pipeline.analyze import ARTIFACT_KINDS, MANIFEST_NAME, run_turn_analysis
from depth_pipeline.run_config import MODEL_PRESETS_PATH, load_model_presets, load_run_config
from utils.causal import PositionPolicy
from utils.effective_depth import CONVENTION_ALIASES, build_report
from utils.errors import DepthError, InputError
from utils.formatter import summarize_cell, summarize_report
from utils.model import ModelConfig, init_random
from utils.storage import emit_ed_table, load_report, read_csv
from utils.svg_charts import diverging_scale, emit_bar_svg, emit_heatmap_svg, matrix_from_rows, sequential_scale
from utils.trajectory import DOMAINS, save_trajectory, synthesize
from utils.weights_io import save_weights

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# single-probe subcommand -> (artifact kinds, which policy --policy overrides)
PROBE_COMMANDS = {
    "future-effect": (("future_effect",), "position_policy"),
    "cosine": (("cosine",), "probe_policy"),
    "lens": (("lens",), "probe_policy"),
    "effective-depth": (("effective_depth",), "probe_policy"),
}


class UsageParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def policy_arg(text: str) -> str:
    try:
        return str(PositionPolicy.parse(text))
    except InputError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def parse_arguments(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = UsageParser(prog="depth_tracker", description="Layer-wise depth analysis of a sparse-MoE transformer.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging on standard error.")
    parser.add_argument("--quiet", "-q", action="store_true", help="Hide progress bars.")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    synth = commands.add_parser("synth", help="Generate a synthetic multi-turn trajectory.")
    synth.add_argument("--domain", required=True, choices=DOMAINS)
    synth.add_argument("--turns", type=int, required=True, help="Number of turns.")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="Trajectory JSON to write.")

    init = commands.add_parser("init-model", help="Write randomly initialised weights to a container file.")
    source = init.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", help=f"Preset name from {MODEL_PRESETS_PATH.name}.")
    source.add_argument("--config", help="Path to a model config JSON.")
    init.add_argument("--seed", type=int, help="Override the config seed.")
    init.add_argument("--out", required=True, help="Weight container to write.")

    analyze = commands.add_parser("analyze", help="Run every probe from a run config.")
    _add_run_flags(analyze)
    analyze.add_argument("--policy", type=policy_arg, help="Override the Future Effect position policy.")

    for name, (kinds, _) in PROBE_COMMANDS.items():
        probe = commands.add_parser(name, help=f"Run only the {name} probe.")
        _add_run_flags(probe)
        probe.add_argument("--turn", type=int, help="Analyse this turn only.")
        probe.add_argument("--policy", type=policy_arg, help="Candidate or probe position policy.")

    render = commands.add_parser("render", help="Render an artifact CSV as SVG.")
    render.add_argument("csv", help="future_effect.csv, cosine_*.csv or logit_change.csv")
    render.add_argument("--out", required=True, help="SVG file to write.")

    report = commands.add_parser("report", help="Merge effective depth reports into a table CSV.")
    report.add_argument("reports", nargs="+", help="Report JSON files or folders holding them.")
    report.add_argument("--out", required=True, help="Table CSV to write.")
    report.add_argument("--ratio-convention", choices=sorted(CONVENTION_ALIASES))

    args = parser.parse_args(argv)
    if getattr(args, "turn", None) is not None and args.turn < 1:
        parser.error("--turn must be >= 1")
    if args.command == "synth" and args.turns < 1:
        parser.error("--turns must be >= 1")
    return args


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="Run config JSON.")
    sub.add_argument("--out", help="Override the output directory.")
    sub.add_argument("--ratio-convention", choices=sorted(CONVENTION_ALIASES))
    sub.add_argument("--workers", type=int, help="Thread workers for cells or interventions.")


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


# ---------------------------------------------------------------- commands

def cmd_synth(args: argparse.Namespace) -> None:
    trajectory = synthesize(args.domain, args.turns, args.seed)
    path = save_trajectory(trajectory, args.out)
    print(f"Trajectory with {trajectory.n_turns} turns written to {path}")


def cmd_init_model(args: argparse.Namespace) -> None:
    if args.preset:
        presets = load_model_presets()
        if args.preset not in presets:
            raise InputError(f"unknown preset {args.preset!r}; expected one of {sorted(presets)}")
        fields = dict(presets[args.preset])
    else:
        with Path(args.config).open("r", encoding="utf-8") as handle:
            fields = json.load(handle)
    if args.seed is not None:
        fields["seed"] = args.seed
    config = ModelConfig.from_dict(fields)
    weights = init_random(config)
    path = save_weights(config, weights, args.out)
    print(f"Weights ({config.n_layers} layers, digest {weights.digest()[:12]}) written to {path}")


def _run(args: argparse.Namespace, kinds=ARTIFACT_KINDS, policy_field: str = "position_policy") -> None:
    config = load_run_config(args.config)
    overrides = {
        "ratio_convention": args.ratio_convention,
        "workers": args.workers,
        policy_field: args.policy,
    }
    if args.out:
        overrides["output_dir"] = str(Path(args.out).resolve())
    if getattr(args, "turn", None) is not None:
        overrides["turns"] = (args.turn,)
    config = config.with_overrides(**overrides)
    if config.workers < 1:
        raise InputError("--workers must be >= 1")
    manifest = run_turn_analysis(config, kinds=kinds, progress=not args.quiet)
    for cell in manifest["cells"]:
        summarize_cell(cell)
    for record in manifest["reports"]:
        print()
        summarize_report(build_report(
            record["model"], record["domain"], record["n_layers"],
            {c: (record["ed"][c], record["flags"][c]) for c in record["ed"]},
            convention=record["convention"], cells=record["cells"],
        ))
    failed = sum(1 for cell in manifest["cells"] if cell["status"] != "ok")
    print(f"\n{len(manifest['cells']) - failed} cells ok, {failed} failed; manifest: {config.out_path / MANIFEST_NAME}")


def cmd_render(args: argparse.Namespace) -> None:
    rows = read_csv(args.csv)
    if not rows:
        raise InputError(f"{args.csv} has no data rows")
    columns = set(rows[0])
    if {"s", "l", "value"} <= columns:
        matrix, row_ticks, col_ticks = matrix_from_rows(rows, "s", "l")
        emit_heatmap_svg(matrix, sequential_scale(matrix), args.out, title=Path(args.csv).stem,
                         row_ticks=row_ticks, col_ticks=col_ticks)
    elif {"layer", "position", "value"} <= columns:
        matrix, row_ticks, col_ticks = matrix_from_rows(rows, "layer", "position")
        emit_heatmap_svg(matrix, diverging_scale(), args.out, title=Path(args.csv).stem,
                         row_label="l (layer)", col_label="t (position)",
                         row_ticks=row_ticks, col_ticks=col_ticks)
    elif {"s", "value"} <= columns:
        values = [float(r["value"]) for r in sorted(rows, key=lambda r: int(r["s"]))]
        emit_bar_svg(values, args.out, title=Path(args.csv).stem)
    else:
        raise InputError(f"{args.csv}: unrecognised columns {sorted(columns)}")
    print(f"SVG written to {args.out}")


def cmd_report(args: argparse.Namespace) -> None:
    paths = []
    for item in args.reports:
        item = Path(item)
        paths.extend(sorted(item.glob("*.json")) if item.is_dir() else [item])
    reports = [load_report(p) for p in paths]
    if args.ratio_convention:
        reports = [
            build_report(r.model, r.domain, r.n_layers, {c: (r.ed[c], r.flags[c]) for c in r.ed},
                         convention=args.ratio_convention, cells=r.cells)
            for r in reports
        ]
    path = emit_ed_table(reports, args.out)
    for report in reports:
        summarize_report(report)
    print(f"Table with {len(reports)} reports written to {path}")


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "synth":
            cmd_synth(args)
        elif args.command == "init-model":
            cmd_init_model(args)
        elif args.command == "analyze":
            _run(args)
        elif args.command in PROBE_COMMANDS:
            kinds, policy_field = PROBE_COMMANDS[args.command]
            _run(args, kinds, policy_field)
        elif args.command == "render":
            cmd_render(args)
        elif args.command == "report":
            cmd_report(args)
    except (DepthError, OSError, ValueError) as error:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli_dispatch())
