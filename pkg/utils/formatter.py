# utils/formatter.py
"""
Module `formatter` for depth-trace.

Short console summaries of what an analysis produced. Output goes to
standard output; nothing here changes any artifact.
"""
from utils.effective_depth import CRITERIA, EffectiveDepthReport, display_ratio
from utils.probes import REGIMES

CRITERION_LABELS = {
    "cosine": "Residual cosine",
    "kl": "Logit lens KL",
    "overlap": "Logit lens overlap",
}


def summarize_cell(cell: dict) -> None:
    """
    Print one analysed (model, trajectory, turn) cell.

    `cell` is the manifest record of the cell:
      - status "ok": one line per artifact kind, then regimes and phase changes
      - status "failed": the error message
    """
    head = f"[{cell['model']}] {cell['trajectory']} turn {cell['turn']}"
    if cell["status"] != "ok":
        print(f"{head}: FAILED ({cell['error']})")
        return
    print(f"{head}: {cell['n_tokens']} tokens")
    summary = cell.get("summary", {})
    if summary.get("mean_effect") is not None:
        print(f"  future effect   mean {summary['mean_effect']:.4f}, {summary['strong_count']} strong entries")
    if "max_logit_change" in summary:
        print(f"  logit change    pivot {summary['pivot']}, max D {summary['max_logit_change']:.4f}")
    elif "logit_change_skipped" in summary:
        print(f"  logit change    skipped: {summary['logit_change_skipped']}")
    if "effective_depth" in summary:
        depths = summary["effective_depth"]
        print("  effective depth " + ", ".join(f"{c} {depths[c]}" for c in CRITERION_LABELS))
    for variant, histogram in summary.get("regimes", {}).items():
        counts = ", ".join(f"{r} {histogram.get(r, 0)}" for r in REGIMES)
        print(f"  regimes ({variant}) {counts}")
    phases = summary.get("phase_changes", {})
    if phases:
        print("  phase changes   " + ", ".join(f"{k} {v}" for k, v in phases.items()))


def summarize_report(report: EffectiveDepthReport) -> None:
    """Print the three effective depths of one (model, domain) with their ratios."""
    print(f"{report.model} / {report.domain}  (L = {report.n_layers}, ratio {report.convention})")
    for criterion in CRITERIA:
        flag = report.flags[criterion]
        note = f"  [{flag}]" if flag else ""
        print(
            f"- {CRITERION_LABELS[criterion]}: ED {report.ed[criterion]}, "
            f"ratio {display_ratio(report.ratios[criterion])}{note}"
        )
    if report.convention_mismatch:
        print(f"  conventions disagree on: {', '.join(report.convention_mismatch)}")
