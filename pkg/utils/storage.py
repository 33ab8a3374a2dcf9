# utils/storage.py
"""
Module `storage` for depth-trace.

Writes analysis artifacts: CSV matrices with a JSON sidecar, JSON records
and the Table-1-style effective-depth grid. Every writer creates the parent
folder, writes UTF-8 with "\\n" line endings and returns the path, so the
manifest can digest it afterwards. Output depends only on the values
written.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from utils.causal import FutureEffectMap, LogitChangeProfile
from utils.effective_depth import CRITERIA, EffectiveDepthReport, display_ratio
from utils.errors import ReportError
from utils.logit_lens import LensCurves
from utils.probes import CosineProfile

logger = logging.getLogger(__name__)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def jsonable(value):
    """Replace NaN/Inf with None and tuples with lists, recursively."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return jsonable(value.item())
    return value


def canonical_json(data) -> str:
    return json.dumps(jsonable(data), sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        json.dump(jsonable(data), handle, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
        handle.write("\n")
    return path


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else format(value, ".10g")
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------- artifacts

def write_future_effect(fe_map: FutureEffectMap, path: str | Path, model_digest: str) -> tuple[Path, Path]:
    """CSV "s,l,value,argmax_p,flag" plus a JSON sidecar next to it."""
    path = Path(path)
    csv_path = write_csv(path, ("s", "l", "value", "argmax_p", "flag"), fe_map.entries())
    sidecar = write_json(
        path.with_suffix(".json"),
        {
            "turn": fe_map.turn,
            "policy": fe_map.policy,
            "positions": list(fe_map.positions),
            "n_layers": fe_map.n_layers,
            "model_digest": model_digest,
        },
    )
    return csv_path, sidecar


def write_logit_change(profile: LogitChangeProfile, path: str | Path, model_digest: str) -> tuple[Path, Path]:
    path = Path(path)
    csv_path = write_csv(path, ("s", "value"), enumerate(profile.values))
    sidecar = write_json(
        path.with_suffix(".json"),
        {"turn": profile.turn, "pivot": profile.pivot, "metric": profile.metric, "model_digest": model_digest},
    )
    return csv_path, sidecar


def write_cosine_profile(profile: CosineProfile, path: str | Path) -> Path:
    """"layer,position,value"; degenerate entries are left empty."""
    rows = []
    for i, l in enumerate(profile.layers):
        for j, p in enumerate(profile.positions):
            rows.append((l, p, None if profile.degenerate[i, j] else float(profile.values[i, j])))
    return write_csv(path, ("layer", "position", "value"), rows)


def write_lens_curves(curves: LensCurves, path: str | Path) -> Path:
    rows = [(l, float(curves.kl[i]), float(curves.overlap[i])) for i, l in enumerate(curves.layers)]
    return write_csv(path, ("layer", "kl", "overlap"), rows)


def write_report(report: EffectiveDepthReport, path: str | Path) -> Path:
    return write_json(path, report.to_dict())


def load_report(path: str | Path) -> EffectiveDepthReport:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Report file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as error:
            raise ReportError(f"{path}: invalid JSON: {error}") from error
    return EffectiveDepthReport.from_dict(data)


def ed_table_rows(reports: Sequence[EffectiveDepthReport]) -> tuple[list[str], list[list]]:
    """Rows = model labels; column groups = criterion x domain, each with ED and Ratio."""
    if not reports:
        raise ReportError("no effective depth reports to tabulate")
    models: dict[str, dict[str, EffectiveDepthReport]] = {}
    layers: dict[str, int] = {}
    domains: list[str] = []
    conventions = {r.convention for r in reports}
    if len(conventions) > 1:
        raise ReportError(f"reports mix ratio conventions {sorted(conventions)}")
    for report in reports:
        if layers.setdefault(report.model, report.n_layers) != report.n_layers:
            raise ReportError(
                f"model {report.model!r} has inconsistent layer counts "
                f"{layers[report.model]} and {report.n_layers}"
            )
        cells = models.setdefault(report.model, {})
        if report.domain in cells:
            raise ReportError(f"duplicate report for {report.model!r} / {report.domain!r}")
        cells[report.domain] = report
        if report.domain not in domains:
            domains.append(report.domain)

    header = ["model", "n_layers", "convention"]
    for criterion in CRITERIA:
        for domain in domains:
            header += [f"{criterion}.{domain}.ED", f"{criterion}.{domain}.Ratio"]
    header.append("flags")

    rows = []
    for model, cells in models.items():
        row: list = [model, layers[model], reports[0].convention]
        flags = []
        for criterion in CRITERIA:
            for domain in domains:
                report = cells.get(domain)
                if report is None:
                    row += [None, None]
                    continue
                row += [report.ed[criterion], display_ratio(report.ratios[criterion])]
                if report.flags[criterion]:
                    flags.append(f"{criterion}.{domain}:{report.flags[criterion]}")
        row.append(";".join(flags))
        rows.append(row)
    return header, rows


def emit_ed_table(reports: Sequence[EffectiveDepthReport], path: str | Path) -> Path:
    header, rows = ed_table_rows(reports)
    path = write_csv(path, header, rows)
    logger.info("wrote effective depth table for %d models to %s", len(rows), path)
    return path
