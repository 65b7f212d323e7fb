"""Artifact writers: versioned JSON/CSV with reproducible formatting and
the human-readable run summary.

Float fields go through repr (shortest round-trip), containers are
emitted with sorted keys, and wall-clock data stays out of the numeric
files, so byte-identical reruns mean numerically identical results.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1


def to_jsonable(obj):
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return to_jsonable(float(obj))
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = list(obj)
        if isinstance(obj, (set, frozenset)):
            items = sorted(items, key=repr)
        return [to_jsonable(v) for v in items]
    return repr(obj)


def write_json(path: str, payload: dict, config_hash: str) -> None:
    body = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash}
    body.update(to_jsonable(payload))
    with open(path, "w") as fh:
        json.dump(body, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, rows: Sequence[dict], columns: Optional[List[str]] = None,
              config_hash: str = "") -> None:
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# schema_version={SCHEMA_VERSION} config_hash={config_hash}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row.get(c, "")) for c in columns) + "\n")


def write_dat(path: str, rows: Sequence[dict], columns: List[str]) -> None:
    """Whitespace-separated columns for gnuplot."""
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(_format_cell(row.get(c, "nan")) for c in columns) + "\n")


def render_summary(report) -> str:
    lines = []
    lines.append(f"hypwalk run summary")
    lines.append(f"config_hash: {report.config_hash}")
    lines.append("")
    for stage, payload in report.stages.items():
        lines.append(f"[{stage}]")
        for key, value in sorted(payload.items()):
            if isinstance(value, (list, dict)):
                lines.append(f"  {key}: ({type(value).__name__}, {len(value)} entries)")
            else:
                lines.append(f"  {key}: {_format_cell(to_jsonable(value))}")
        lines.append("")
    lines.append("[assertions]")
    for a in report.assertions:
        lines.append(f"  {a.status.upper():12s} {a.name}: {a.detail}")
    counts = report.assertion_counts()
    lines.append("")
    lines.append(
        f"assertions: {counts['pass']} pass, {counts['fail']} fail, "
        f"{counts['inconclusive']} inconclusive"
    )
    return "\n".join(lines) + "\n"


def load_out_dir(out_dir: str) -> Dict[str, dict]:
    """Read every versioned JSON artifact in a run directory."""
    found = {}
    if not os.path.isdir(out_dir):
        return found
    for name in sorted(os.listdir(out_dir)):
        if name.endswith(".json"):
            with open(os.path.join(out_dir, name)) as fh:
                found[name] = json.load(fh)
    return found
