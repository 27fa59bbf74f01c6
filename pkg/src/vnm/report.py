"""Collect run artifacts into one summary table.

Recognized inputs, found recursively under a directory:

* pipeline reports (``report.json`` with a ``setting`` key)
* training logs (JSON with ``config`` and ``final_loss``)
* ablation CSVs (header containing ``strategy`` and ``final_loss``)
* speedup tables (header ``v,m,speedup``)

Each pipeline report, training log and ablation row becomes one summary row
(a training log inside a pipeline folder is folded into that pipeline's row);
speedups are looked up in any speedup table found. A speedup table with no
runs alongside it yields one row per table entry.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

from .core import FormatError, SpeedupTable, VnmError
from .io import dump_json, parse_speedup_table
from .selection import ln_k, sparsity_of

COLUMNS = ("v", "m", "sparsity", "ln_k", "speedup", "final_loss", "seed")


def _row(v: Optional[int], m: int, speedup=None, final_loss=None, seed=None, **extra) -> dict:
    base_v = None if m == 4 else v
    return {
        "v": v,
        "m": m,
        "sparsity": sparsity_of(m),
        "ln_k": ln_k(base_v, m),
        "speedup": speedup,
        "final_loss": final_loss,
        "seed": seed,
        **extra,
    }


def _header(path: Path) -> list[str]:
    with path.open(newline="") as fh:
        first = next(csv.reader(fh), [])
    return [h.strip() for h in first]


def collect(root) -> tuple[list[dict], list[SpeedupTable]]:
    """Summary rows (speedup not yet filled in) and the speedup tables under ``root``."""
    root = Path(root)
    if not root.exists():
        raise VnmError(f"artifact path {root} does not exist")
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
    rows: list[dict] = []
    tables: list[SpeedupTable] = []
    for path in files:
        rel = str(path.relative_to(root)) if root.is_dir() else path.name
        if path.suffix == ".json":
            try:
                obj = json.loads(path.read_text())
            except json.JSONDecodeError:
                continue
            if not isinstance(obj, dict) or "final_loss" not in obj:
                continue
            if "setting" in obj:
                rows.append(_row(obj["v"], obj["m"], obj.get("speedup"), obj["final_loss"], obj["seed"],
                                 source=rel, setting=obj["setting"], strategy=obj.get("strategy")))
            elif "config" in obj:
                c = obj["config"]
                rows.append(_row(c["v"], c["m"], None, obj["final_loss"], c["seed"],
                                 source=rel, mode=c.get("mode"), strategy=c.get("strategy")))
        elif path.suffix == ".csv":
            head = _header(path)
            if head[:3] == ["v", "m", "speedup"]:
                tables.append(parse_speedup_table(path.read_text()))
            elif {"strategy", "final_loss", "v", "m", "seed"} <= set(head):
                with path.open(newline="") as fh:
                    for rec in csv.DictReader(fh):
                        rows.append(_row(int(rec["v"]), int(rec["m"]), None, float(rec["final_loss"]),
                                         int(rec["seed"]), source=rel, strategy=rec["strategy"]))
    # a pipeline folder also holds its own training log; count it once
    pipeline_dirs = {str(Path(r["source"]).parent) for r in rows if "setting" in r}
    rows = [r for r in rows if "setting" in r or "mode" not in r
            or str(Path(r["source"]).parent) not in pipeline_dirs]
    if not rows and not tables:
        raise VnmError(f"no artifacts found under {root}")
    return rows, tables


def summarize(root) -> list[dict]:
    rows, tables = collect(root)
    if not rows:
        for i, t in enumerate(tables):
            for (v, m), s in t:
                rows.append(_row(v, m, s, table=i))
        return rows
    for r in rows:
        if r["speedup"] is None:
            for t in tables:
                s = t.get(r["v"], r["m"])
                if s is not None:
                    r["speedup"] = s
                    break
    return rows


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def format_summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in COLUMNS])
    return buf.getvalue()


def write_report(root, out_dir) -> list[dict]:
    """Write ``summary.csv`` (fixed columns) and ``summary.json`` (all fields)."""
    rows = summarize(root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(format_summary_csv(rows))
    dump_json({"columns": list(COLUMNS), "rows": rows}, out / "summary.json")
    return rows


def read_summary_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise FormatError(f"summary header must be {','.join(COLUMNS)}")
        return list(reader)
