"""Benchmark comparison report (structured document + flat CSV)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..serialize import dumps

HIST_EDGES = tuple(10.0 ** k for k in range(-4, 3))
CSV_COLUMNS = (
    "system",
    "baseline_max_nrmse",
    "refined_max_nrmse",
    "baseline_r2",
    "refined_r2",
    "baseline_grade",
    "refined_grade",
    "stop_reason",
    "iterations",
    "error",
)


@dataclass(frozen=True)
class BenchResult:
    system: str
    baseline_max_nrmse: float | None = None
    refined_max_nrmse: float | None = None
    baseline_r2: float | None = None
    refined_r2: float | None = None
    baseline_grade: str | None = None
    refined_grade: str | None = None
    stop_reason: str | None = None
    iterations: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _jf(v: float | None) -> float | str | None:
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _stats(values: Sequence[float]) -> dict[str, Any]:
    finite = [v for v in values if math.isfinite(v)]
    return {
        "count": len(values),
        "median": float(np.median(finite)) if finite else None,
        "mean": float(np.mean(finite)) if finite else None,
        "divergent": sum(1 for v in values if not math.isfinite(v)),
    }


def histogram(values: Sequence[float]) -> dict[str, Any]:
    finite = np.array([v for v in values if math.isfinite(v)], dtype=float)
    counts, _ = np.histogram(finite, bins=np.array(HIST_EDGES))
    return {
        "counts": [int(c) for c in counts],
        "underflow": int(np.sum(finite < HIST_EDGES[0])),
        "overflow": int(np.sum(finite > HIST_EDGES[-1])),
    }


def emit_report(results: Sequence[BenchResult], tau: float = 0.1) -> dict[str, Any]:
    """Per-system table, success counts, NRMSE statistics and histogram bins."""
    if not results:
        raise ValueError("emit_report needs at least one result")
    ok = [r for r in results if r.ok]
    base = [r.baseline_max_nrmse for r in ok if r.baseline_max_nrmse is not None]
    ref = [r.refined_max_nrmse for r in ok if r.refined_max_nrmse is not None]
    better = sum(
        1
        for r in ok
        if r.refined_max_nrmse is not None
        and r.baseline_max_nrmse is not None
        and r.refined_max_nrmse < r.baseline_max_nrmse
    )
    return {
        "tau": tau,
        "systems": [{k: _jf(v) if isinstance(v, float) else v for k, v in asdict(r).items()} for r in results],
        "success": {
            "baseline": sum(1 for v in base if v < tau),
            "refined": sum(1 for v in ref if v < tau),
            "total": len(results),
        },
        "good": {
            "baseline": sum(1 for r in ok if r.baseline_grade == "Good"),
            "refined": sum(1 for r in ok if r.refined_grade == "Good"),
            "total": len(results),
        },
        "refined_better": better,
        "failed_runs": len(results) - len(ok),
        "nrmse": {"baseline": _stats(base), "refined": _stats(ref)},
        "histogram": {
            "edges": list(HIST_EDGES),
            "baseline": histogram(base),
            "refined": histogram(ref),
        },
    }


def report_csv(report: dict[str, Any]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in report["systems"]:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


def write_report(report: dict[str, Any], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "report.json", out / "report.csv"
    jpath.write_text(dumps(report))
    cpath.write_text(report_csv(report))
    return jpath, cpath
