"""Report, log and manifest writers. Outputs are deterministic given their inputs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable

from .fairness import FairnessReport, SampleRecord

REPORT_COLUMNS = ["sample_id", "raw_label", "fair_label", "has_ce", "flipped", "violation", "solve_ms",
                  "status", "ce_assignment"]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _assignment_text(rec: SampleRecord) -> str:
    if rec.counterexample is None:
        return ""
    return ";".join(f"{k}={v}" for k, v in rec.counterexample.assignment.items())


def record_row(rec: SampleRecord, timings: bool = True) -> dict:
    return {
        "sample_id": rec.sample_id,
        "raw_label": rec.raw_label,
        "fair_label": rec.fair_label,
        "has_ce": rec.has_ce,
        "flipped": rec.flipped,
        "violation": rec.violation,
        "solve_ms": round(rec.solve_ms, 3) if timings else None,
        "status": rec.status,
        "ce_assignment": _assignment_text(rec),
    }


def write_csv(path: str | Path, columns: list[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(_clean(row), sort_keys=True) + "\n")


def summary_dict(report: FairnessReport) -> dict:
    return {
        "n": report.n,
        "ce_rate": report.ce_rate,
        "flip_rate": report.flip_rate,
        "accuracy": report.accuracy,
        "fair_accuracy": report.fair_accuracy,
        "avg_violation": report.avg_violation,
        "max_violation": report.max_violation,
        "n_unknown": report.n_unknown,
    }


def write_report(out_dir: Path, stem: str, report: FairnessReport, timings: bool = True) -> None:
    rows = [record_row(r, timings) for r in report.records]
    write_csv(out_dir / f"{stem}.csv", REPORT_COLUMNS, rows)
    write_json(out_dir / f"{stem}.json", {"summary": summary_dict(report), "records": rows})


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict[str, str | None]) -> None:
    """Resolved configuration plus a content hash of every input file."""
    hashes = {name: (sha256_file(p) if p else None) for name, p in sorted(inputs.items())}
    write_json(out_dir / "manifest.json", {"command": command, "config": config, "inputs": hashes})
