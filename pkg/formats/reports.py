"""
Report files. JSON documents carry "schema_version": 1 and a "command" field; floats are
written as shortest round-trip decimals, and infinite or NaN values as null. The search
command also writes a CSV next to its JSON report with the columns
task_id, strategy, eps, wall_time.
"""
import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence

SCHEMA_VERSION = 1
SEARCH_COLUMNS = ("task_id", "strategy", "eps", "wall_time")


def finite_or_none(value: float):
    if value is None or not math.isfinite(value):
        return None
    return value


def _clean(obj: Any) -> Any:
    if isinstance(obj, float):
        return finite_or_none(obj)
    if isinstance(obj, dict):
        return {key: _clean(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(value) for value in obj]
    return obj


def report_to_dict(report) -> dict:
    """Serializable view of a `verifier.Report`; the alpha tensors themselves are not written."""
    return {
        "verdict": report.verdict.value,
        "margin_lb": report.margin_lb,
        "strategy": report.strategy.value,
        "epsilon": report.epsilon,
        "alpha_stats": report.alpha_stats.to_dict(),
        "wall_time": report.wall_time,
        "trace": report.trace,
    }


def search_to_dict(result) -> dict:
    return {
        "eps": result.eps,
        "upper": result.upper,
        "bracket_width": result.bracket_width,
        "wall_time": result.wall_time,
        "growth_probes": result.growth_probes,
        "probes": [{"eps": p.eps, "verified": p.verified, "wall_time": p.wall_time} for p in result.probes],
    }


def dumps_report(command: str, body: dict) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "command": command}
    doc.update(body)
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def write_report(path: str | Path, command: str, body: dict):
    Path(path).write_text(dumps_report(command, body), encoding="utf-8")


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def csv_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".csv")


def write_search_csv(path: str | Path, rows: Iterable[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SEARCH_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_search_csv(path: str | Path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
