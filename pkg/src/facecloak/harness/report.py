"""Run records and report emission (JSON + CSV + PNG figures)."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from facecloak import __version__
from facecloak.harness import plotting
from facecloak.harness.manifest import atomic_write_text

REPORT_SCHEMA = "facecloak.report"
REPORT_VERSION = 1
RUN_SCHEMA = "facecloak.run"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunRecord:
    command: str
    argv: list[str]
    config: dict
    seeds: dict = field(default_factory=dict)
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    started: str = field(default_factory=utc_now)
    finished: str | None = None
    per_image: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": RUN_SCHEMA,
            "version": REPORT_VERSION,
            "package_version": __version__,
            "python": platform.python_version(),
            **asdict(self),
        }

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "run.json"
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, default=_jsonable))
        return path


def _jsonable(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "__fspath__"):
        return os.fspath(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_run(run_dir) -> dict:
    with open(Path(run_dir) / "run.json") as fh:
        data = json.load(fh)
    if data.get("schema") != RUN_SCHEMA:
        raise ValueError(f"{run_dir} does not hold a run record")
    return data


def write_json(path, payload) -> Path:
    path = Path(path)
    atomic_write_text(path, json.dumps(payload, indent=2, default=_jsonable))
    return path


def write_csv(path, rows: list[dict], fieldnames=None) -> Path:
    buf = io.StringIO()
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path = Path(path)
    atomic_write_text(path, buf.getvalue())
    return path


def write_report(record: RunRecord, evaluation=None, curves=None, out_dir=None, extra: dict | None = None) -> dict:
    """Write ``report.json`` plus CSV tables and figures into ``out_dir``.

    ``evaluation`` is an :class:`~facecloak.metrics.EvaluationReport` (or a
    dict of them keyed by set name), ``curves`` a robustness result.
    Returns the report payload.
    """
    out = Path(out_dir)
    payload: dict = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "run_id": record.run_id,
        "command": record.command,
        "config": record.config,
        **(extra or {}),
    }
    files = {}
    if evaluation is not None:
        evals = evaluation if isinstance(evaluation, dict) else {"attacked": evaluation}
        payload["evaluation"] = {k: v.to_dict() for k, v in evals.items()}
        rows = [
            {"set": k, "image": i, **counts}
            for k, v in evals.items()
            for i, counts in enumerate(v.per_image)
        ]
        files["per_image_csv"] = str(write_csv(out / "per_image.csv", rows, ["set", "image", "true", "false", "gt"]).name)
        if "clean" in evals and "attacked" in evals:
            payload["clean_duq"] = evals["clean"].duq
            payload["attacked_duq"] = evals["attacked"].duq
            payload["duq_drop"] = evals["clean"].duq - evals["attacked"].duq
            fig = plotting.duq_summary_figure([record.run_id], [evals["clean"].duq], [evals["attacked"].duq])
            files["duq_figure"] = plotting.save_figure(fig, out / "duq.png").name
    if curves is not None:
        rows = curves.rows()
        payload["curves"] = rows
        payload["curve_failures"] = curves.failures
        files["curves_csv"] = str(write_csv(out / "curves.csv", rows, ["operation", "severity", "set", "duq", "excluded"]).name)
        files["robustness_figure"] = plotting.save_figure(plotting.robustness_figure(curves), out / "robustness.png").name
    payload["files"] = files
    write_json(out / "report.json", payload)
    record.outputs.update(files)
    return payload
