"""Line-delimited JSON run reports and the CSV summary table."""

import csv
import io
import json
from pathlib import Path

from ..metrics import ClassMetrics, RunReport

SCHEMA_VERSION = 1
SUMMARY_COLUMNS = ("mode", "metric", "class", "mean", "std")


class ReportError(ValueError):
    pass


def report_path(directory, seed):
    return Path(directory) / f"report_{seed}.jsonl"


def _metrics_out(metrics):
    return [{"class_id": m.class_id, "dsc": m.dsc, "hd": m.hd} for m in metrics]


def _metrics_in(records):
    return [ClassMetrics(int(r["class_id"]), float(r["dsc"]), float(r["hd"])) for r in records]


def _dump(record):
    return json.dumps(record, sort_keys=True, allow_nan=False, ensure_ascii=False)


def report_lines(report):
    yield _dump({
        "type": "header",
        "schema_version": SCHEMA_VERSION,
        "mode": report.mode,
        "seed": report.seed,
        "config": report.config,
    })
    yield _dump({"type": "initial", "metrics": _metrics_out(report.initial)})
    for stats in report.per_iteration:
        yield _dump({"type": "iteration", **stats})
    for cp in report.checkpoints:
        yield _dump({"type": "checkpoint", **cp})
    yield _dump({"type": "final", "metrics": _metrics_out(report.final)})
    yield _dump({
        "type": "end",
        "n_iterations": len(report.per_iteration),
        "n_checkpoints": len(report.checkpoints),
    })


def save_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(line + "\n" for line in report_lines(report))
    # write-then-rename so a crash never leaves a half report behind
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(text.encode("utf-8"))
    tmp.replace(path)
    return path


def load_report(path):
    """Parse a report written by :func:`save_report`.

    Raises :class:`ReportError` (with the byte offset of the bad record) on
    malformed or truncated files, and on schema version mismatches.
    """
    path = Path(path)
    raw = path.read_bytes()
    header = None
    initial = final = None
    per_iteration, checkpoints = [], []
    ended = False
    offset = 0
    for line in raw.splitlines(keepends=True):
        start, offset = offset, offset + len(line)
        if ended:
            raise ReportError(f"{path}: data after end record at byte {start}")
        if not line.endswith(b"\n"):
            raise ReportError(f"{path}: truncated record at byte {start}")
        try:
            rec = json.loads(line.decode("utf-8"))
            kind = rec.pop("type")
        except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, KeyError, TypeError) as exc:
            raise ReportError(f"{path}: cannot parse record at byte {start}: {exc}") from None
        if header is None:
            if kind != "header":
                raise ReportError(f"{path}: expected header record at byte {start}")
            version = rec.get("schema_version")
            if version != SCHEMA_VERSION:
                raise ReportError(
                    f"{path}: report schema version {version!r}, this reader expects {SCHEMA_VERSION}"
                )
            header = rec
        elif kind == "initial":
            initial = _metrics_in(rec["metrics"])
        elif kind == "iteration":
            per_iteration.append(rec)
        elif kind == "checkpoint":
            checkpoints.append(rec)
        elif kind == "final":
            final = _metrics_in(rec["metrics"])
        elif kind == "end":
            if rec.get("n_iterations") != len(per_iteration) or rec.get("n_checkpoints") != len(checkpoints):
                raise ReportError(f"{path}: record counts disagree with end record at byte {start}")
            ended = True
        else:
            raise ReportError(f"{path}: unknown record type {kind!r} at byte {start}")
    if not ended:
        raise ReportError(f"{path}: truncated report (no end record after byte {offset})")
    return RunReport(
        mode=header["mode"],
        seed=header["seed"],
        config=header["config"],
        per_iteration=per_iteration,
        checkpoints=checkpoints,
        final=final or [],
        initial=initial or [],
    )


def summary_text(rows, columns=SUMMARY_COLUMNS):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_csv(rows, path, columns=SUMMARY_COLUMNS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(summary_text(rows, columns), encoding="utf-8")
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("mean", "std", "value"):
            if key in row:
                row[key] = float(row[key])
    return rows
