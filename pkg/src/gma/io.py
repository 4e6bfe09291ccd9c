"""CSV dataset ingestion and JSON result emission."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DataError
from .multilevel import MultiSubjectDataset
from .single import SubjectSeries

COLUMNS = ("subject_id", "t", "z", "m", "r")


def read_dataset(path) -> MultiSubjectDataset:
    """Parse a long-format CSV with columns ``subject_id, t, z, m, r``.

    Subjects keep their order of first appearance; ``t`` must run 1, 2, ...
    without gaps within each subject.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    series: dict = {}
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: no subjects (empty file)")
        missing = [c for c in COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            sid = row["subject_id"]
            if sid is None or sid == "":
                raise DataError(f"{path}:{line}: empty subject_id")
            try:
                t = int(row["t"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: t is not an integer: {row['t']!r}") from None
            vals = []
            for col in ("z", "m", "r"):
                try:
                    v = float(row[col])
                except (TypeError, ValueError):
                    raise DataError(f"{path}:{line}: {col} is not a number: {row[col]!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{line}: non-finite value in column {col}")
                vals.append(v)
            rec = series.setdefault(sid, [])
            expected = len(rec) + 1
            if t != expected:
                raise DataError(f"{path}:{line}: gap in t for subject {sid}: expected {expected}, got {t}")
            rec.append(vals)
    if not series:
        raise DataError(f"{path}: no subjects")
    subjects = []
    for sid, rows in series.items():
        a = np.array(rows, dtype=float)
        subjects.append(SubjectSeries(sid, a[:, 0], a[:, 1], a[:, 2]))
    return MultiSubjectDataset(subjects)


def write_dataset(dataset: MultiSubjectDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for s in dataset.subjects:
            for t in range(s.T):
                w.writerow([s.id, t + 1, repr(float(s.z[t])), repr(float(s.m[t])), repr(float(s.r[t]))])


def write_csv(rows: list, path, columns=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _plain(v) for k, v in row.items()})


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def result_schema() -> dict:
    text = resources.files("gma").joinpath("schemas/result.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_result(doc: dict, path) -> dict:
    """Validate against the shipped schema and write as UTF-8 JSON."""
    doc = _plain(doc)
    jsonschema.validate(doc, result_schema())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return doc


def read_result(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read result file {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, result_schema())
    except jsonschema.ValidationError as exc:
        raise DataError(f"{path}: not a valid result file: {exc.message}") from exc
    return doc
