"""CSV ingestion, canonical dataset writing, and result-table emission.

Dataset files are plain CSV with a header row; lines starting with '#'
are metadata comments (schema version, outcome names, scales) and are
ignored by generic CSV tools. Absent outcomes use a configurable missing
token (default: empty field). All emitted tables carry a schema-version
comment as their first line.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

from mvpb.data import MetaDataset, Study
from mvpb.errors import IngestError

DATASET_SCHEMA = "mvpb-dataset-v1"

DEFAULT_COLUMNS = {
    "id": "study_id",
    "y1": "y1",
    "se1": "se1",
    "y2": "y2",
    "se2": "se2",
    "rho_w": "rho_w",
}


@dataclass(frozen=True)
class IngestSpec:
    """How to read a dataset file: column mapping, missing token, scales."""

    path: str
    columns: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    missing_token: str = ""
    scales: tuple[str, str] = ("unspecified", "unspecified")
    outcome_names: tuple[str, str] = ("outcome1", "outcome2")
    default_rho_w: float | None = None


@dataclass(frozen=True)
class RowIssue:
    """Why a data row was rejected during ingestion."""

    row: int
    study_id: str | None
    reason: str


@dataclass(frozen=True)
class IngestReport:
    dataset: MetaDataset
    rejected: tuple[RowIssue, ...]


def _parse_field(raw: str | None, missing_token: str) -> float | None:
    if raw is None:
        return None
    raw = raw.strip()
    if raw == missing_token.strip():
        return None
    return float(raw)  # ValueError surfaces as a row issue


def ingest(spec: IngestSpec) -> IngestReport:
    """Read and validate a dataset file.

    Rows failing validation (non-positive se, out-of-range rho_w, rho_w
    absent on a complete row without an explicit default, unparseable
    numbers) are collected as RowIssue diagnostics rather than aborting.
    Raises IngestError if the file is unreadable, the mapped columns are
    missing, or no valid study remains.
    """
    try:
        with open(spec.path, newline="", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise IngestError(f"cannot read {spec.path!r}: {exc}") from exc

    meta: dict[str, str] = {}
    body: list[str] = []
    for line in raw_lines:
        if line.startswith("#"):
            stripped = line[1:].strip()
            if "=" in stripped:
                key, _, value = stripped.partition("=")
                meta[key.strip()] = value.strip()
            continue
        body.append(line)
    if not body:
        raise IngestError(f"{spec.path!r}: no header row found")

    reader = csv.DictReader(body)
    cols = spec.columns
    missing_cols = [c for c in cols.values() if c not in (reader.fieldnames or [])]
    if missing_cols:
        raise IngestError(f"{spec.path!r}: missing mapped columns {missing_cols}")

    studies: list[Study] = []
    rejected: list[RowIssue] = []
    for n, row in enumerate(reader, start=2):  # header is line 1 of the body
        sid = (row.get(cols["id"]) or "").strip() or f"row{n}"
        try:
            y1 = _parse_field(row.get(cols["y1"]), spec.missing_token)
            se1 = _parse_field(row.get(cols["se1"]), spec.missing_token)
            y2 = _parse_field(row.get(cols["y2"]), spec.missing_token)
            se2 = _parse_field(row.get(cols["se2"]), spec.missing_token)
            rho_w = _parse_field(row.get(cols["rho_w"]), spec.missing_token)
        except ValueError as exc:
            rejected.append(RowIssue(n, sid, f"unparseable number: {exc}"))
            continue
        if y1 is not None and y2 is not None and rho_w is None:
            if spec.default_rho_w is None:
                rejected.append(RowIssue(n, sid, "rho_w missing on a complete row (pass an explicit default to impute)"))
                continue
            rho_w = spec.default_rho_w
        try:
            studies.append(Study(id=sid, y=(y1, y2), se=(se1, se2), rho_w=rho_w))
        except ValueError as exc:
            rejected.append(RowIssue(n, sid, str(exc)))

    if not studies:
        raise IngestError(f"{spec.path!r}: no valid studies after validation", rejected)

    names = spec.outcome_names
    scales = spec.scales
    if "outcome_names" in meta:
        parts = tuple(p.strip() for p in meta["outcome_names"].split(","))
        if len(parts) == 2:
            names = parts  # file metadata wins over spec defaults
    if "scales" in meta:
        parts = tuple(p.strip() for p in meta["scales"].split(","))
        if len(parts) == 2:
            scales = parts
    dataset = MetaDataset(tuple(studies), outcome_names=names, scales=scales)
    return IngestReport(dataset, tuple(rejected))


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_dataset(dataset: MetaDataset, path: str) -> None:
    """Canonical dataset writer; ingest() round-trips its output exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema={DATASET_SCHEMA}\n")
        fh.write(f"# outcome_names={dataset.outcome_names[0]},{dataset.outcome_names[1]}\n")
        fh.write(f"# scales={dataset.scales[0]},{dataset.scales[1]}\n")
        writer = csv.writer(fh)
        writer.writerow(list(DEFAULT_COLUMNS.values()))
        for s in dataset.studies:
            writer.writerow([
                s.id,
                _fmt(s.y[0]), _fmt(s.se[0]),
                _fmt(s.y[1]), _fmt(s.se[1]),
                _fmt(s.rho_w if s.is_complete else None),
            ])


def format_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_rows_csv(path: str, schema: str, fieldnames: list[str], rows: Iterable[dict]) -> None:
    """Emit a result table with a schema-version comment and header row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema={schema}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_cell(row.get(k)) for k in fieldnames})
