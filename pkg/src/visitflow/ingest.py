"""Loading and validating the four input tables.

CSV layout (header names exact):

* ``zones.csv``: zone_id, total_population, pct_under18, pct_over65,
  pct_hispanic, pct_white, pct_black, pct_asian, pct_bachelor_plus,
  median_income, pct_households_vehicle, lon, lat
* ``hospitals.csv``: hospital_id, staffed_all_beds, staffed_icu_beds,
  licensed_all_beds, all_bed_occupancy, icu_occupancy, n_reviews, rating,
  lon, lat
* ``flows.csv``: origin_zone_id, hospital_id, period_label, visits
* ``drivetime.csv``: origin_zone_id, hospital_id, drive_time_min

Columns named ``pct_*`` and the two occupancy columns are percentages in
[0, 100] on disk and fractions in memory.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import astuple, dataclass, field
from pathlib import Path

from .domain import (
    PERCENT_FEATURES,
    FlowRecord,
    HospitalAttributes,
    ODDataset,
    ZoneAttributes,
)
from .errors import (
    CoverageError,
    EmptyDatasetError,
    RangeError,
    RowError,
    SchemaError,
    VisitflowError,
    WindowError,
)

log = logging.getLogger(__name__)

SCHEMAS = {
    "zones": (
        "zone_id",
        "total_population",
        "pct_under18",
        "pct_over65",
        "pct_hispanic",
        "pct_white",
        "pct_black",
        "pct_asian",
        "pct_bachelor_plus",
        "median_income",
        "pct_households_vehicle",
        "lon",
        "lat",
    ),
    "hospitals": (
        "hospital_id",
        "staffed_all_beds",
        "staffed_icu_beds",
        "licensed_all_beds",
        "all_bed_occupancy",
        "icu_occupancy",
        "n_reviews",
        "rating",
        "lon",
        "lat",
    ),
    "flows": ("origin_zone_id", "hospital_id", "period_label", "visits"),
    "drivetime": ("origin_zone_id", "hospital_id", "drive_time_min"),
}
FILENAMES = {kind: f"{kind}.csv" for kind in SCHEMAS}

_COUNT_COLUMNS = {"staffed_all_beds", "staffed_icu_beds", "licensed_all_beds", "n_reviews"}
_ID_COLUMNS = {"zone_id", "hospital_id", "origin_zone_id", "period_label"}


@dataclass(frozen=True)
class RawVisitRecord:
    origin_zone_id: str
    hospital_id: str
    period_label: str
    visits: float


@dataclass(frozen=True)
class DriveTimeRecord:
    origin_zone_id: str
    hospital_id: str
    drive_time_min: float


@dataclass
class SoftRanges:
    """Plausibility bands; values outside raise warnings only."""

    beds: tuple[float, float] = (0, 1403)
    occupancy: tuple[float, float] = (0.0, 0.92)
    reviews: tuple[float, float] = (2, 3763)
    rating: tuple[float, float] = (1.0, 4.8)
    drive_time_min: tuple[float, float] = (1.65, 69.95)


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def extend(self, other: ValidationReport) -> ValidationReport:
        self.errors.extend(other.errors)
        self.warnings.extend(other.warnings)
        self.counts.update(other.counts)
        return self

    def to_dict(self) -> dict:
        return {"ok": self.ok, "errors": self.errors, "warnings": self.warnings, "counts": self.counts}


class ValidationFailed(VisitflowError):
    def __init__(self, report: ValidationReport):
        head = report.errors[0] if report.errors else "validation failed"
        more = f" (+{len(report.errors) - 1} more)" if len(report.errors) > 1 else ""
        super().__init__(head + more)
        self.report = report


@dataclass(frozen=True)
class PeriodConfig:
    """Averaging window in whole years; labels are binned to ISO years."""

    start_year: int = 2020
    end_year: int = 2023

    @property
    def n_years(self) -> int:
        return self.end_year - self.start_year + 1


_WEEK = re.compile(r"^(\d{4})-?W(\d{2})$")
_YEAR = re.compile(r"^\d{4}$")


def period_year(label: str) -> int:
    """Map ``2021``, ``2021-W07`` or ``2021-02-15`` to its (ISO) year."""
    label = label.strip()
    if _YEAR.match(label):
        return int(label)
    m = _WEEK.match(label)
    if m:
        year, week = int(m.group(1)), int(m.group(2))
        _dt.date.fromisocalendar(year, week, 1)  # rejects week 53 in 52-week years
        return year
    try:
        return _dt.date.fromisoformat(label).isocalendar()[0]
    except ValueError:
        raise ValueError(f"unparsable period label {label!r}") from None


def _parse_cell(kind, column, raw):
    if column in _ID_COLUMNS:
        if raw == "":
            raise ValueError(f"empty {column}")
        return raw
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"{column} is not finite")
    if column in _COUNT_COLUMNS:
        if value < 0:
            raise RangeError(f"{column}={raw} is negative")
        if value != int(value):
            raise RangeError(f"{column}={raw} is not a whole count")
        return int(value)
    if column in PERCENT_FEATURES:
        return value / 100.0
    return value


_BUILDERS = {
    "zones": ZoneAttributes,
    "hospitals": HospitalAttributes,
    "flows": RawVisitRecord,
    "drivetime": DriveTimeRecord,
}


def load_table(kind: str, path) -> tuple[list, ValidationReport]:
    """Parse one CSV table against its fixed schema.

    Schema problems raise :class:`SchemaError`.  Cell and range problems are
    recorded in the report as fatal errors carrying the line number; the
    offending rows are left out of the returned list.
    """
    if kind not in SCHEMAS:
        raise SchemaError(f"unknown table kind {kind!r}")
    path = Path(path)
    schema = SCHEMAS[kind]
    report = ValidationReport()
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {','.join(schema)}") from None
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise SchemaError(f"{path}: duplicate column(s) {', '.join(dupes)}")
        missing = [c for c in schema if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        positions = [header.index(c) for c in schema]
        builder = _BUILDERS[kind]
        for record in reader:
            line = reader.line_num
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                report.errors.append(f"{path}:{line}: expected {len(header)} cells, got {len(record)}")
                continue
            try:
                values = [_parse_cell(kind, c, record[p].strip()) for c, p in zip(schema, positions)]
                if kind == "flows":
                    period_year(values[2])
                    if values[3] < 0:
                        raise RangeError(f"visits={values[3]} is negative")
                elif kind == "drivetime" and not values[2] > 0:
                    raise RangeError(f"drive_time_min={values[2]} must be positive")
                rows.append(builder(*values))
            except (ValueError, RangeError) as exc:
                report.errors.append(str(RowError(path, line, str(exc))))
    report.counts[kind] = len(rows)
    return rows, report


def aggregate_visits(records, period_config: PeriodConfig = PeriodConfig()) -> dict[tuple[str, str], float]:
    """Average yearly visits per pair over the whole window.

    Years without records count as zero, so the divisor is always the window
    length.  Pairs whose total is zero are dropped.
    """
    records = list(records)
    if not records:
        raise EmptyDatasetError("no visit records to aggregate")
    totals = defaultdict(float)
    for r in records:
        year = period_year(r.period_label)
        if not period_config.start_year <= year <= period_config.end_year:
            raise WindowError(
                f"record {r.origin_zone_id}->{r.hospital_id} period {r.period_label!r} falls outside "
                f"{period_config.start_year}-{period_config.end_year}"
            )
        totals[(r.origin_zone_id, r.hospital_id)] += r.visits
    return {pair: total / period_config.n_years for pair, total in totals.items() if total > 0}


def aggregate_flows(records, period_config: PeriodConfig = PeriodConfig(), drive_time=None) -> list[FlowRecord]:
    """:func:`aggregate_visits` joined with drive times into flow records."""
    averaged = aggregate_visits(records, period_config)
    if drive_time is None:
        raise ValueError("drive_time mapping is required to build flow records")
    out = []
    for pair, visits in averaged.items():
        if pair not in drive_time:
            raise CoverageError(*pair)
        out.append(FlowRecord(pair[0], pair[1], visits, drive_time[pair]))
    return out


def exclude_origins(dataset: ODDataset, origin_ids) -> tuple[ODDataset, int]:
    """Drop every flow leaving the listed origins; zones stay as context."""
    drop = set(origin_ids)
    kept = tuple(f for f in dataset.flows if f.origin_zone_id not in drop)
    removed = len(dataset.flows) - len(kept)
    if not kept:
        raise EmptyDatasetError(f"excluding {sorted(drop)} leaves no flows")
    if removed == 0:
        log.info("exclude_origins: no flows from %s, dataset unchanged", sorted(drop))
        return dataset, 0
    log.info("exclude_origins: removed %d flows from %d origin(s)", removed, len(drop))
    return ODDataset(dataset.zones, dataset.hospitals, kept, dataset.drive_time), removed


def _dupes(ids):
    seen, dup = set(), []
    for i in ids:
        if i in seen:
            dup.append(i)
        seen.add(i)
    return dup


def validate_dataset(dataset: ODDataset, ranges: SoftRanges = SoftRanges()) -> ValidationReport:
    report = ValidationReport(
        counts={"zones": len(dataset.zones), "hospitals": len(dataset.hospitals), "flows": len(dataset.flows)}
    )
    for kind, ids in (
        ("zone", [z.zone_id for z in dataset.zones]),
        ("hospital", [h.hospital_id for h in dataset.hospitals]),
    ):
        for d in _dupes(ids):
            report.errors.append(f"duplicate {kind} id {d!r}")
    for a, b in _dupes([(f.origin_zone_id, f.hospital_id) for f in dataset.flows]):
        report.errors.append(f"duplicate flow ({a!r}, {b!r})")

    zones, hospitals = dataset.zone_index, dataset.hospital_index
    totals = defaultdict(float)
    for f in dataset.flows:
        if f.origin_zone_id not in zones:
            report.errors.append(f"flow references unknown zone_id {f.origin_zone_id!r}")
        if f.hospital_id not in hospitals:
            report.errors.append(f"flow references unknown hospital_id {f.hospital_id!r}")
        pair = (f.origin_zone_id, f.hospital_id)
        if pair not in dataset.drive_time:
            report.errors.append(f"no drive time for flow pair {pair!r}")
        totals[f.origin_zone_id] += f.visits
    for origin, total in totals.items():
        if total <= 0:
            report.errors.append(f"origin {origin!r} has zero total outgoing visits")

    missing = sum(
        (o, h.hospital_id) not in dataset.drive_time for o in totals for h in dataset.hospitals
    )
    if missing:
        report.warnings.append(f"{missing} candidate (origin, hospital) pairs lack a drive time")

    lo, hi = ranges.drive_time_min
    outside = [t for t in dataset.drive_time.values() if not lo <= t <= hi]
    if outside:
        report.warnings.append(
            f"{len(outside)} drive times outside plausibility band [{lo}, {hi}] min "
            f"(range {min(outside):.2f}-{max(outside):.2f})"
        )

    for h in dataset.hospitals:
        tag = f"hospital {h.hospital_id!r}"
        if h.staffed_icu_beds > h.staffed_all_beds:
            report.warnings.append(f"{tag}: staffed_icu_beds {h.staffed_icu_beds} > staffed_all_beds {h.staffed_all_beds}")
        if h.staffed_all_beds > h.licensed_all_beds:
            report.warnings.append(f"{tag}: staffed_all_beds {h.staffed_all_beds} > licensed_all_beds {h.licensed_all_beds}")
        checks = (
            ("staffed_all_beds", h.staffed_all_beds, ranges.beds),
            ("staffed_icu_beds", h.staffed_icu_beds, ranges.beds),
            ("licensed_all_beds", h.licensed_all_beds, ranges.beds),
            ("all_bed_occupancy", h.all_bed_occupancy, ranges.occupancy),
            ("icu_occupancy", h.icu_occupancy, ranges.occupancy),
            ("n_reviews", h.n_reviews, ranges.reviews),
            ("rating", h.rating, ranges.rating),
        )
        for name, value, (lo, hi) in checks:
            if not lo <= value <= hi:
                report.warnings.append(f"{tag}: {name}={value} outside plausibility band [{lo}, {hi}]")
    return report


def load_dataset(
    data_dir,
    period_config: PeriodConfig = PeriodConfig(),
    exclude=(),
    ranges: SoftRanges = SoftRanges(),
) -> tuple[ODDataset, ValidationReport]:
    """load -> aggregate -> exclude -> validate.  Raises :class:`ValidationFailed` on fatal errors."""
    data_dir = Path(data_dir)
    report = ValidationReport()
    tables = {}
    for kind, name in FILENAMES.items():
        path = data_dir / name
        if not path.is_file():
            raise FileNotFoundError(f"missing input file {path}")
        tables[kind], r = load_table(kind, path)
        report.extend(r)
    if report.errors:
        raise ValidationFailed(report)

    drive_time = {}
    for d in tables["drivetime"]:
        pair = (d.origin_zone_id, d.hospital_id)
        if pair in drive_time:
            report.errors.append(f"duplicate drive time for pair {pair!r}")
        drive_time[pair] = d.drive_time_min
    if report.errors:
        raise ValidationFailed(report)

    averaged = aggregate_visits(tables["flows"], period_config)
    flows = []
    for pair, visits in averaged.items():
        if pair not in drive_time:
            report.errors.append(f"no drive time for flow pair {pair!r}")
            continue
        flows.append(FlowRecord(pair[0], pair[1], visits, drive_time[pair]))
    report.counts["aggregated_flows"] = len(flows)
    dataset = ODDataset(tuple(tables["zones"]), tuple(tables["hospitals"]), tuple(flows), drive_time)
    if exclude:
        dataset, removed = exclude_origins(dataset, exclude)
        report.counts["excluded_flows"] = removed
        if removed == 0:
            report.warnings.append(f"exclusion list {list(exclude)} matched no flows")
    report.extend(validate_dataset(dataset, ranges))
    if report.errors:
        raise ValidationFailed(report)
    return dataset, report


def dataset_to_json(dataset: ODDataset) -> str:
    """Canonical serialization, stable across runs on identical input."""
    payload = {
        "zones": [list(astuple(z)) for z in dataset.zones],
        "hospitals": [list(astuple(h)) for h in dataset.hospitals],
        "flows": [[f.origin_zone_id, f.hospital_id, f.visits, f.drive_time_min] for f in dataset.flows],
        "drive_time": sorted([o, h, t] for (o, h), t in dataset.drive_time.items()),
    }
    return json.dumps(payload, separators=(",", ":"))
