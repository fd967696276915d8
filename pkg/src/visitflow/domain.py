"""Zones, hospitals, flows and the 22-column feature layout.

Feature order is frozen: the nine hospital attributes, then the twelve zone
attributes, then drive time in minutes.  Percent-type quantities are held as
fractions in [0, 1] everywhere inside the package.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .errors import CoverageError, DegenerateOriginError, RangeError, ShapeError

HOSPITAL_FEATURES = (
    "staffed_all_beds",
    "staffed_icu_beds",
    "licensed_all_beds",
    "all_bed_occupancy",
    "icu_occupancy",
    "n_reviews",
    "rating",
    "hospital_lon",
    "hospital_lat",
)
ZONE_FEATURES = (
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
    "zone_lon",
    "zone_lat",
)
FEATURE_NAMES = HOSPITAL_FEATURES + ZONE_FEATURES + ("drive_time_min",)
N_FEATURES = len(FEATURE_NAMES)

HOSPITAL_SLICE = slice(0, len(HOSPITAL_FEATURES))
ZONE_SLICE = slice(len(HOSPITAL_FEATURES), len(HOSPITAL_FEATURES) + len(ZONE_FEATURES))
DRIVE_TIME = N_FEATURES - 1

# fields stored as fractions but reported (and read from CSV) as percentages
PERCENT_FEATURES = frozenset(
    {
        "all_bed_occupancy",
        "icu_occupancy",
        "pct_under18",
        "pct_over65",
        "pct_hispanic",
        "pct_white",
        "pct_black",
        "pct_asian",
        "pct_bachelor_plus",
        "pct_households_vehicle",
    }
)

RATING_CEILING = 5.0


def feature_index(name: str) -> int:
    try:
        return FEATURE_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown feature {name!r}") from None


def _check_fraction(name, value):
    if not 0.0 <= value <= 1.0:
        raise RangeError(f"{name}={value!r} outside [0, 1]")


def _check_nonneg(name, value):
    if not value >= 0:
        raise RangeError(f"{name}={value!r} is negative")


def _check_coords(lon, lat):
    if not -180.0 <= lon <= 180.0:
        raise RangeError(f"lon={lon!r} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise RangeError(f"lat={lat!r} outside [-90, 90]")


@dataclass(frozen=True)
class ZoneAttributes:
    zone_id: str
    total_population: float
    pct_under18: float
    pct_over65: float
    pct_hispanic: float
    pct_white: float
    pct_black: float
    pct_asian: float
    pct_bachelor_plus: float
    median_income: float
    pct_households_vehicle: float
    lon: float
    lat: float

    def __post_init__(self):
        _check_nonneg("total_population", self.total_population)
        _check_nonneg("median_income", self.median_income)
        for f in fields(self):
            if f.name.startswith("pct_"):
                _check_fraction(f.name, getattr(self, f.name))
        _check_coords(self.lon, self.lat)

    def vector(self) -> list[float]:
        return [
            self.total_population,
            self.pct_under18,
            self.pct_over65,
            self.pct_hispanic,
            self.pct_white,
            self.pct_black,
            self.pct_asian,
            self.pct_bachelor_plus,
            self.median_income,
            self.pct_households_vehicle,
            self.lon,
            self.lat,
        ]


@dataclass(frozen=True)
class HospitalAttributes:
    hospital_id: str
    staffed_all_beds: int
    staffed_icu_beds: int
    licensed_all_beds: int
    all_bed_occupancy: float
    icu_occupancy: float
    n_reviews: int
    rating: float
    lon: float
    lat: float

    def __post_init__(self):
        for name in ("staffed_all_beds", "staffed_icu_beds", "licensed_all_beds", "n_reviews"):
            value = getattr(self, name)
            _check_nonneg(name, value)
            if value != int(value):
                raise RangeError(f"{name}={value!r} is not a whole count")
        _check_fraction("all_bed_occupancy", self.all_bed_occupancy)
        _check_fraction("icu_occupancy", self.icu_occupancy)
        if not 0.0 <= self.rating <= RATING_CEILING:
            raise RangeError(f"rating={self.rating!r} outside [0, {RATING_CEILING}]")
        _check_coords(self.lon, self.lat)

    def vector(self) -> list[float]:
        return [
            float(self.staffed_all_beds),
            float(self.staffed_icu_beds),
            float(self.licensed_all_beds),
            self.all_bed_occupancy,
            self.icu_occupancy,
            float(self.n_reviews),
            self.rating,
            self.lon,
            self.lat,
        ]


@dataclass(frozen=True)
class FlowRecord:
    origin_zone_id: str
    hospital_id: str
    visits: float
    drive_time_min: float

    def __post_init__(self):
        _check_nonneg("visits", self.visits)
        if not self.drive_time_min > 0:
            raise RangeError(f"drive_time_min={self.drive_time_min!r} must be positive")


@dataclass(frozen=True)
class ODDataset:
    """A spatial-interaction instance.

    Construction does not check referential integrity; use
    :func:`visitflow.ingest.validate_dataset` for that.  ``drive_time`` maps
    ``(zone_id, hospital_id)`` to minutes.
    """

    zones: tuple[ZoneAttributes, ...]
    hospitals: tuple[HospitalAttributes, ...]
    flows: tuple[FlowRecord, ...]
    drive_time: dict = field(default_factory=dict, compare=False)

    @cached_property
    def zone_index(self) -> dict[str, int]:
        return {z.zone_id: i for i, z in enumerate(self.zones)}

    @cached_property
    def hospital_index(self) -> dict[str, int]:
        return {h.hospital_id: i for i, h in enumerate(self.hospitals)}

    @cached_property
    def zone_matrix(self) -> np.ndarray:
        return np.array([z.vector() for z in self.zones], dtype=float).reshape(-1, len(ZONE_FEATURES))

    @cached_property
    def hospital_matrix(self) -> np.ndarray:
        return np.array([h.vector() for h in self.hospitals], dtype=float).reshape(
            -1, len(HOSPITAL_FEATURES)
        )

    def origins(self) -> list[str]:
        """Origins with at least one flow, in order of first appearance."""
        return list(dict.fromkeys(f.origin_zone_id for f in self.flows))


@dataclass(frozen=True)
class FeatureRow:
    origin_zone_id: str
    hospital_id: str
    features: tuple[float, ...]
    target_share: float


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Column-oriented collection of :class:`FeatureRow`.

    ``X`` has shape ``(n, 22)`` in :data:`FEATURE_NAMES` order.
    """

    origin_ids: np.ndarray
    hospital_ids: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = len(self.origin_ids)
        if self.X.shape != (n, N_FEATURES) or len(self.hospital_ids) != n or self.y.shape != (n,):
            raise ShapeError(
                f"inconsistent table shapes: X{self.X.shape}, y{self.y.shape}, "
                f"{n} origins, {len(self.hospital_ids)} hospitals"
            )

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> FeatureRow:
        return FeatureRow(
            str(self.origin_ids[i]), str(self.hospital_ids[i]), tuple(self.X[i].tolist()), float(self.y[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> FeatureTable:
        index = np.asarray(index)
        return FeatureTable(self.origin_ids[index], self.hospital_ids[index], self.X[index], self.y[index])

    def with_X(self, X) -> FeatureTable:
        return FeatureTable(self.origin_ids, self.hospital_ids, X, self.y)

    def pair_keys(self) -> list[tuple[str, str]]:
        return list(zip(self.origin_ids.tolist(), self.hospital_ids.tolist()))

    @classmethod
    def from_rows(cls, rows) -> FeatureTable:
        rows = list(rows)
        X = np.array([r.features for r in rows], dtype=float).reshape(-1, N_FEATURES)
        return cls(
            np.array([r.origin_zone_id for r in rows], dtype=object),
            np.array([r.hospital_id for r in rows], dtype=object),
            X,
            np.array([r.target_share for r in rows], dtype=float),
        )


def origin_groups(origin_ids) -> tuple[np.ndarray, np.ndarray]:
    """Stable order grouping equal origins together, and segment starts into it."""
    _, codes = np.unique(np.asarray(origin_ids, dtype=str), return_inverse=True)
    order = np.argsort(codes, kind="stable")
    sorted_codes = codes[order]
    starts = np.flatnonzero(np.r_[True, sorted_codes[1:] != sorted_codes[:-1]]) if len(codes) else np.zeros(0, int)
    return order, starts


def normalize_per_origin(flows) -> dict[tuple[str, str], float]:
    """Share of each origin's outgoing visits going to each hospital."""
    by_origin = defaultdict(list)
    for f in flows:
        by_origin[f.origin_zone_id].append(f)
    shares = {}
    for origin, group in by_origin.items():
        total = math.fsum(f.visits for f in group)
        if total <= 0:
            raise DegenerateOriginError(origin)
        for f in group:
            shares[(origin, f.hospital_id)] = f.visits / total
    return shares


def _pair_matrix(dataset: ODDataset, origins, hospitals) -> np.ndarray:
    zi = dataset.zone_index
    hi = dataset.hospital_index
    zrows = np.fromiter((zi[o] for o in origins), dtype=np.intp, count=len(origins))
    hrows = np.fromiter((hi[h] for h in hospitals), dtype=np.intp, count=len(hospitals))
    drive = np.empty(len(origins))
    dt = dataset.drive_time
    for k, pair in enumerate(zip(origins, hospitals)):
        try:
            drive[k] = dt[pair]
        except KeyError:
            raise CoverageError(*pair) from None
    return np.hstack(
        [dataset.hospital_matrix[hrows], dataset.zone_matrix[zrows], drive[:, None]]
    ).reshape(-1, N_FEATURES)


def assemble_features(dataset: ODDataset) -> FeatureTable:
    """One row per observed flow, targets normalized per origin."""
    shares = normalize_per_origin(dataset.flows)
    origins = [f.origin_zone_id for f in dataset.flows]
    hospitals = [f.hospital_id for f in dataset.flows]
    X = _pair_matrix(dataset, origins, hospitals)
    y = np.array([shares[(o, h)] for o, h in zip(origins, hospitals)], dtype=float)
    return FeatureTable(np.array(origins, dtype=object), np.array(hospitals, dtype=object), X, y)


def assemble_candidates(dataset: ODDataset, origins=None) -> FeatureTable:
    """Closed choice sets: every hospital for every origin, unobserved pairs at share 0.

    Rows are ordered by origin (first appearance in the flows unless ``origins``
    is given), then by hospital order in the dataset.
    """
    shares = normalize_per_origin(dataset.flows)
    if origins is None:
        origins = dataset.origins()
    hospital_ids = [h.hospital_id for h in dataset.hospitals]
    o_col = [o for o in origins for _ in hospital_ids]
    h_col = hospital_ids * len(origins)
    X = _pair_matrix(dataset, o_col, h_col)
    y = np.array([shares.get(pair, 0.0) for pair in zip(o_col, h_col)], dtype=float)
    return FeatureTable(np.array(o_col, dtype=object), np.array(h_col, dtype=object), X, y)


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Per-feature location and scale, fitted on training rows only."""

    mean: np.ndarray
    std: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std <= 1e-12 * np.maximum(1.0, np.abs(self.mean))

    @classmethod
    def fit(cls, X) -> FeatureStats:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ShapeError(f"cannot fit feature statistics on array of shape {X.shape}")
        return cls(X.mean(axis=0), X.std(axis=0), X.min(axis=0), X.max(axis=0))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean", "std", "minimum", "maximum")}

    @classmethod
    def from_dict(cls, d) -> FeatureStats:
        return cls(*(np.asarray(d[k], dtype=float) for k in ("mean", "std", "minimum", "maximum")))


def _scale(stats: FeatureStats) -> np.ndarray:
    return np.where(stats.constant, 1.0, stats.std)


def standardize(rows, stats: FeatureStats):
    """z-score features; constant features map to 0.  Accepts a table or an array."""
    X = rows.X if isinstance(rows, FeatureTable) else np.asarray(rows, dtype=float)
    if X.shape[-1] != len(stats.mean):
        raise ShapeError(f"rows have {X.shape[-1]} features, statistics have {len(stats.mean)}")
    Z = (X - stats.mean) / _scale(stats)
    Z = np.where(stats.constant, 0.0, Z)
    return rows.with_X(Z) if isinstance(rows, FeatureTable) else Z


def destandardize(rows, stats: FeatureStats):
    """Inverse of :func:`standardize` for non-constant features (constants return their mean)."""
    Z = rows.X if isinstance(rows, FeatureTable) else np.asarray(rows, dtype=float)
    if Z.shape[-1] != len(stats.mean):
        raise ShapeError(f"rows have {Z.shape[-1]} features, statistics have {len(stats.mean)}")
    X = Z * _scale(stats) + stats.mean
    X = np.where(stats.constant, stats.mean, X)
    return rows.with_X(X) if isinstance(rows, FeatureTable) else X
