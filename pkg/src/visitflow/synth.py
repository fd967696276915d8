"""Synthetic cities with a known gravity-law ground truth.

Each zone splits its visits over all hospitals with softmax shares of the
utility

    u = theta_size * log(1 + staffed_all_beds)
        + theta_rating * rating * switch(d)
        + theta_occupancy * all_bed_occupancy
        - beta * d

where ``d`` is drive time in minutes and ``switch(d) = tanh((d - tau) / w)``
(``sign(d - tau)`` when ``w`` is 0).  Below ``tau`` minutes better-rated
hospitals are penalized, above it they are favoured, so rating-level decay
curves cross exactly at ``tau``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import (
    DRIVE_TIME,
    FeatureStats,
    FlowRecord,
    HospitalAttributes,
    ODDataset,
    ZoneAttributes,
    assemble_candidates,
    destandardize,
    feature_index,
    normalize_per_origin,
)
from .errors import ConfigError, GenerationError, PairingError
from .evaluation import MetricTriple, metric_triple
from .ingest import SCHEMAS, PeriodConfig, RawVisitRecord, aggregate_visits
from .models.artifact import SOFTMAX, ModelArtifact, register

# Houston-area anchor for the synthetic plane
_LON0, _LAT0 = -95.37, 29.76
_KM_PER_DEG_LAT = 110.57
_KM_PER_DEG_LON = 111.32 * math.cos(math.radians(_LAT0))


@dataclass
class SynthConfig:
    n_zones: int = 200
    n_hospitals: int = 20
    extent_km: float = 45.0
    speed_km_per_min: float = 0.75
    jitter: float = 0.1
    theta_size: float = 0.5
    theta_rating: float = 0.3
    theta_occupancy: float = 1.0
    threshold_min: float = 19.0
    switch_width_min: float = 2.0
    beta: float = 0.08
    outflow: float = 100.0
    noise: str = "multinomial"
    sample_count: int = 200
    start_year: int = 2020
    end_year: int = 2023
    seed: int = 0

    def validate(self):
        if self.n_zones < 1 or self.n_hospitals < 1:
            raise ConfigError("n_zones and n_hospitals must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.threshold_min < 0 or self.switch_width_min < 0:
            raise ConfigError("threshold_min and switch_width_min must be >= 0")
        if self.noise not in ("none", "multinomial"):
            raise ConfigError("noise must be 'none' or 'multinomial'")
        if self.noise == "multinomial" and self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.outflow <= 0:
            raise ConfigError("outflow must be positive")
        if self.end_year < self.start_year:
            raise ConfigError("end_year precedes start_year")
        return self


def rating_switch(d, threshold, width):
    d = np.asarray(d, dtype=float)
    if width > 0:
        return np.tanh((d - threshold) / width)
    return np.sign(d - threshold)


def utility(beds, rating, occupancy, drive, cfg: SynthConfig):
    return (
        cfg.theta_size * np.log1p(beds)
        + cfg.theta_rating * rating * rating_switch(drive, cfg.threshold_min, cfg.switch_width_min)
        + cfg.theta_occupancy * occupancy
        - cfg.beta * drive
    )


def _softmax_rows(u):
    e = np.exp(u - u.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class GroundTruth:
    config: SynthConfig
    zone_ids: list
    hospital_ids: list
    shares: np.ndarray  # (n_zones, n_hospitals)

    def share(self, zone_id, hospital_id) -> float:
        return float(self.shares[self._zi[zone_id], self._hi[hospital_id]])

    def __post_init__(self):
        self._zi = {z: i for i, z in enumerate(self.zone_ids)}
        self._hi = {h: i for i, h in enumerate(self.hospital_ids)}

    def entropy(self) -> np.ndarray:
        p = self.shares
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)


@dataclass(eq=False)
class City:
    dataset: ODDataset
    truth: GroundTruth
    records: list


def _pct(rng_values):
    # stored exactly as the loader will reconstruct it from a percent string
    return [round(float(v) * 100, 2) / 100 for v in rng_values]


def _build(cfg: SynthConfig) -> City:
    cfg = SynthConfig(**asdict(cfg)).validate()
    rng = np.random.default_rng(cfg.seed)
    nz, nh = cfg.n_zones, cfg.n_hospitals
    half = cfg.extent_km / 2
    zxy = rng.uniform(-half, half, size=(nz, 2))
    hxy = np.clip(rng.normal(0.0, cfg.extent_km / 4, size=(nh, 2)), -half, half)
    pts = np.vstack([zxy, hxy])
    if np.ptp(pts, axis=0).max() == 0:
        raise GenerationError("all zones and hospitals coincide")

    def lonlat(xy):
        lon = np.round(_LON0 + xy[:, 0] / _KM_PER_DEG_LON, 6)
        lat = np.round(_LAT0 + xy[:, 1] / _KM_PER_DEG_LAT, 6)
        return lon, lat

    zlon, zlat = lonlat(zxy)
    hlon, hlat = lonlat(hxy)

    zone_ids = [f"Z{i:05d}" for i in range(nz)]
    hospital_ids = [f"H{j:03d}" for j in range(nh)]

    pop = rng.integers(300, 4000, size=nz)
    under18 = _pct(rng.beta(4, 12, size=nz))
    over65 = _pct(rng.beta(2, 14, size=nz))
    race = rng.dirichlet([2.0, 3.0, 1.5, 0.6], size=nz)
    bachelor = _pct(rng.beta(2, 4, size=nz))
    income = np.round(rng.lognormal(math.log(60000), 0.5, size=nz), 0)
    vehicle = _pct(rng.beta(12, 1.5, size=nz))
    zones = tuple(
        ZoneAttributes(
            zone_ids[i], float(pop[i]), under18[i], over65[i],
            *_pct(race[i]), bachelor[i], float(income[i]), vehicle[i], float(zlon[i]), float(zlat[i]),
        )
        for i in range(nz)
    )

    staffed = rng.integers(20, 1311, size=nh)
    licensed = np.minimum(staffed + rng.integers(0, 300, size=nh), 1403)
    icu = np.minimum(np.round(staffed * rng.uniform(0.03, 0.15, size=nh)).astype(int), 162)
    occ = _pct(rng.uniform(0.30, 0.86, size=nh))
    icu_occ = _pct(rng.uniform(0.20, 0.92, size=nh))
    reviews = rng.integers(2, 3764, size=nh)
    rating = np.round(rng.uniform(1.0, 4.8, size=nh), 1)
    hospitals = tuple(
        HospitalAttributes(
            hospital_ids[j], int(staffed[j]), int(icu[j]), int(licensed[j]), occ[j], icu_occ[j],
            int(reviews[j]), float(rating[j]), float(hlon[j]), float(hlat[j]),
        )
        for j in range(nh)
    )

    dist = np.linalg.norm(zxy[:, None, :] - hxy[None, :, :], axis=2)
    drive = dist / cfg.speed_km_per_min * rng.lognormal(0.0, cfg.jitter, size=(nz, nh))
    drive = np.round(np.maximum(drive, 0.5), 2)
    drive_time = {(zone_ids[i], hospital_ids[j]): float(drive[i, j]) for i in range(nz) for j in range(nh)}

    u = utility(staffed[None, :].astype(float), rating[None, :], np.array(occ)[None, :], drive, cfg)
    shares = _softmax_rows(u)
    truth = GroundTruth(cfg, zone_ids, hospital_ids, shares)

    years = list(range(cfg.start_year, cfg.end_year + 1))
    records = []
    if cfg.noise == "none":
        visits = cfg.outflow * shares
        for i in range(nz):
            for j in range(nh):
                for y in years:
                    records.append(RawVisitRecord(zone_ids[i], hospital_ids[j], str(y), float(visits[i, j])))
    else:
        counts = np.stack([rng.multinomial(cfg.sample_count, shares[i]) for i in range(nz)])
        per_year = rng.multinomial(counts.reshape(-1), [1.0 / len(years)] * len(years)).reshape(nz, nh, len(years))
        for i, j in zip(*np.nonzero(counts)):
            for k, y in enumerate(years):
                if per_year[i, j, k]:
                    records.append(RawVisitRecord(zone_ids[i], hospital_ids[j], str(y), int(per_year[i, j, k])))

    averaged = aggregate_visits(records, PeriodConfig(cfg.start_year, cfg.end_year))
    flows = tuple(FlowRecord(o, h, v, drive_time[(o, h)]) for (o, h), v in averaged.items())
    return City(ODDataset(zones, hospitals, flows, drive_time), truth, records)


def generate_city(config: SynthConfig = SynthConfig()) -> tuple[ODDataset, GroundTruth]:
    city = _build(config)
    return city.dataset, city.truth


def oracle_report(truth: GroundTruth, dataset: ODDataset) -> MetricTriple:
    """Metrics of the true shares against the observed shares of ``dataset``."""
    observed = normalize_per_origin(dataset.flows)
    y, y_hat = [], []
    for pair, share in observed.items():
        try:
            y_hat.append(truth.share(*pair))
        except KeyError:
            raise PairingError(f"flow pair {pair!r} is not part of the ground truth") from None
        y.append(share)
    return metric_triple(np.array(y), np.array(y_hat))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _percent_row(obj, schema):
    out = []
    for col in schema:
        v = getattr(obj, col)
        if col.startswith("pct_") or col.endswith("occupancy"):
            v = round(v * 100, 2)
        out.append(v)
    return out


def write_city(config: SynthConfig, out_dir) -> dict:
    """Write the four ingest CSVs plus ``truth.csv`` and ``oracle.json``; return the oracle triple."""
    city = _build(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = city.dataset, city.truth
    _write_csv(out / "zones.csv", SCHEMAS["zones"], [_percent_row(z, SCHEMAS["zones"]) for z in ds.zones])
    _write_csv(
        out / "hospitals.csv", SCHEMAS["hospitals"], [_percent_row(h, SCHEMAS["hospitals"]) for h in ds.hospitals]
    )
    _write_csv(
        out / "flows.csv",
        SCHEMAS["flows"],
        [(r.origin_zone_id, r.hospital_id, r.period_label, r.visits) for r in city.records],
    )
    _write_csv(out / "drivetime.csv", SCHEMAS["drivetime"], [(o, h, t) for (o, h), t in ds.drive_time.items()])
    _write_csv(
        out / "truth.csv",
        ("origin_zone_id", "hospital_id", "true_share"),
        [
            (z, h, float(truth.shares[i, j]))
            for i, z in enumerate(truth.zone_ids)
            for j, h in enumerate(truth.hospital_ids)
        ],
    )
    oracle = oracle_report(truth, ds).to_dict()
    (out / "oracle.json").write_text(
        json.dumps({"config": asdict(truth.config), "achievable": oracle}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return oracle


# ---------------------------------------------------------------------------
# the ground truth as a model artifact


def truth_artifact(truth: GroundTruth, dataset: ODDataset) -> ModelArtifact:
    """Wrap the generating utility so interpretation tools can probe the true model."""
    cand = assemble_candidates(dataset)
    cfg = truth.config
    return ModelArtifact(
        "gravity_truth",
        {},
        FeatureStats.fit(cand.X),
        {
            "objective": SOFTMAX,
            "synth_config": asdict(cfg),
            "reference_competitors": float(len(dataset.hospitals) - 1),
        },
    )


_BEDS = feature_index("staffed_all_beds")
_RATING = feature_index("rating")
_OCC = feature_index("all_bed_occupancy")


def _score_truth(artifact, table_std):
    cfg = SynthConfig(**artifact.metadata["synth_config"])
    X = destandardize(table_std.X, artifact.stats)
    return utility(X[:, _BEDS], X[:, _RATING], X[:, _OCC], X[:, DRIVE_TIME], cfg)


register("gravity_truth", _score_truth)


# ---------------------------------------------------------------------------
# ingest fixture at the scale of the real service region

AIRPORT_ORIGINS = ("482019801001", "482019801002")


def write_region_fixture(out_dir, seed: int = 0) -> dict:
    """2,830 zones, 35 hospitals and 16,783 raw flows, 53 of them leaving the airport block groups.

    Aggregated four-year averages span exactly 4 to 2,774.75 visits.
    Returns counts describing what was written.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_zones, n_hosp = 2830, 35
    zone_ids = list(AIRPORT_ORIGINS) + [f"48201{i:07d}" for i in range(n_zones - len(AIRPORT_ORIGINS))]
    hosp_ids = [f"HOSP{j:02d}" for j in range(n_hosp)]

    zone_rows = []
    for z in zone_ids:
        zone_rows.append(
            [z, int(rng.integers(200, 5000))]
            + [round(float(v), 2) for v in rng.uniform(0, 60, size=7)]
            + [int(rng.integers(15000, 250000)), round(float(rng.uniform(70, 100)), 2)]
            + [round(float(rng.uniform(-95.8, -95.0)), 6), round(float(rng.uniform(29.5, 30.1)), 6)]
        )
    _write_csv(out / "zones.csv", SCHEMAS["zones"], zone_rows)
    hosp_rows = []
    for h in hosp_ids:
        staffed = int(rng.integers(0, 1311))
        hosp_rows.append(
            [h, staffed, int(min(162, staffed // 8)), int(min(1403, staffed + rng.integers(4, 100))),
             round(float(rng.uniform(0, 86)), 2), round(float(rng.uniform(0, 92)), 2),
             int(rng.integers(2, 3764)), round(float(rng.uniform(1, 4.8)), 1),
             round(float(rng.uniform(-95.8, -95.0)), 6), round(float(rng.uniform(29.5, 30.1)), 6)]
        )
    _write_csv(out / "hospitals.csv", SCHEMAS["hospitals"], hosp_rows)
    _write_csv(
        out / "drivetime.csv",
        SCHEMAS["drivetime"],
        [(z, h, round(float(rng.uniform(1.65, 69.95)), 2)) for z in zone_ids for h in hosp_ids],
    )

    # 35 + 18 airport flows; the other 2,828 zones carry 16,730 flows (2,590 x 6 + 238 x 5)
    per_zone = [35, 18] + [6] * 2590 + [5] * 238
    pairs = []
    for z, k in zip(zone_ids, per_zone):
        for j in sorted(rng.choice(n_hosp, size=k, replace=False)):
            pairs.append((z, hosp_ids[j]))
    totals = rng.integers(16, 2000, size=len(pairs))
    totals[60], totals[-1] = 16, 11099  # averages 4 and 2,774.75, both outside the airport block groups
    raw = []
    for (z, h), total in zip(pairs, totals):
        split = rng.multinomial(int(total), [0.25] * 4)
        for k, year in enumerate(range(2020, 2024)):
            if split[k]:
                raw.append((z, h, str(year), int(split[k])))
    _write_csv(out / "flows.csv", SCHEMAS["flows"], raw)
    return {"zones": n_zones, "hospitals": n_hosp, "flows": len(pairs), "excluded_origins": list(AIRPORT_ORIGINS)}
