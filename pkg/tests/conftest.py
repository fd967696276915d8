import numpy as np
import pytest

from visitflow.domain import FlowRecord, HospitalAttributes, ODDataset, ZoneAttributes


def make_dataset(n_zones=6, n_hospitals=4, seed=0, observed=1.0, min_per_zone=1):
    """Random but valid dataset; ``observed`` is the fraction of pairs with flows."""
    rng = np.random.default_rng(seed)
    zones = tuple(
        ZoneAttributes(
            f"Z{i:03d}",
            float(rng.integers(100, 5000)),
            *(float(v) for v in rng.uniform(0, 0.6, size=7)),
            float(rng.integers(20000, 200000)),
            float(rng.uniform(0.7, 1.0)),
            float(rng.uniform(-95.8, -95.0)),
            float(rng.uniform(29.5, 30.1)),
        )
        for i in range(n_zones)
    )
    hospitals = []
    for j in range(n_hospitals):
        staffed = int(rng.integers(20, 1000))
        hospitals.append(
            HospitalAttributes(
                f"H{j:02d}",
                staffed,
                int(staffed // 8),
                staffed + int(rng.integers(0, 100)),
                float(rng.uniform(0.2, 0.9)),
                float(rng.uniform(0.2, 0.9)),
                int(rng.integers(2, 3000)),
                float(np.round(rng.uniform(1, 4.8), 1)),
                float(rng.uniform(-95.8, -95.0)),
                float(rng.uniform(29.5, 30.1)),
            )
        )
    drive = {(z.zone_id, h.hospital_id): float(rng.uniform(2, 60)) for z in zones for h in hospitals}
    flows = []
    for z in zones:
        keep = rng.random(n_hospitals) < observed
        if keep.sum() < min_per_zone:
            keep[rng.choice(n_hospitals, size=min_per_zone, replace=False)] = True
        for j in np.flatnonzero(keep):
            h = hospitals[j].hospital_id
            flows.append(FlowRecord(z.zone_id, h, float(rng.integers(1, 500)), drive[(z.zone_id, h)]))
    return ODDataset(zones, tuple(hospitals), tuple(flows), drive)


@pytest.fixture
def small_dataset():
    return make_dataset()


ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    """Store and echo one acceptance line."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
