"""Trip-record ingestion and the binned stochastic demand model."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

DEMAND_FORMAT = "pcmas-demand"
DEMAND_VERSION = 1
EARTH_RADIUS_KM = 6371.0088

# Column layout of the trip-record CSV.
SAMPLE_SCHEMA = {
    "pickup_time": "Pickup datetime",
    "dropoff_time": "Dropoff datetime",
    "pickup": "Pickup coordinate",
    "dropoff": "Dropoff coordinate",
    "fare": "Fare",
}

# 2014 TLC yellow-cab export (separate longitude/latitude columns).
TLC2014_SCHEMA = {
    "pickup_time": "pickup_datetime",
    "dropoff_time": "dropoff_datetime",
    "pickup_lon": "pickup_longitude",
    "pickup_lat": "pickup_latitude",
    "dropoff_lon": "dropoff_longitude",
    "dropoff_lat": "dropoff_latitude",
    "fare": "fare_amount",
}

_TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%m/%d/%Y %I:%M:%S %p", "%m/%d/%Y %H:%M")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TripRecord:
    pickup_time: datetime
    dropoff_time: datetime
    pickup_lonlat: tuple
    dropoff_lonlat: tuple
    fare: float


@dataclass(frozen=True)
class Order:
    origin: int
    destination: int
    fare: float
    request_t: int
    order_id: int = -1


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid; rows run north from the origin, columns run east.

    The default south-west corner keeps every coordinate of the sample trips
    inside the 7x5 box.
    """

    origin_lonlat: tuple = (-74.00, 40.63)
    rows: int = 7
    cols: int = 5
    cell_km: float = 2.0

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def project_km(self, lonlat):
        """Equirectangular offset (east_km, north_km) from the origin."""
        lon0, lat0 = self.origin_lonlat
        lon, lat = lonlat
        east = math.radians(lon - lon0) * EARTH_RADIUS_KM * math.cos(math.radians(lat0))
        north = math.radians(lat - lat0) * EARTH_RADIUS_KM
        return east, north

    def to_cell(self, lonlat) -> Optional[tuple]:
        """(row, col) of a point, or None when it falls outside the box."""
        east, north = self.project_km(lonlat)
        col = math.floor(east / self.cell_km)
        row = math.floor(north / self.cell_km)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None

    def cell_index(self, lonlat) -> Optional[int]:
        rc = self.to_cell(lonlat)
        return None if rc is None else rc[0] * self.cols + rc[1]

    def describe(self) -> dict:
        return {"origin_lonlat": list(self.origin_lonlat), "rows": self.rows, "cols": self.cols,
                "cell_km": self.cell_km}


@dataclass
class IngestReport:
    rows_read: int = 0
    parsed: int = 0
    skipped: Counter = field(default_factory=Counter)
    in_window: int = 0
    in_zone: int = 0
    out_of_zone: int = 0
    days: int = 0

    def as_dict(self) -> dict:
        daily = self.in_zone / self.days if self.days else 0.0
        return {
            "rows_read": self.rows_read,
            "parsed": self.parsed,
            "skipped_total": sum(self.skipped.values()),
            "skipped": dict(sorted(self.skipped.items())),
            "in_window": self.in_window,
            "in_zone": self.in_zone,
            "out_of_zone": self.out_of_zone,
            "days": self.days,
            "in_zone_per_day": daily,
        }


def _split_fields(line: str, delimiter: str = ","):
    """Split a record on ``delimiter``, keeping "(lon, lat)" groups and quoted cells whole."""
    fields, buf, depth, quoted = [], [], 0, False
    for ch in line:
        if ch == '"':
            quoted = not quoted
            continue
        if not quoted:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth = max(depth - 1, 0)
            elif ch == delimiter and depth == 0:
                fields.append("".join(buf).strip())
                buf = []
                continue
        buf.append(ch)
    fields.append("".join(buf).strip())
    return fields


def _parse_time(s: str) -> datetime:
    try:
        return datetime.fromisoformat(s)
    except ValueError:
        pass
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(s, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparsable timestamp {s!r}")


def _parse_lonlat(s: str) -> tuple:
    parts = s.strip().strip("()").split(",")
    if len(parts) != 2:
        raise ValueError(f"bad coordinate {s!r}")
    return float(parts[0]), float(parts[1])


def _required_columns(schema: dict) -> list:
    needed = ["pickup_time", "dropoff_time", "fare"]
    for end in ("pickup", "dropoff"):
        if end in schema:
            needed.append(end)
        else:
            needed += [f"{end}_lon", f"{end}_lat"]
    missing = [k for k in needed if k not in schema]
    if missing:
        raise SchemaError(f"schema lacks mappings for {missing}")
    return needed


def parse_trips(source: Iterable[str], schema: dict = SAMPLE_SCHEMA, delimiter: str = ",",
                report: Optional[IngestReport] = None):
    """Parse delimited trip records with a header line.

    Malformed rows are skipped and tallied by reason in ``report``.
    """
    report = report if report is not None else IngestReport()
    lines = iter(source)
    header = None
    for raw in lines:
        if raw.strip():
            header = _split_fields(raw.rstrip("\r\n"), delimiter)
            break
    if header is None:
        raise SchemaError("input has no header line")
    keys = _required_columns(schema)
    missing = [schema[k] for k in keys if schema[k] not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    pos = {k: header.index(schema[k]) for k in keys}

    trips = []
    for raw in lines:
        if not raw.strip():
            continue
        report.rows_read += 1
        cells = _split_fields(raw.rstrip("\r\n"), delimiter)
        if len(cells) != len(header):
            report.skipped["field_count"] += 1
            continue
        try:
            pu = _parse_time(cells[pos["pickup_time"]])
            do = _parse_time(cells[pos["dropoff_time"]])
            if "pickup" in pos:
                pll = _parse_lonlat(cells[pos["pickup"]])
            else:
                pll = (float(cells[pos["pickup_lon"]]), float(cells[pos["pickup_lat"]]))
            if "dropoff" in pos:
                dll = _parse_lonlat(cells[pos["dropoff"]])
            else:
                dll = (float(cells[pos["dropoff_lon"]]), float(cells[pos["dropoff_lat"]]))
            fare = float(cells[pos["fare"]])
        except ValueError:
            report.skipped["unparsable"] += 1
            continue
        if do < pu:
            report.skipped["dropoff_before_pickup"] += 1
            continue
        if not (fare >= 0 and math.isfinite(fare)):
            report.skipped["bad_fare"] += 1
            continue
        trips.append(TripRecord(pu, do, pll, dll, fare))
    report.parsed += len(trips)
    return trips, report


def read_trips(path, schema: dict = SAMPLE_SCHEMA, delimiter: str = ","):
    with open(path, encoding="utf-8") as fh:
        return parse_trips(fh, schema, delimiter)


def filter_window(trips, weekday_only: bool = True, start: time = time(16, 0),
                  end: time = time(20, 0)):
    """Keep trips whose pickup falls in ``[start, end)``, weekdays only by default."""
    out = []
    for trip in trips:
        if weekday_only and trip.pickup_time.weekday() >= 5:
            continue
        if start <= trip.pickup_time.time() < end:
            out.append(trip)
    return out


@dataclass
class DemandModel:
    """Per-(timestep, cell) Poisson rates with empirical (destination, fare) pools."""

    rows: int
    cols: int
    horizon: int
    rates: np.ndarray
    pools: list
    scale_factor: float = 1.0
    n_days: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)
        if self.rates.shape != (self.horizon, self.n_cells):
            raise ValueError(f"rates shape {self.rates.shape} != {(self.horizon, self.n_cells)}")
        if np.any(self.rates < 0):
            raise ValueError("arrival rates must be nonnegative")
        self.pools = [[np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in row]
                      for row in self.pools]
        for t in range(self.horizon):
            for c in range(self.n_cells):
                pool = self.pools[t][c]
                if self.rates[t, c] > 0 and len(pool) == 0:
                    raise ValueError(f"positive rate but empty pool at t={t}, cell={c}")
                if len(pool) and (pool[:, 0].min() < 0 or pool[:, 0].max() >= self.n_cells):
                    raise ValueError(f"destination outside grid at t={t}, cell={c}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def mean_fare(self) -> float:
        """Rate-weighted mean fare; used as the default synthetic fare."""
        num = den = 0.0
        for t in range(self.horizon):
            for c in range(self.n_cells):
                pool = self.pools[t][c]
                if len(pool) and self.rates[t, c] > 0:
                    num += self.rates[t, c] * pool[:, 1].mean()
                    den += self.rates[t, c]
        return num / den if den > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "format": DEMAND_FORMAT,
            "version": DEMAND_VERSION,
            "rows": self.rows,
            "cols": self.cols,
            "horizon": self.horizon,
            "scale_factor": self.scale_factor,
            "n_days": self.n_days,
            "meta": self.meta,
            "rates": self.rates.tolist(),
            "pools": [[p.tolist() for p in row] for row in self.pools],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemandModel":
        if d.get("format") != DEMAND_FORMAT or d.get("version") != DEMAND_VERSION:
            raise ValueError(f"unsupported demand model format {d.get('format')} v{d.get('version')}")
        return cls(d["rows"], d["cols"], d["horizon"], np.array(d["rates"]), d["pools"],
                   d["scale_factor"], d["n_days"], d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DemandModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_demand(trips, grid: GridSpec, bin_minutes: int = 12, scale: float = 1 / 60,
                 horizon: int = 21, start: time = time(16, 0), n_days: Optional[int] = None,
                 report: Optional[IngestReport] = None) -> DemandModel:
    """Bin filtered trips into a demand model.

    A bin's rate is its mean daily trip count times ``scale``.  Trips with
    either endpoint outside the grid are dropped.
    """
    report = report if report is not None else IngestReport()
    counts = np.zeros((horizon, grid.n_cells))
    pools = [[[] for _ in range(grid.n_cells)] for _ in range(horizon)]
    days = set()
    for trip in trips:
        o = grid.cell_index(trip.pickup_lonlat)
        d = grid.cell_index(trip.dropoff_lonlat)
        if o is None or d is None:
            report.out_of_zone += 1
            continue
        day_start = datetime.combine(trip.pickup_time.date(), start)
        t = int((trip.pickup_time - day_start) // timedelta(minutes=bin_minutes))
        if not 0 <= t < horizon:
            report.out_of_zone += 1
            continue
        counts[t, o] += 1
        pools[t][o].append((d, trip.fare))
        days.add(trip.pickup_time.date())
    report.in_zone += int(counts.sum())
    if n_days is None:
        n_days = len(days)
    report.days = n_days
    if n_days == 0:
        log.warning("no in-zone trips; demand model has zero rates everywhere")
        rates = counts
    else:
        rates = counts / n_days * scale
    return DemandModel(grid.rows, grid.cols, horizon, rates, pools, scale, n_days,
                       {"grid": grid.describe(), "bin_minutes": bin_minutes})


def sample_orders(model: DemandModel, t: int, rng: np.random.Generator, first_id: int = 0):
    """Poisson order counts per cell; destination and fare drawn from the bin's pool."""
    if not 0 <= t < model.horizon:
        return []
    counts = rng.poisson(model.rates[t])
    orders = []
    oid = first_id
    for cell in np.flatnonzero(counts):
        pool = model.pools[t][cell]
        picks = rng.integers(len(pool), size=counts[cell])
        for k in picks:
            orders.append(Order(int(cell), int(pool[k, 0]), float(pool[k, 1]), t, oid))
            oid += 1
    return orders


def synthetic_demand(rows: int = 3, cols: int = 3, horizon: int = 21,
                     hotspots: Optional[dict] = None, background: float = 0.0,
                     base_fare: float = 5.0, fare_per_cell: float = 3.0,
                     pool_size: int = 64, seed: int = 0) -> DemandModel:
    """Hand-set demand for tests and desk-scale runs.

    ``hotspots`` maps cell index to a per-step arrival rate; every other
    cell gets ``background``.  Destinations are uniform over the grid and
    fares grow with Manhattan distance.
    """
    rng = np.random.default_rng(seed)
    n = rows * cols
    if hotspots is None:
        hotspots = {n // 2: 2.0, 0: 1.0}
    base = np.full(n, float(background))
    for cell, rate in hotspots.items():
        base[cell] = rate
    rates = np.tile(base, (horizon, 1))
    pools = []
    for _ in range(horizon):
        row = []
        for c in range(n):
            dest = rng.integers(n, size=pool_size)
            dist = np.abs(dest // cols - c // cols) + np.abs(dest % cols - c % cols)
            row.append(np.column_stack([dest, base_fare + fare_per_cell * dist]))
        pools.append(row)
    return DemandModel(rows, cols, horizon, rates, pools, 1.0, 1, {"synthetic": True, "seed": seed})
