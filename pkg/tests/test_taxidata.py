import math
from datetime import datetime

import numpy as np
import pytest

from pcmas.taxidata import (
    TLC2014_SCHEMA,
    DemandModel,
    GridSpec,
    SchemaError,
    TripRecord,
    build_demand,
    filter_window,
    parse_trips,
    sample_orders,
    synthetic_demand,
)

HEADER = "Pickup datetime, Dropoff datetime, Pickup coordinate, Dropoff coordinate, Fare"
ROW1 = "2024-05-03 19:42:37, 2024-05-03 19:48:14, (-73.895073, 40.754677), (-73.915863, 40.752468), 5.5"
# Second sample row as given: its dropoff precedes its pickup.
ROW2 = "2024-05-11 18:57:04, 2024-05-03 19:23:34, (-73.986313, 40.689182), (-73.989334, 40.630630), 24"
ROW2_FIXED = ROW2.replace("2024-05-03 19:23:34", "2024-05-11 19:23:34")


def test_parse_sample_row():
    trips, rep = parse_trips([HEADER, ROW1])
    assert len(trips) == 1 and rep.rows_read == 1
    t = trips[0]
    assert t.fare == 5.5
    assert t.pickup_time == datetime(2024, 5, 3, 19, 42, 37)
    assert t.pickup_lonlat == (-73.895073, 40.754677)
    assert t.dropoff_lonlat == (-73.915863, 40.752468)


def test_integer_fare_parses_as_float():
    trips, _ = parse_trips([HEADER, ROW2_FIXED])
    assert trips[0].fare == 24.0 and isinstance(trips[0].fare, float)


def test_dropoff_before_pickup_skipped():
    trips, rep = parse_trips([HEADER, ROW1, ROW2])
    assert len(trips) == 1
    assert rep.rows_read == 2
    assert rep.skipped["dropoff_before_pickup"] == 1


def test_unparsable_rows_tallied():
    bad = "2024-05-03 19:42:37, garbage, (-73.9, 40.7), (-73.9, 40.7), 5"
    trips, rep = parse_trips([HEADER, bad, "1,2"])
    assert trips == []
    assert rep.skipped["unparsable"] == 1 and rep.skipped["field_count"] == 1


def test_missing_column_is_hard_error():
    with pytest.raises(SchemaError, match="Fare"):
        parse_trips(["Pickup datetime, Dropoff datetime, Pickup coordinate, Dropoff coordinate"])


def test_parse_idempotent_and_order_preserving():
    lines = [HEADER, ROW2_FIXED, ROW1]
    a, _ = parse_trips(lines)
    b, _ = parse_trips(lines)
    assert a == b
    assert [t.fare for t in a] == [24.0, 5.5]


def test_tlc_schema_separate_columns():
    lines = [
        "pickup_datetime,dropoff_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,"
        "dropoff_latitude,fare_amount",
        "2014-05-05 17:00:00,2014-05-05 17:10:00,-73.98,40.70,-73.95,40.72,9.5",
    ]
    trips, _ = parse_trips(lines, TLC2014_SCHEMA)
    assert trips[0].pickup_lonlat == (-73.98, 40.70) and trips[0].fare == 9.5


def _trip(ts, lonlat=(-73.95, 40.70), dest=(-73.95, 40.70), fare=10.0):
    pu = datetime.fromisoformat(ts)
    return TripRecord(pu, pu, lonlat, dest, fare)


def test_filter_window():
    sat = _trip("2024-05-11 17:00:00")
    wd_in = _trip("2024-05-03 19:59:00")
    wd_edge = _trip("2024-05-03 20:00:00")
    wd_start = _trip("2024-05-03 16:00:00")
    assert filter_window([sat, wd_in, wd_edge, wd_start]) == [wd_in, wd_start]


def test_to_cell_basic():
    g = GridSpec()
    assert g.to_cell(g.origin_lonlat) == (0, 0)
    lon0, lat0 = g.origin_lonlat
    dlat = math.degrees(1.0 / 6371.0088)
    dlon = math.degrees(1.0 / (6371.0088 * math.cos(math.radians(lat0))))
    assert g.to_cell((lon0 + dlon, lat0 + dlat)) == (0, 0)
    assert g.to_cell((lon0 - 0.01, lat0)) is None
    assert g.to_cell((lon0, lat0 + 1.0)) is None


def _haversine_km(a, b):
    lon1, lat1, lon2, lat2 = map(math.radians, (*a, *b))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * 6371.0088 * math.asin(math.sqrt(h))


def test_sample_pickup_golden_cell():
    g = GridSpec()
    lon0, lat0 = g.origin_lonlat
    p = (-73.895073, 40.754677)
    # Independent check: great-circle legs along the meridian and the origin parallel.
    north = _haversine_km((lon0, lat0), (lon0, p[1]))
    east = _haversine_km((lon0, lat0), (p[0], lat0))
    assert (int(north // 2), int(east // 2)) == (6, 4)
    assert g.to_cell(p) == (6, 4)
    assert g.cell_index(p) == 34
    # all four sample coordinates land inside the default box
    for ll in [(-73.915863, 40.752468), (-73.986313, 40.689182), (-73.989334, 40.630630)]:
        assert g.to_cell(ll) is not None


def test_build_demand_rate_and_zero_bins():
    g = GridSpec()
    trips = [_trip("2024-05-06 16:05:00") for _ in range(60)]
    model = build_demand(trips, g)
    cell = g.cell_index((-73.95, 40.70))
    assert model.rates[0, cell] == pytest.approx(1.0)
    assert model.rates.sum() == pytest.approx(1.0)
    assert model.rates[1].sum() == 0.0
    assert model.horizon == 21


def test_build_demand_drops_out_of_zone_and_averages_days():
    g = GridSpec()
    trips = [_trip("2024-05-06 17:00:00") for _ in range(30)] + \
            [_trip("2024-05-07 17:00:00") for _ in range(30)] + \
            [_trip("2024-05-07 17:00:00", dest=(-75.0, 40.0))]
    rep = None
    model = build_demand(trips, g, scale=1.0)
    assert model.n_days == 2
    assert model.rates.sum() == pytest.approx(30.0)


def test_build_demand_empty_is_zero_model(caplog):
    model = build_demand([], GridSpec())
    assert model.rates.shape == (21, 35) and not model.rates.any()
    assert "zero rates" in caplog.text


def test_sample_orders_zero_and_deterministic():
    zero = DemandModel(2, 2, 3, np.zeros((3, 4)), [[[] for _ in range(4)] for _ in range(3)])
    assert sample_orders(zero, 0, np.random.default_rng(0)) == []
    m = synthetic_demand(seed=1)
    a = sample_orders(m, 3, np.random.default_rng(7))
    b = sample_orders(m, 3, np.random.default_rng(7))
    assert a == b


def test_sample_orders_poisson_mean():
    pools = [[[(1, 5.0)], [(0, 5.0)]]]
    m = DemandModel(1, 2, 1, np.array([[1.0, 0.0]]), pools)
    rng = np.random.default_rng(0)
    counts = [len(sample_orders(m, 0, rng)) for _ in range(10_000)]
    assert 0.95 <= np.mean(counts) <= 1.05


def test_sampled_orders_in_bounds():
    m = synthetic_demand(rows=3, cols=4, hotspots={0: 3.0, 11: 2.0}, background=0.5, seed=3)
    rng = np.random.default_rng(0)
    for t in range(m.horizon):
        for o in sample_orders(m, t, rng):
            assert 0 <= o.origin < 12 and 0 <= o.destination < 12 and o.fare >= 0


def test_demand_file_roundtrip(tmp_path):
    m = synthetic_demand(seed=2)
    m.save(tmp_path / "d.json")
    back = DemandModel.load(tmp_path / "d.json")
    np.testing.assert_array_equal(back.rates, m.rates)
    np.testing.assert_array_equal(back.pools[4][2], m.pools[4][2])
    assert back.mean_fare() == pytest.approx(m.mean_fare())


def test_demand_model_validation():
    with pytest.raises(ValueError, match="empty pool"):
        DemandModel(1, 1, 1, np.ones((1, 1)), [[[]]])
    with pytest.raises(ValueError, match="nonnegative"):
        DemandModel(1, 1, 1, -np.ones((1, 1)), [[[(0, 1.0)]]])
