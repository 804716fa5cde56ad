import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcmas.repoenv import (
    Composition,
    EpisodeLog,
    RepositioningEnv,
    RewardParams,
    clamp_move,
    compute_metrics,
    demand_supply_ratio,
    episode_metrics,
    match_cell,
    objective,
    reward_of_match,
    service_charge,
    trip_steps,
)
from pcmas.taxidata import DemandModel, synthetic_demand


def one_cell_model(rate, fare=10.0, horizon=21):
    return DemandModel(1, 1, horizon, np.full((horizon, 1), rate),
                       [[[(0, fare)]] for _ in range(horizon)])


def test_reset_compositions_and_determinism():
    m = synthetic_demand(seed=0)
    env = RepositioningEnv(m, Composition(0, 6), RewardParams())
    s = env.reset(3)
    assert s.controllable.all() and s.t == 0 and s.open_orders == []
    a = RepositioningEnv(m, Composition(2, 4), RewardParams()).reset(9)
    b = RepositioningEnv(m, Composition(2, 4), RewardParams()).reset(9)
    np.testing.assert_array_equal(a.cell, b.cell)
    with pytest.raises(ValueError):
        RepositioningEnv(m, Composition(0, 0), RewardParams())


def test_no_hiring_cost_without_controllable():
    m = synthetic_demand(seed=0)
    env = RepositioningEnv(m, Composition(5, 0), RewardParams(hourly_rate=8.0))
    env.reset(0)
    while not env.done:
        env.step(np.zeros(5, dtype=int))
    assert env.metrics().hiring_cost == 0.0


def test_single_driver_single_order_matched():
    env = RepositioningEnv(one_cell_model(0.0), Composition(1, 0), RewardParams())
    env.reset(0)
    env.demand = DemandModel(1, 1, 21, np.zeros((21, 1)), [[[(0, 7.0)]] for _ in range(21)])
    env.demand.rates[0, 0] = 50.0  # Poisson(50) almost surely >= 1
    _, r, ev = env.step([0])
    assert len(ev.matches) == 1 and r[0] == 7.0
    assert env.state.remaining[0] == 1


def test_busy_drivers_only_advance():
    env = RepositioningEnv(one_cell_model(0.0), Composition(2, 0), RewardParams())
    env.reset(0)
    env.state.remaining[:] = 3
    env.state.destination[:] = 0
    _, r, _ = env.step(np.zeros(2, dtype=int))
    assert not r.any() and list(env.state.remaining) == [2, 2]


def test_corner_moves_clamped():
    assert clamp_move(0, 2, 3, 3) == 0  # south off the bottom row
    assert clamp_move(0, 4, 3, 3) == 0  # west off the left column
    assert clamp_move(0, 1, 3, 3) == 3
    assert clamp_move(8, 3, 3, 3) == 8


def test_action_length_mismatch_rejected():
    env = RepositioningEnv(synthetic_demand(seed=0), Composition(3, 0), RewardParams())
    env.reset(0)
    with pytest.raises(ValueError):
        env.step([0, 0])
    with pytest.raises(ValueError):
        env.step([0, 9, 0])


def test_match_cell_counts():
    rng = np.random.default_rng(0)
    assert len(match_cell([1, 2, 3], ["o"], rng)) == 1
    assert match_cell([1, 2], [], rng) == []
    pairs = match_cell([1, 2], ["a", "b"], rng)
    assert sorted(d for d, _ in pairs) == [1, 2] and sorted(o for _, o in pairs) == ["a", "b"]


def test_demand_supply_ratio():
    assert demand_supply_ratio(3, 6) == 0.5
    assert demand_supply_ratio(4, 2) == 2.0
    assert demand_supply_ratio(0, 5) == 0.0
    assert demand_supply_ratio(2, 0) == math.inf


ALPHAS = [Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(7, 10), Fraction(1)]
DSS = [Fraction(0), Fraction(3, 5), Fraction(1), Fraction(6, 5), Fraction(3, 2)]


@pytest.mark.parametrize("alpha", ALPHAS)
@pytest.mark.parametrize("ds", DSS)
def test_service_charge_exhaustive(alpha, ds):
    expected = alpha * (1 - ds) if ds <= 1 else Fraction(0)
    assert service_charge(alpha, ds) == expected
    assert service_charge(float(alpha), float(ds)) == pytest.approx(float(expected), abs=1e-12)


def test_service_charge_examples():
    assert service_charge(0.5, 0.6) == pytest.approx(0.2, abs=1e-12)
    assert service_charge(1.0, 0.0) == 1.0
    assert service_charge(0.7, 1.5) == 0.0


@pytest.mark.parametrize("alpha", ALPHAS)
@pytest.mark.parametrize("ds", DSS)
def test_reward_of_match_exhaustive(alpha, ds):
    c = Fraction(10)
    sc = alpha * (1 - ds) if ds <= 1 else 0
    assert reward_of_match(True, 24, alpha, c, ds) == c * (1 - sc)
    assert reward_of_match(False, 24, alpha, c, ds) == 24


def test_reward_examples():
    assert reward_of_match(False, 24.0, 0.3, 10.0, 0.5) == 24.0
    assert reward_of_match(True, 24.0, 1.0, 10.0, 0.0) == 0.0
    assert reward_of_match(True, 24.0, 0.4, 10.0, 1.2) == 10.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_service_charge_monotone(alpha, d1, d2):
    lo, hi = sorted((d1, d2))
    assert service_charge(alpha, hi) <= service_charge(alpha, lo)
    assert 0.0 <= service_charge(alpha, lo) <= alpha
    assert service_charge(alpha, 1.0 + d1 + 1e-9) == 0.0


def test_metrics_examples():
    m = compute_metrics(7, 100.0, 10, 200.0, n_c=0, hourly_rate=5.0)
    # correctly rounded division: exact equality against the rational value
    assert m.orr == float(Fraction(7, 10)) and m.hiring_cost == 0.0
    m = compute_metrics(7, 100, 10, 200, n_c=1, hourly_rate=5, episode_hours=4)
    assert m.hiring_cost == 20 and m.pr == float(Fraction(2, 5))
    assert compute_metrics(0, 0, 0, 0, 0, 3.0).orr == 0
    assert compute_metrics(0, 0, 0, 0, 0, 3.0).pr == 1


def test_objective_examples():
    m = compute_metrics(1, 0.5, 2, 2.0, 0, 0.0)  # ORR 0.5, PR 0.25
    assert objective(m, 1.0) == m.orr
    assert objective(m, 0.0) == m.pr
    assert objective(m, 0.6) == pytest.approx(0.40, abs=1e-12)
    with pytest.raises(ValueError):
        objective(m, 1.5)


def test_episode_metrics_from_log():
    log = EpisodeLog(n_c=2)
    log.order_rows = [(0, 0, 0, 1, 10.0, 3), (0, 1, 0, 1, 30.0, -1), (1, 2, 1, 0, 60.0, 1)]
    m = episode_metrics(log, RewardParams(hourly_rate=1.0))
    assert m.served_demand == 2 and m.total_requests == 3
    assert m.served_fares == 70.0 and m.hiring_cost == 8.0
    assert m.pr == pytest.approx(62.0 / 100.0, abs=1e-12)


def run_random_episode(seed, comp=Composition(4, 3), demand=None):
    demand = demand or synthetic_demand(seed=1, background=0.3)
    env = RepositioningEnv(demand, comp, RewardParams(alpha=0.5, synthetic_fare_c=8.0))
    env.reset(seed)
    rng = np.random.default_rng(seed)
    trace = []
    while not env.done:
        prev_remaining = env.state.remaining.copy()
        s, r, ev = env.step(rng.integers(5, size=comp.total))
        assert s.n_agents == comp.total
        was_busy = prev_remaining > 0
        cont = was_busy & (s.remaining > 0)
        assert np.all(s.remaining[cont] < prev_remaining[cont])
        trace.append((s.cell.copy(), r.copy()))
    return env, trace


def test_episode_invariants_and_log_recompute():
    env, _ = run_random_episode(5)
    m = env.metrics()
    assert m.served_demand <= m.total_requests
    assert m.served_fares <= m.total_fares + 1e-9
    again = episode_metrics(env.log, env.params)
    assert again.served_demand == m.served_demand
    assert again.served_fares == pytest.approx(m.served_fares)
    assert again.total_fares == pytest.approx(m.total_fares)


def test_step_deterministic():
    _, a = run_random_episode(11)
    _, b = run_random_episode(11)
    for (ca, ra), (cb, rb) in zip(a, b):
        np.testing.assert_array_equal(ca, cb)
        np.testing.assert_array_equal(ra, rb)


def test_zero_demand_episode():
    zero = DemandModel(2, 2, 21, np.zeros((21, 4)), [[[] for _ in range(4)] for _ in range(21)])
    env, _ = run_random_episode(0, Composition(2, 1), zero)
    m = env.metrics()
    assert m.orr == 0 and m.served_fares == 0


def test_trip_steps_manhattan_min_one():
    assert trip_steps(0, 0, 3) == 1
    assert trip_steps(0, 8, 3) == 4


def test_log_export(tmp_path):
    env, _ = run_random_episode(2)
    env.log.write_csv(tmp_path / "a.csv", tmp_path / "o.csv")
    head = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert head == "t,agent_id,type,cell,action,matched_order,reward"
