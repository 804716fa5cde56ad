"""Driver-repositioning Markov game on a grid.

Per step: idle drivers move, trips in progress advance, new orders
arrive, idle drivers and orders in the same cell are matched, rewards are
paid, unmatched orders expire.  Controllable drivers earn a synthetic
fare reduced by a service charge in oversupplied cells; uncontrollable
drivers earn the order fare.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .taxidata import DemandModel, Order, sample_orders

N_ACTIONS = 5
ACTION_NAMES = ("stay", "north", "south", "east", "west")
# (d_row, d_col); rows grow northward.
MOVES = np.array([(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)])

CONTROLLABLE = "c"
UNCONTROLLABLE = "u"
EPISODE_HOURS = 4.0


@dataclass(frozen=True)
class Composition:
    n_u: int
    n_c: int

    def __post_init__(self):
        if self.n_u < 0 or self.n_c < 0:
            raise ValueError("agent counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.n_u + self.n_c

    @classmethod
    def of(cls, n_c: int, total: int) -> "Composition":
        return cls(total - n_c, n_c)


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.0
    synthetic_fare_c: float = 10.0
    hourly_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.synthetic_fare_c < 0 or self.hourly_rate < 0:
            raise ValueError("synthetic fare and hourly rate must be nonnegative")


@dataclass(frozen=True)
class DriverState:
    id: int
    agent_type: str
    cell: int
    remaining_steps: int = 0
    destination: Optional[int] = None

    @property
    def idle(self) -> bool:
        return self.remaining_steps == 0


@dataclass
class EnvState:
    t: int
    horizon: int
    cell: np.ndarray
    controllable: np.ndarray
    remaining: np.ndarray
    destination: np.ndarray
    open_orders: list
    rng: np.random.Generator

    @property
    def n_agents(self) -> int:
        return len(self.cell)

    @property
    def idle(self) -> np.ndarray:
        return self.remaining == 0

    def drivers(self) -> list:
        out = []
        for i in range(self.n_agents):
            rem = int(self.remaining[i])
            out.append(DriverState(i, CONTROLLABLE if self.controllable[i] else UNCONTROLLABLE,
                                   int(self.cell[i]), rem,
                                   int(self.destination[i]) if rem else None))
        return out


@dataclass
class Metrics:
    orr: float
    pr: float
    served_demand: int
    served_fares: float
    total_requests: int
    total_fares: float
    hiring_cost: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("orr", "pr", "served_demand", "served_fares", "total_requests", "total_fares",
                 "hiring_cost")}


@dataclass
class StepEvents:
    t: int
    orders: list
    matches: list
    ds: dict
    arrived: list


@dataclass
class EpisodeLog:
    """Structured rows for one episode: one per acting agent per step, one per order."""

    n_c: int = 0
    agent_rows: list = field(default_factory=list)
    order_rows: list = field(default_factory=list)

    AGENT_FIELDS = ("t", "agent_id", "type", "cell", "action", "matched_order", "reward")
    ORDER_FIELDS = ("t", "order_id", "origin", "destination", "fare", "served_by")

    def write_csv(self, agents_path, orders_path) -> None:
        with open(agents_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.AGENT_FIELDS)
            w.writerows(self.agent_rows)
        with open(orders_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.ORDER_FIELDS)
            w.writerows(self.order_rows)


def clamp_move(cell: int, action: int, rows: int, cols: int) -> int:
    r, c = divmod(cell, cols)
    dr, dc = MOVES[action]
    nr, nc = r + dr, c + dc
    if 0 <= nr < rows and 0 <= nc < cols:
        return nr * cols + nc
    return cell


def trip_steps(origin: int, destination: int, cols: int) -> int:
    r0, c0 = divmod(origin, cols)
    r1, c1 = divmod(destination, cols)
    return max(1, abs(r0 - r1) + abs(c0 - c1))


def match_cell(drivers, orders, rng: np.random.Generator):
    """Pair idle drivers with orders in one cell uniformly at random."""
    k = min(len(drivers), len(orders))
    if k == 0:
        return []
    chosen = rng.permutation(len(drivers))[:k]
    return [(drivers[i], orders[j]) for j, i in enumerate(chosen)]


def demand_supply_ratio(n_orders: int, n_idle: int) -> float:
    if n_idle == 0:
        return math.inf
    return n_orders / n_idle


def service_charge(alpha: float, ds: float) -> float:
    if ds <= 1:
        return alpha * (1 - ds)
    return 0 * alpha


def reward_of_match(controllable: bool, fare: float, alpha: float, c: float, ds: float) -> float:
    if controllable:
        return c * (1 - service_charge(alpha, ds))
    return fare


def compute_metrics(served_demand, served_fares, total_requests, total_fares, n_c,
                    hourly_rate, episode_hours: float = EPISODE_HOURS) -> Metrics:
    hiring = hourly_rate * n_c * episode_hours
    orr = served_demand / total_requests if total_requests else 0.0
    if total_fares > 0:
        pr = (served_fares - hiring) / total_fares
    else:
        # undefined ratio; no revenue to compare against
        pr = 1.0 if hiring == 0 else 0.0
    return Metrics(float(orr), float(pr), int(served_demand), float(served_fares),
                   int(total_requests), float(total_fares), float(hiring))


def episode_metrics(log: EpisodeLog, reward_params: RewardParams,
                    episode_hours: float = EPISODE_HOURS) -> Metrics:
    """Recompute the system metrics from an episode's order rows."""
    total = len(log.order_rows)
    total_fares = sum(r[4] for r in log.order_rows)
    served = [r for r in log.order_rows if r[5] >= 0]
    return compute_metrics(len(served), sum(r[4] for r in served), total, total_fares,
                           log.n_c, reward_params.hourly_rate, episode_hours)


def objective(metrics: Metrics, k: float) -> float:
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    return k * metrics.orr + (1.0 - k) * metrics.pr


class RepositioningEnv:
    """One episode of the repositioning game.

    Drivers ``0 .. n_c-1`` are controllable, the rest uncontrollable.
    """

    def __init__(self, demand: DemandModel, composition: Composition, reward_params: RewardParams,
                 horizon: Optional[int] = None, episode_hours: float = EPISODE_HOURS,
                 record: bool = True):
        if composition.total == 0:
            raise ValueError("the game needs at least one driver")
        self.demand = demand
        self.composition = composition
        self.params = reward_params
        self.horizon = demand.horizon if horizon is None else horizon
        self.episode_hours = episode_hours
        self.rows, self.cols = demand.rows, demand.cols
        self.record = record
        self.state: Optional[EnvState] = None

    @property
    def n_agents(self) -> int:
        return self.composition.total

    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        n = self.n_agents
        rate0 = self.demand.rates[0] if self.demand.horizon else np.zeros(self.demand.n_cells)
        total = rate0.sum()
        p = rate0 / total if total > 0 else None
        cells = rng.choice(self.demand.n_cells, size=n, p=p)
        controllable = np.zeros(n, dtype=bool)
        controllable[: self.composition.n_c] = True
        self.state = EnvState(0, self.horizon, cells.astype(np.int64), controllable,
                              np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64), [], rng)
        self.log = EpisodeLog(n_c=self.composition.n_c)
        self.served_fare = np.zeros(n)
        self.served_count = np.zeros(n, dtype=np.int64)
        self.reward_sum = np.zeros(n)
        self.total_requests = 0
        self.total_fares = 0.0
        self._next_order = 0
        return self.state

    @property
    def done(self) -> bool:
        return self.state.t >= self.horizon

    def _resolve_actions(self, actions, idle):
        actions = np.asarray(actions, dtype=np.int64)
        n = self.n_agents
        if actions.shape == (n,):
            full = actions
        elif actions.shape == (int(idle.sum()),):
            full = np.zeros(n, dtype=np.int64)
            full[idle] = actions
        else:
            raise ValueError(
                f"expected {int(idle.sum())} actions (one per idle driver) or {n}, got {actions.shape}")
        bad = idle & ((full < 0) | (full >= N_ACTIONS))
        if bad.any():
            raise ValueError(f"invalid action for drivers {np.flatnonzero(bad).tolist()}")
        return full

    def step(self, actions):
        """Advance one timestep.  Returns ``(state, rewards, events)``.

        ``actions`` holds one entry per driver or one per idle driver (in
        id order); entries for drivers on a trip are ignored.
        """
        s = self.state
        if s is None or self.done:
            raise RuntimeError("episode finished; call reset()")
        n = self.n_agents
        idle = s.idle.copy()
        full = self._resolve_actions(actions, idle)

        for i in np.flatnonzero(idle):
            s.cell[i] = clamp_move(int(s.cell[i]), int(full[i]), self.rows, self.cols)
        arrived = []
        busy = np.flatnonzero(~idle)
        for i in busy:
            s.remaining[i] -= 1
            if s.remaining[i] == 0:
                s.cell[i] = s.destination[i]
                s.destination[i] = -1
                arrived.append(int(i))

        orders = sample_orders(self.demand, s.t, s.rng, self._next_order)
        self._next_order += len(orders)
        s.open_orders = orders
        self.total_requests += len(orders)
        self.total_fares += sum(o.fare for o in orders)

        by_cell = {}
        for o in orders:
            by_cell.setdefault(o.origin, []).append(o)
        idle_ids = np.flatnonzero(idle)
        drivers_by_cell = {}
        for i in idle_ids:
            drivers_by_cell.setdefault(int(s.cell[i]), []).append(int(i))

        rewards = np.zeros(n)
        matched_order = np.full(n, -1, dtype=np.int64)
        matches, ds_map = [], {}
        served_by = {}
        for cell in sorted(by_cell):
            cell_orders = by_cell[cell]
            cell_drivers = drivers_by_cell.get(cell, [])
            ds = demand_supply_ratio(len(cell_orders), len(cell_drivers))
            ds_map[cell] = ds
            for d, o in match_cell(cell_drivers, cell_orders, s.rng):
                rewards[d] = reward_of_match(bool(s.controllable[d]), o.fare, self.params.alpha,
                                             self.params.synthetic_fare_c, ds)
                s.remaining[d] = trip_steps(o.origin, o.destination, self.cols)
                s.destination[d] = o.destination
                matched_order[d] = o.order_id
                self.served_fare[d] += o.fare
                self.served_count[d] += 1
                served_by[o.order_id] = d
                matches.append((d, o))
        self.reward_sum += rewards

        if self.record:
            for i in idle_ids:
                self.log.agent_rows.append((s.t, int(i), CONTROLLABLE if s.controllable[i]
                                            else UNCONTROLLABLE, int(s.cell[i]), int(full[i]),
                                            int(matched_order[i]), float(rewards[i])))
            for o in orders:
                self.log.order_rows.append((s.t, o.order_id, o.origin, o.destination, o.fare,
                                            served_by.get(o.order_id, -1)))

        events = StepEvents(s.t, orders, matches, ds_map, arrived)
        s.open_orders = []
        s.t += 1
        return s, rewards, events

    def metrics(self) -> Metrics:
        return compute_metrics(int(self.served_count.sum()), float(self.served_fare.sum()),
                               self.total_requests, self.total_fares, self.composition.n_c,
                               self.params.hourly_rate, self.episode_hours)
