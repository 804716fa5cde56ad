"""Upper-level search over compositions and penalty strengths.

Every grid cell is simulated once with a fixed list of environment seeds
(common random numbers across cells); objective scores for any
``(k, hourly_rate)`` scenario are then computed from the stored per-run
counts, since neither parameter changes the trajectories.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .evalsuite import _policy_rng, reward_params_for, run_seeds
from .hyperdesign import DesignSpace, GameContext, TrainConfig, TrainedBundle, bundle_hash, run_episode, train, type_policies
from .repoenv import EPISODE_HOURS, compute_metrics
from .taxidata import DemandModel

log = logging.getLogger(__name__)

# per-run raw counts: served demand, served fares, total requests, total fares
RAW_COLUMNS = ("served_demand", "served_fares", "total_requests", "total_fares")


@dataclass
class ObjectiveSpec:
    k: float = 0.6
    hourly_rate: float = 0.0
    eval_runs: int = 100

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise ValueError(f"k must lie in [0, 1], got {self.k}")
        if self.hourly_rate < 0 or self.eval_runs < 1:
            raise ValueError("hourly_rate must be >= 0 and eval_runs >= 1")


def simulate_runs(bundle: TrainedBundle, demand: DemandModel, context: GameContext,
                  eval_runs: int, seed: int = 0) -> np.ndarray:
    """Raw per-run counts ``(eval_runs, 4)`` for one context."""
    pols = type_policies(bundle, context)
    rp = reward_params_for(bundle, demand, context.alpha)
    out = np.zeros((eval_runs, 4))
    for r, s in enumerate(run_seeds(seed, eval_runs)):
        m = run_episode(demand, context, bundle.config.total_agents, pols, s, _policy_rng(seed, r),
                        rp, mode="eval").metrics
        out[r] = (m.served_demand, m.served_fares, m.total_requests, m.total_fares)
    return out


@dataclass
class CellResult:
    n_c: int
    alpha: float
    objective: float
    objective_std: float
    orr: float
    pr: float
    served_demand: float
    served_fares: float
    runs: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def score(raw: np.ndarray, n_c: int, alpha: float, spec: ObjectiveSpec) -> CellResult:
    orr, pr = np.zeros(len(raw)), np.zeros(len(raw))
    for i, (sd, sf, tr, tf) in enumerate(raw):
        m = compute_metrics(int(sd), sf, int(tr), tf, n_c, spec.hourly_rate, EPISODE_HOURS)
        orr[i], pr[i] = m.orr, m.pr
    f = spec.k * orr + (1 - spec.k) * pr
    return CellResult(n_c, float(alpha), float(f.mean()), float(f.std()), float(orr.mean()),
                      float(pr.mean()), float(raw[:, 0].mean()), float(raw[:, 1].mean()), len(raw))


def simulate_objective(bundle: TrainedBundle, demand: DemandModel, context: GameContext,
                       spec: ObjectiveSpec, seed: int = 0) -> CellResult:
    raw = simulate_runs(bundle, demand, context, spec.eval_runs, seed)
    return score(raw, context.n_c, context.alpha, spec)


def default_grid(space: DesignSpace, points: int = 11):
    n_vals = sorted(set(int(round(v)) for v in np.linspace(space.n_c[0], space.n_c[1], points)))
    a_vals = [float(a) for a in np.linspace(space.alpha[0], space.alpha[1], points)]
    return n_vals, a_vals


_WORKER = {}


def _init_worker(bundle, demand):
    _WORKER["bundle"], _WORKER["demand"] = bundle, demand


def _cell_job(args):
    n_c, alpha, runs, seed = args
    return simulate_runs(_WORKER["bundle"], _WORKER["demand"], GameContext(n_c, alpha), runs, seed)


def evaluate_grid(bundle: TrainedBundle, demand: DemandModel, n_c_values, alpha_values,
                  eval_runs: int, seed: int = 0, workers: int = 1,
                  include_baseline: bool = True) -> dict:
    """Raw counts for every grid cell, plus the ``n_c = 0`` baseline cell."""
    space = bundle.config.design_space
    cells = [(int(n), float(a)) for n in n_c_values for a in alpha_values]
    for n, a in cells:
        if not space.contains(GameContext(n, a)):
            raise ValueError(f"grid cell ({n}, {a}) lies outside the trained design space")
    if include_baseline and (0, 0.0) not in cells:
        cells.append((0, 0.0))
    jobs = [(n, a, eval_runs, seed) for n, a in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(bundle, demand)) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        _init_worker(bundle, demand)
        results = [_cell_job(j) for j in jobs]
    return dict(zip(cells, results))


def argmax_cell(cells: Sequence[CellResult]) -> CellResult:
    """Highest objective; ties go to the smallest n_c, then the smallest alpha."""
    return min(cells, key=lambda c: (-c.objective, c.n_c, c.alpha))


@dataclass
class SweepResult:
    spec: ObjectiveSpec
    cells: list
    best: CellResult
    baseline: CellResult
    meta: dict = field(default_factory=dict)

    @property
    def improvement_abs(self) -> float:
        return self.best.objective - self.baseline.objective

    @property
    def improvement_rel(self) -> float:
        b = self.baseline.objective
        return self.improvement_abs / b if b else 0.0

    def rows(self) -> list:
        out = []
        for c in self.cells:
            d = c.as_dict()
            d["k"], d["hourly_rate"] = self.spec.k, self.spec.hourly_rate
            d["is_best"] = c is self.best
            d["is_baseline"] = c is self.baseline
            d["improvement_rel"] = (c.objective - self.baseline.objective) / self.baseline.objective \
                if self.baseline.objective else 0.0
            out.append(d)
        return out

    def summary(self) -> dict:
        return {"k": self.spec.k, "hourly_rate": self.spec.hourly_rate,
                "best_n_c": self.best.n_c, "best_alpha": self.best.alpha,
                "best_objective": self.best.objective, "baseline_objective": self.baseline.objective,
                "improvement_abs": self.improvement_abs, "improvement_rel": self.improvement_rel}


def sweep_from_cells(cells: Sequence[CellResult], spec: ObjectiveSpec, meta=None) -> SweepResult:
    cells = list(cells)
    base = [c for c in cells if c.n_c == 0]
    if not base:
        raise ValueError("no n_c = 0 baseline cell evaluated")
    baseline = min(base, key=lambda c: c.alpha)
    return SweepResult(spec, cells, argmax_cell(cells), baseline, meta or {})


def grid_search(bundle: TrainedBundle, demand: DemandModel, spec: ObjectiveSpec, n_c_values,
                alpha_values, seed: int = 0, workers: int = 1, raw: Optional[dict] = None,
                evaluate: Optional[Callable] = None) -> SweepResult:
    """Evaluate every grid cell and pick the best.

    ``evaluate(n_c, alpha) -> objective`` replaces simulation (used to plant
    known objective surfaces).
    """
    if evaluate is not None:
        cells = [CellResult(int(n), float(a), float(evaluate(n, a)), 0.0, 0.0, 0.0, 0.0, 0.0, 0)
                 for n in n_c_values for a in alpha_values]
        if not any(c.n_c == 0 for c in cells):
            cells.append(CellResult(0, 0.0, float(evaluate(0, 0.0)), 0, 0, 0, 0, 0, 0))
        return sweep_from_cells(cells, spec)
    if raw is None:
        raw = evaluate_grid(bundle, demand, n_c_values, alpha_values, spec.eval_runs, seed, workers)
    cells = [score(r, n, a, spec) for (n, a), r in raw.items()]
    meta = {"bundle_hash": bundle_hash(bundle), "seed": seed, "n_c_values": list(n_c_values),
            "alpha_values": list(alpha_values), "eval_runs": spec.eval_runs}
    return sweep_from_cells(cells, spec, meta)


def scenario_sweep(bundle: TrainedBundle, demand: DemandModel, k_values, hourly_rates,
                   n_c_values, alpha_values, eval_runs: int = 100, seed: int = 0,
                   workers: int = 1) -> list:
    raw = evaluate_grid(bundle, demand, n_c_values, alpha_values, eval_runs, seed, workers)
    out = []
    for rate in hourly_rates:
        for k in k_values:
            spec = ObjectiveSpec(k, rate, eval_runs)
            out.append(grid_search(bundle, demand, spec, n_c_values, alpha_values, seed, raw=raw))
    return out


def utility_study(bundles: dict, demand: DemandModel, fractions, alphas, eval_runs: int = 100,
                  seed: int = 0) -> list:
    """Served demand and fares per (total agents, controllable fraction), averaged over alphas.

    Differences against the first fraction are paired by seed and come
    with a standard error.
    """
    rows = []
    for total, bundle in sorted(bundles.items()):
        per_frac = []
        for frac in fractions:
            n_c = int(round(frac * total))
            raws = [simulate_runs(bundle, demand, GameContext(n_c, float(a)), eval_runs, seed)
                    for a in alphas]
            per_frac.append((frac, n_c, np.mean(raws, axis=0)))
        ref = per_frac[0][2]
        for frac, n_c, raw in per_frac:
            dd = raw[:, 0] - ref[:, 0]
            df = raw[:, 1] - ref[:, 1]
            se = lambda x: float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
            rows.append({
                "total_agents": total, "fraction": float(frac), "n_c": n_c,
                "served_demand": float(raw[:, 0].mean()), "served_demand_se": se(raw[:, 0]),
                "served_fares": float(raw[:, 1].mean()), "served_fares_se": se(raw[:, 1]),
                "demand_delta": float(dd.mean()), "demand_delta_se": se(dd),
                "fares_delta": float(df.mean()), "fares_delta_se": se(df),
                "demand_delta_rel": float(dd.mean() / ref[:, 0].mean()) if ref[:, 0].mean() else 0.0,
            })
    return rows


def segment_spaces(total: int) -> list:
    half = total // 2
    return [DesignSpace((lo, hi), (alo, ahi))
            for lo, hi in ((0, half), (half, total))
            for alo, ahi in ((0.0, 0.5), (0.5, 1.0))]


def segment_study(config: TrainConfig, demand: DemandModel, spec: ObjectiveSpec,
                  points_per_axis: int = 3, seed: int = 0, trainer: Callable = train) -> dict:
    """Full-space training vs four per-quadrant trainings at an equal episode budget."""
    budget = config.episodes
    full = trainer(config, demand)
    spaces = segment_spaces(config.total_agents)
    seg_budget = budget // len(spaces)
    rows, totals = [], {"full": [], "segmented": []}
    for i, space in enumerate(spaces):
        seg_cfg = dataclasses.replace(config, episodes=seg_budget, design_space=space)
        seg = trainer(seg_cfg, demand)
        n_vals, a_vals = default_grid(space, points_per_axis)
        for n in n_vals:
            for a in a_vals:
                ctx = GameContext(n, a)
                f_full = simulate_objective(full, demand, ctx, spec, seed)
                f_seg = simulate_objective(seg, demand, ctx, spec, seed)
                rows.append({"segment": i, "n_c_lo": space.n_c[0], "n_c_hi": space.n_c[1],
                             "alpha_lo": space.alpha[0], "alpha_hi": space.alpha[1], "n_c": n,
                             "alpha": a, "objective_full": f_full.objective,
                             "objective_segmented": f_seg.objective,
                             "delta": f_full.objective - f_seg.objective})
                totals["full"].append(f_full.objective)
                totals["segmented"].append(f_seg.objective)
    deltas = np.array([r["delta"] for r in rows])
    return {
        "rows": rows,
        "budget": {"full": budget, "segmented": seg_budget * len(spaces)},
        "overall_full": float(np.mean(totals["full"])),
        "overall_segmented": float(np.mean(totals["segmented"])),
        "delta_mean": float(deltas.mean()),
        "delta_se": float(deltas.std(ddof=1) / np.sqrt(len(deltas))) if len(deltas) > 1 else 0.0,
    }
