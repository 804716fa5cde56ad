"""Equilibrium-quality evaluation, baselines and the mean-action ablation.

NashConv is estimated per agent type: a fresh actor-critic is trained for
one representative agent while everybody else keeps the evaluated
policies, and the estimate is the representative's served fare under that
best response minus the mean served fare of its type without the
deviation.  Both terms use the same environment seeds.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffcore import HypernetSpec, layer_slices, param_count
from .hyperdesign import (
    TYPES,
    AgentPolicy,
    Architecture,
    GameContext,
    TrainConfig,
    TrainedBundle,
    actor_step,
    build_type_nets,
    critic_step,
    init_bundle,
    run_episode,
    type_policies,
)
from .mfac import MfacConfig, ReplayBuffer, obs_dim
from .repoenv import CONTROLLABLE, RewardParams, objective
from .taxidata import DemandModel

log = logging.getLogger(__name__)

BASELINE_KINDS = ("Target", "AugTarget", "TargetLarge", "AugTargetLarge")
SYSTEM_KINDS = ("hyper", *BASELINE_KINDS, "Random")
REPORT_LABELS = {"hyper": "Ours", "Target": "MLP", "AugTarget": "AugMLP",
                 "TargetLarge": "MLP-Large", "AugTargetLarge": "AugMLP-Large"}


def run_seeds(seed: int, runs: int) -> list:
    """Environment seeds shared by every arm of a paired comparison."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(runs, dtype=np.uint64) >> 1]


def _policy_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng([seed, run, 7])


def reward_params_for(bundle: TrainedBundle, demand: DemandModel, alpha: float,
                      hourly_rate: float = 0.0) -> RewardParams:
    fare = bundle.config.synthetic_fare
    return RewardParams(alpha, demand.mean_fare() if fare is None else fare, hourly_rate)


# -- matrix-game harness -------------------------------------------------------


@dataclass
class MatrixGame:
    row_payoff: np.ndarray
    col_payoff: np.ndarray

    def __post_init__(self):
        self.row_payoff = np.asarray(self.row_payoff, dtype=float)
        self.col_payoff = np.asarray(self.col_payoff, dtype=float)
        if self.row_payoff.shape != self.col_payoff.shape:
            raise ValueError("payoff matrices differ in shape")

    def best_responses(self, p_row, q_col):
        return int(np.argmax(self.row_payoff @ q_col)), int(np.argmax(p_row @ self.col_payoff))


def matrix_nashconv(game: MatrixGame, p_row, q_col, n_eval: int, rng: np.random.Generator):
    """Monte-Carlo NashConv of a mixed profile.  Returns ``(mean, standard_error)``.

    Each evaluation samples a joint play and credits both players with the
    payoff of switching to their exact best response against it.
    """
    p_row, q_col = np.asarray(p_row, float), np.asarray(q_col, float)
    br_r, br_c = game.best_responses(p_row, q_col)
    a_r = rng.choice(len(p_row), size=n_eval, p=p_row)
    a_c = rng.choice(len(q_col), size=n_eval, p=q_col)
    gain = (game.row_payoff[br_r, a_c] - game.row_payoff[a_r, a_c]
            + game.col_payoff[a_r, br_c] - game.col_payoff[a_r, a_c])
    return float(gain.mean()), float(gain.std(ddof=1) / np.sqrt(n_eval))


# Row prefers coordinating on action 0, column prefers mismatching: the only
# equilibrium is mixed, row p(0) = 1/3 and column q(0) = 1/5.
ORACLE_GAME = MatrixGame([[4, 0], [0, 1]], [[0, 2], [1, 0]])
ORACLE_NE = (np.array([1 / 3, 2 / 3]), np.array([0.2, 0.8]))


# -- best response ------------------------------------------------------------


@dataclass
class BrConfig:
    representative_type: str = CONTROLLABLE
    episodes: int = 60_000
    actor_hidden: tuple = (64, 32, 16)
    critic_hidden: tuple = (128, 64, 32)
    lr_actor: float = 0.00004
    lr_critic: float = 0.0003
    gamma: float = 1.0
    entropy_weight: float = 0.01
    reward_scale: float = 1.0
    update_interval: int = 10
    updates_per_phase: int = 20
    batch_size: int = 256
    buffer_capacity: int = 100_000
    target_refresh: int = 200
    min_buffer: int = 64
    # early stop after this many 100-episode windows without a better mean; 0 disables
    patience: int = 0
    eval_runs: int = 100
    seed: int = 0

    def __post_init__(self):
        self.actor_hidden = tuple(int(v) for v in self.actor_hidden)
        self.critic_hidden = tuple(int(v) for v in self.critic_hidden)
        if self.representative_type not in TYPES:
            raise ValueError(f"unknown agent type {self.representative_type!r}")

    def mfac(self) -> MfacConfig:
        return MfacConfig(gamma=self.gamma, lr_actor=self.lr_actor, lr_critic=self.lr_critic,
                          entropy_weight=self.entropy_weight, reward_scale=self.reward_scale,
                          batch_size=self.batch_size, buffer_capacity=self.buffer_capacity,
                          target_refresh=self.target_refresh)


def desk_br_config(**overrides) -> BrConfig:
    base = dict(episodes=5000, lr_actor=1e-4, lr_critic=1e-3, reward_scale=0.05, batch_size=128,
                buffer_capacity=20_000, target_refresh=50, updates_per_phase=10, patience=5)
    base.update(overrides)
    return BrConfig(**base)


class BrDiverged(RuntimeError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass
class BrResult:
    policy: AgentPolicy
    agent_id: int
    episodes: int
    history: list = field(default_factory=list)


def representative_id(context: GameContext, total: int, agent_type: str) -> Optional[int]:
    if agent_type == CONTROLLABLE:
        return 0 if context.n_c > 0 else None
    return context.n_c if context.n_c < total else None


def train_best_response(bundle: TrainedBundle, demand: DemandModel, context: GameContext,
                        br: BrConfig) -> BrResult:
    """Train one agent's policy against the frozen policies of everybody else."""
    total = bundle.config.total_agents
    rep = representative_id(context, total, br.representative_type)
    if rep is None:
        raise ValueError(f"context {context} has no {br.representative_type!r} agents")
    pols = type_policies(bundle, context)
    own = pols[br.representative_type]
    mcfg = br.mfac()
    arch = Architecture(actor_hidden=br.actor_hidden, critic_hidden=br.critic_hidden,
                        mean_hidden=bundle.config.architecture.mean_hidden)
    nets = build_type_nets(arch, demand.n_cells, mcfg, br.seed, hyper=False,
                           include_context=own.include_context)
    buf = ReplayBuffer(mcfg.buffer_capacity, obs_dim(demand.n_cells, own.include_context))
    rng = np.random.default_rng([br.seed, 11])
    update_rng = np.random.default_rng([br.seed, 13])
    rp = reward_params_for(bundle, demand, context.alpha, bundle.config.hourly_rate)
    history, updates, best, stale, window = [], 0, -np.inf, 0, []
    bad_streak = 0

    def current():
        return AgentPolicy(nets.actor.spec, nets.actor.params.copy(), own.mean_spec,
                           own.mean_params, own.include_context, own.beta)

    ep = 0
    for ep in range(1, br.episodes + 1):
        res = run_episode(demand, context, total, pols, int(rng.integers(2 ** 63)), rng, rp,
                          overrides={rep: current()}, reward_scale=mcfg.reward_scale,
                          collect={rep})
        if rep in res.transitions:
            buf.add(res.transitions[rep])
        row = {"episode": ep, "served_fare": float(res.served_fare[rep]),
               "reward": float(res.reward_sum[rep])}
        if ep % br.update_interval == 0 and len(buf) >= br.min_buffer:
            losses = []
            for _ in range(br.updates_per_phase):
                batch = buf.sample(mcfg.batch_size, update_rng)
                losses.append((critic_step(nets, batch, mcfg), actor_step(nets, batch, mcfg)))
                updates += 1
                if updates % mcfg.target_refresh == 0:
                    nets.critic_target = nets.critic.params.copy()
            losses = np.array(losses)
            row["critic_loss"], row["actor_loss"] = losses.mean(0).tolist()
            bad_streak = 0 if np.all(np.isfinite(losses)) else bad_streak + 1
            if bad_streak > 5:
                raise BrDiverged(f"best response diverged at episode {ep}",
                                 BrResult(current(), rep, ep, history))
        history.append(row)
        window.append(row["served_fare"])
        if len(window) == 100:
            m = float(np.mean(window))
            window = []
            if m > best + 1e-12:
                best, stale = m, 0
            else:
                stale += 1
            if br.patience and stale >= br.patience:
                break
    return BrResult(current(), rep, ep, history)


@dataclass
class NashConvRow:
    n_c: int
    alpha: float
    agent_type: str
    seed: int
    br_value: float
    pop_value: float
    nashconv: float
    stderr: float
    eval_runs: int
    br_episodes: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_deviation(bundle: TrainedBundle, demand: DemandModel, context: GameContext,
                       agent_type: str, deviation: AgentPolicy, agent_id: int, eval_runs: int,
                       seed: int):
    """Paired served-fare comparison of one deviating agent vs its type's population.

    Returns ``(br_value, pop_value, nashconv, stderr)``.
    """
    total = bundle.config.total_agents
    pols = type_policies(bundle, context)
    rp = reward_params_for(bundle, demand, context.alpha, bundle.config.hourly_rate)
    members = np.arange(context.n_c) if agent_type == CONTROLLABLE else np.arange(context.n_c, total)
    br_vals, pop_vals = [], []
    for r, s in enumerate(run_seeds(seed, eval_runs)):
        dev = run_episode(demand, context, total, pols, s, _policy_rng(seed, r), rp, mode="eval",
                          overrides={agent_id: deviation})
        ref = run_episode(demand, context, total, pols, s, _policy_rng(seed, r), rp, mode="eval")
        br_vals.append(dev.served_fare[agent_id])
        pop_vals.append(ref.served_fare[members].mean())
    diff = np.array(br_vals) - np.array(pop_vals)
    se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
    return float(np.mean(br_vals)), float(np.mean(pop_vals)), float(diff.mean()), se


def nashconv(bundle: TrainedBundle, demand: DemandModel, contexts: Sequence[GameContext],
             seeds: Sequence[int], br: BrConfig, types: Sequence[str] = TYPES) -> list:
    """Per-type NashConv rows for every context, type and seed."""
    rows = []
    for ctx in contexts:
        for t in types:
            if representative_id(ctx, bundle.config.total_agents, t) is None:
                continue
            for seed in seeds:
                cfg = dataclasses.replace(br, representative_type=t, seed=int(seed))
                res = train_best_response(bundle, demand, ctx, cfg)
                b, p, nc, se = evaluate_deviation(bundle, demand, ctx, t, res.policy,
                                                  res.agent_id, br.eval_runs, int(seed))
                rows.append(NashConvRow(ctx.n_c, ctx.alpha, t, int(seed), b, p, nc, se,
                                        br.eval_runs, res.episodes))
                log.info("nashconv n_c=%d alpha=%.3f type=%s seed=%d: %.4f (se %.4f)",
                         ctx.n_c, ctx.alpha, t, seed, nc, se)
    return rows


def nashconv_plot_data(rows: Sequence[NashConvRow]) -> list:
    """Mean and std of NashConv across seeds, per composition and type."""
    groups = {}
    for r in rows:
        groups.setdefault((r.n_c, r.alpha, r.agent_type), []).append(r.nashconv)
    out = []
    for (n_c, alpha, t), vals in sorted(groups.items()):
        v = np.array(vals)
        out.append({"n_c": n_c, "alpha": alpha, "agent_type": t, "mean": float(v.mean()),
                    "std": float(v.std()), "n_seeds": len(v)})
    return out


def context_grid(total: int, n_c_segments: int = 10, alpha_segments: int = 10, space=None) -> list:
    """Evaluation contexts at the edges of equal segments of the design space."""
    lo_n, hi_n = space.n_c if space else (0, total)
    lo_a, hi_a = space.alpha if space else (0.0, 1.0)
    n_vals = sorted(set(int(round(v)) for v in np.linspace(lo_n, hi_n, n_c_segments + 1)))
    a_vals = np.linspace(lo_a, hi_a, alpha_segments + 1)
    return [GameContext(n, float(a)) for n in n_vals for a in a_vals]


# -- baselines ----------------------------------------------------------------


def system_param_count(bundle: TrainedBundle) -> int:
    return sum(sum(bundle.nets[t].n_params().values()) for t in TYPES)


def _scaled(hidden, f):
    return tuple(max(1, int(round(h * f))) for h in hidden)


def widen_to_match(arch: Architecture, n_cells: int, include_context: bool, goal: int,
                   tol: float = 0.02):
    """Widen actor and critic hidden layers until the two-type system has ~``goal`` parameters.

    Returns ``(architecture, achieved_count)``; the count may miss ``tol``
    if no integer widths reach it.
    """
    def count(a: Architecture) -> int:
        from .hyperdesign import target_specs
        specs = target_specs(a, n_cells, include_context)
        return 2 * sum(param_count(s) for s in specs)

    lo, hi = 1.0, 2.0
    while count(dataclasses.replace(arch, actor_hidden=_scaled(arch.actor_hidden, hi),
                                    critic_hidden=_scaled(arch.critic_hidden, hi))) < goal:
        hi *= 2
        if hi > 1e4:
            break
    for _ in range(60):
        mid = (lo + hi) / 2
        a = dataclasses.replace(arch, actor_hidden=_scaled(arch.actor_hidden, mid),
                                critic_hidden=_scaled(arch.critic_hidden, mid))
        if count(a) < goal:
            lo = mid
        else:
            hi = mid
    best = dataclasses.replace(arch, actor_hidden=_scaled(arch.actor_hidden, hi),
                               critic_hidden=_scaled(arch.critic_hidden, hi))
    # trim the last critic layer for a closer fit
    c = count(best)
    for w in range(max(1, best.critic_hidden[-1] - 64), best.critic_hidden[-1] + 65):
        cand = dataclasses.replace(best, critic_hidden=(*best.critic_hidden[:-1], w))
        if abs(count(cand) - goal) < abs(c - goal):
            best, c = cand, count(cand)
    if abs(c - goal) > tol * goal:
        log.warning("widening reached %d parameters, goal %d", c, goal)
    return best, c


def make_baseline(kind: str, config: TrainConfig, demand: DemandModel) -> TrainedBundle:
    """An untrained baseline system; train it with :func:`pcmas.hyperdesign.train`."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    aug = kind.startswith("Aug")
    arch = config.architecture
    if kind.endswith("Large"):
        goal = system_param_count(init_bundle(config, demand, "hyper"))
        arch, _ = widen_to_match(arch, demand.n_cells, aug, goal)
    bundle = init_bundle(config, demand, "plain", arch=arch, include_context=aug)
    bundle.kind = kind
    return bundle


def random_system(config: TrainConfig, demand: DemandModel) -> TrainedBundle:
    """Population acting uniformly at random (zero actor weights give a uniform softmax)."""
    bundle = init_bundle(config, demand, "plain", include_context=False)
    for t in TYPES:
        bundle.nets[t].actor.params[:] = 0.0
    bundle.kind = "Random"
    return bundle


def _spec_breakdown(spec) -> list:
    """Per-layer (weights, biases) for a target or hypernetwork spec."""
    mlp = spec.net if isinstance(spec, HypernetSpec) else spec
    return [(n_in * n_out, n_out) for _, _, n_in, n_out in layer_slices(mlp)]


def param_report(systems: dict) -> list:
    """Learnable-parameter table: one row per system, per-network and total counts."""
    rows = []
    for kind, bundle in systems.items():
        row = {"system": REPORT_LABELS.get(kind, kind)}
        total = 0
        for t in TYPES:
            for name in ("actor", "critic", "mean"):
                net = getattr(bundle.nets[t], name)
                closed = sum(w + b for w, b in _spec_breakdown(net.spec))
                assert closed == net.params.size == param_count(net.spec)
                row[f"{name}_{t}"] = closed
                total += closed
        row["total"] = total
        rows.append(row)
    return rows


def final_layer_share(spec: HypernetSpec) -> float:
    layers = _spec_breakdown(spec)
    return sum(layers[-1]) / param_count(spec)


# -- mean-action ablation -----------------------------------------------------


@dataclass
class AblationRow:
    n_c: int
    alpha: float
    run: int
    seed: int
    objective_predicted: float
    objective_previous: float
    delta: float
    relative_delta: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def ablate_mean_net(bundle: TrainedBundle, demand: DemandModel, context: GameContext,
                    eval_runs: int, seed: int = 0, k: float = 0.6, hourly_rate: float = 0.0) -> list:
    """Paired objective values with predicted vs previous-step mean actions."""
    total = bundle.config.total_agents
    pols = type_policies(bundle, context)
    rp = reward_params_for(bundle, demand, context.alpha, hourly_rate)
    rows = []
    for r, s in enumerate(run_seeds(seed, eval_runs)):
        vals = []
        for mode in ("predicted", "previous"):
            res = run_episode(demand, context, total, pols, s, _policy_rng(seed, r), rp,
                              mode="eval", mean_mode=mode)
            vals.append(objective(res.metrics, k))
        d = vals[0] - vals[1]
        rows.append(AblationRow(context.n_c, context.alpha, r, s, vals[0], vals[1], d,
                                d / vals[1] if vals[1] else 0.0))
    return rows
