"""Unified hypernetwork training across game contexts.

Each episode draws a context (number of controllable agents, penalty
strength), generates type-level actor/critic weights from the
hypernetworks, rolls the game out, and stores transitions tagged with
their context.  Every ``update_interval`` episodes the critics, actors and
mean-action networks of both agent types are updated from replay; actor
and critic gradients flow back through the generated weights into the
hypernetwork parameters.

The same machinery trains context-free baselines: a :class:`TypeNets`
whose actor and critic are plain networks instead of hypernetworks.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .diffcore import (
    HypernetSpec,
    MlpSpec,
    Trainable,
    hyper_backward,
    hyper_forward,
    load_checkpoint,
    save_checkpoint,
)
from .mfac import (
    UNIFORM,
    Batch,
    MfacConfig,
    ReplayBuffer,
    actor_loss_grad,
    critic_loss_grad,
    encode_obs,
    mean_loss_grad,
    mean_net_input,
    obs_dim,
    one_hot,
    policy_probs,
    predict_mean_action,
    sample_actions,
    true_mean_actions,
)
from .repoenv import CONTROLLABLE, N_ACTIONS, UNCONTROLLABLE, Composition, Metrics, RepositioningEnv, RewardParams
from .taxidata import DemandModel

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
TYPES = (CONTROLLABLE, UNCONTROLLABLE)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Architecture:
    actor_hidden: tuple = (32, 16, 18)
    critic_hidden: tuple = (64, 32, 16)
    actor_hyper_hidden: tuple = (128, 64)
    critic_hyper_hidden: tuple = (128, 128)
    mean_hidden: tuple = (32, 16, 8)
    activation: str = "relu"

    def __post_init__(self):
        for f in ("actor_hidden", "critic_hidden", "actor_hyper_hidden", "critic_hyper_hidden",
                  "mean_hidden"):
            setattr(self, f, tuple(int(v) for v in getattr(self, f)))


@dataclass
class DesignSpace:
    n_c: tuple = (0, 100)
    alpha: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.n_c = (int(self.n_c[0]), int(self.n_c[1]))
        self.alpha = (float(self.alpha[0]), float(self.alpha[1]))
        if self.n_c[0] > self.n_c[1] or self.alpha[0] > self.alpha[1]:
            raise ValueError("design-space bounds are reversed")
        if self.n_c[0] < 0 or self.alpha[0] < 0 or self.alpha[1] > 1:
            raise ValueError("design space outside n_c >= 0, alpha in [0, 1]")

    def contains(self, ctx: "GameContext") -> bool:
        return (self.n_c[0] <= ctx.n_c <= self.n_c[1]
                and self.alpha[0] - 1e-12 <= ctx.alpha <= self.alpha[1] + 1e-12)


@dataclass(frozen=True)
class GameContext:
    n_c: int
    alpha: float

    def normalized(self, total: int) -> np.ndarray:
        return np.array([self.n_c / total, self.alpha])


@dataclass
class TrainConfig:
    total_agents: int = 100
    episodes: int = 60_000
    update_interval: int = 10
    updates_per_phase: int = 20
    design_space: DesignSpace = field(default_factory=DesignSpace)
    seed: int = 0
    architecture: Architecture = field(default_factory=Architecture)
    mfac: MfacConfig = field(default_factory=MfacConfig)
    synthetic_fare: Optional[float] = None
    hourly_rate: float = 0.0
    min_buffer: int = 64
    checkpoint_every: int = 0
    nonfinite_limit: int = 20

    def __post_init__(self):
        if isinstance(self.design_space, dict):
            self.design_space = DesignSpace(**self.design_space)
        if isinstance(self.architecture, dict):
            self.architecture = Architecture(**self.architecture)
        if isinstance(self.mfac, dict):
            self.mfac = MfacConfig(**self.mfac)
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.design_space.n_c[1] > self.total_agents:
            raise ValueError("design space allows more controllable agents than total_agents")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Small-grid preset: narrow hypernetworks, larger learning rates, scaled rewards."""
    base = dict(
        total_agents=10,
        episodes=2000,
        update_interval=10,
        updates_per_phase=10,
        design_space=DesignSpace((0, 10), (0.0, 1.0)),
        architecture=Architecture(actor_hyper_hidden=(32, 32), critic_hyper_hidden=(32, 32)),
        mfac=MfacConfig(lr_actor=1e-5, lr_critic=1e-4, lr_mean=1e-3, reward_scale=0.05,
                        batch_size=128, buffer_capacity=20_000, target_refresh=50),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TypeNets:
    """Actor, critic (with a lagged target copy) and mean-action net of one agent type."""

    def __init__(self, actor: Trainable, critic: Trainable, mean: Trainable,
                 include_context: bool = True):
        self.actor = actor
        self.critic = critic
        self.mean = mean
        self.include_context = include_context
        self.critic_target = critic.params.copy()

    @property
    def hyper(self) -> bool:
        return isinstance(self.actor.spec, HypernetSpec)

    @staticmethod
    def _target_spec(net: Trainable) -> MlpSpec:
        return net.spec.target if isinstance(net.spec, HypernetSpec) else net.spec

    @property
    def actor_spec(self) -> MlpSpec:
        return self._target_spec(self.actor)

    @property
    def critic_spec(self) -> MlpSpec:
        return self._target_spec(self.critic)

    def generate(self, net: Trainable, context, params=None) -> np.ndarray:
        """Target parameters for one context ``(2,)`` or several ``(U, 2)``."""
        params = net.params if params is None else params
        if isinstance(net.spec, HypernetSpec):
            return hyper_forward(net.spec, params, context)
        return params

    def expand(self, net: Trainable, ctx_u, inv, params=None) -> np.ndarray:
        out = self.generate(net, ctx_u, params)
        return out[inv] if isinstance(net.spec, HypernetSpec) else out

    def route(self, net: Trainable, ctx_u, inv, grad) -> np.ndarray:
        """Turn a gradient on (per-sample) target parameters into one on ``net.params``."""
        if not isinstance(net.spec, HypernetSpec):
            return grad
        onehot = np.zeros((len(ctx_u), len(inv)))
        onehot[inv, np.arange(len(inv))] = 1.0
        return hyper_backward(net.spec, net.params, ctx_u, onehot @ grad)

    def copy(self) -> "TypeNets":
        out = TypeNets(self.actor.copy(), self.critic.copy(), self.mean.copy(), self.include_context)
        out.critic_target = self.critic_target.copy()
        return out

    def n_params(self) -> dict:
        return {"actor": self.actor.params.size, "critic": self.critic.params.size,
                "mean": self.mean.params.size}


def target_specs(arch: Architecture, n_cells: int, include_context: bool = True):
    width = obs_dim(n_cells, include_context) + N_ACTIONS
    act = arch.activation
    actor = MlpSpec((width, *arch.actor_hidden, N_ACTIONS), act, "softmax")
    critic = MlpSpec((width, *arch.critic_hidden, N_ACTIONS), act, "linear")
    mean = MlpSpec((width, *arch.mean_hidden, N_ACTIONS), act, "softmax")
    return actor, critic, mean


def build_type_nets(arch: Architecture, n_cells: int, mcfg: MfacConfig, seed: int,
                    hyper: bool = True, include_context: bool = True) -> TypeNets:
    actor_spec, critic_spec, mean_spec = target_specs(arch, n_cells, include_context)
    if hyper:
        actor_spec = HypernetSpec(2, arch.actor_hyper_hidden, actor_spec, arch.activation)
        critic_spec = HypernetSpec(2, arch.critic_hyper_hidden, critic_spec, arch.activation)
    ss = np.random.SeedSequence(seed).generate_state(3)
    return TypeNets(
        Trainable.create(actor_spec, int(ss[0]), mcfg.lr_actor),
        Trainable.create(critic_spec, int(ss[1]), mcfg.lr_critic),
        Trainable.create(mean_spec, int(ss[2]), mcfg.lr_mean),
        include_context,
    )


def _rngs(seed: int) -> dict:
    names = ("context", "env", "policy", "update")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


@dataclass
class TrainedBundle:
    kind: str
    nets: dict
    config: TrainConfig
    n_cells: int
    horizon: int
    buffers: dict
    rng: dict
    episode: int = 0
    phases: int = 0
    updates: dict = field(default_factory=lambda: {t: 0 for t in TYPES})
    history: list = field(default_factory=list)
    update_history: list = field(default_factory=list)
    nonfinite_streak: int = 0

    def n_params(self) -> dict:
        return {t: self.nets[t].n_params() for t in TYPES}


def init_bundle(config: TrainConfig, demand: DemandModel, kind: str = "hyper",
                arch: Optional[Architecture] = None, include_context: bool = True) -> TrainedBundle:
    arch = arch or config.architecture
    hyper = kind == "hyper"
    nets = {}
    ss = np.random.SeedSequence(config.seed).generate_state(2)
    for t, s in zip(TYPES, ss):
        nets[t] = build_type_nets(arch, demand.n_cells, config.mfac, int(s), hyper, include_context)
    width = obs_dim(demand.n_cells, include_context)
    buffers = {t: ReplayBuffer(config.mfac.buffer_capacity, width) for t in TYPES}
    return TrainedBundle(kind, nets, config, demand.n_cells, demand.horizon, buffers,
                         _rngs(config.seed))


def sample_context(space: DesignSpace, rng: np.random.Generator) -> GameContext:
    n_c = int(rng.integers(space.n_c[0], space.n_c[1] + 1))
    alpha = float(rng.uniform(space.alpha[0], space.alpha[1]))
    return GameContext(n_c, alpha)


@dataclass
class AgentPolicy:
    """Everything an agent needs at decision time for one episode."""

    actor_spec: MlpSpec
    actor_params: np.ndarray
    mean_spec: MlpSpec
    mean_params: np.ndarray
    include_context: bool = True
    beta: float = 1.0
    greedy: bool = False


def generate_policies(bundle: TrainedBundle, context: GameContext) -> dict:
    """Generated target parameters for the four actor/critic networks."""
    ctx = context.normalized(bundle.config.total_agents)
    out = {}
    for t in TYPES:
        nets = bundle.nets[t]
        out[f"actor_{t}"] = nets.generate(nets.actor, ctx).copy()
        out[f"critic_{t}"] = nets.generate(nets.critic, ctx).copy()
    return out


def type_policies(bundle: TrainedBundle, context: GameContext, greedy: bool = False) -> dict:
    gen = generate_policies(bundle, context)
    pols = {}
    for t in TYPES:
        nets = bundle.nets[t]
        pols[t] = AgentPolicy(nets.actor_spec, gen[f"actor_{t}"], nets.mean.spec,
                              nets.mean.params.copy(), nets.include_context,
                              bundle.config.mfac.beta, greedy)
    return pols


@dataclass
class EpisodeResult:
    metrics: Metrics
    transitions: dict
    served_fare: np.ndarray
    served_count: np.ndarray
    reward_sum: np.ndarray
    n_decisions: int
    controllable: np.ndarray
    env: Optional[RepositioningEnv] = None


def run_episode(demand: DemandModel, context: GameContext, total_agents: int, policies: dict,
                seed, rng: np.random.Generator, reward_params: Optional[RewardParams] = None,
                mode: str = "train", mean_mode: str = "predicted", overrides: Optional[dict] = None,
                reward_scale: float = 1.0, record_log: bool = False,
                collect=None) -> EpisodeResult:
    """Roll one episode out.

    ``policies`` maps agent type to :class:`AgentPolicy`; ``overrides``
    maps agent ids to their own policy (used for best-response training).
    In ``train`` mode a transition is kept for every acting agent at every
    step, grouped by type, with overridden agents under their id;
    ``collect`` restricts which of those groups are kept.
    ``mean_mode="previous"`` feeds each agent its own true mean action of
    the previous step instead of the mean-action network's prediction.
    Agents alone in their cell get the uniform mean action in either mode,
    matching how the true mean action is defined for them.
    """
    if mean_mode not in ("predicted", "previous"):
        raise ValueError(f"unknown mean_mode {mean_mode!r}")
    overrides = overrides or {}
    comp = Composition.of(context.n_c, total_agents)
    if reward_params is None:
        reward_params = RewardParams(context.alpha, demand.mean_fare())
    env = RepositioningEnv(demand, comp, reward_params, record=record_log)
    state = env.reset(seed)
    n, horizon, n_cells = comp.total, env.horizon, demand.n_cells
    ctx_vec = context.normalized(total_agents)

    group_of = []
    for i in range(n):
        if i in overrides:
            group_of.append(("agent", i))
        else:
            group_of.append(("type", CONTROLLABLE if i < comp.n_c else UNCONTROLLABLE))
    group_of_arr = np.array([hash(g) for g in group_of])
    group_keys = list(dict.fromkeys(group_of))
    group_policy = {g: (overrides[g[1]] if g[0] == "agent" else policies[g[1]]) for g in group_keys}

    prev_action = np.full(n, -1, dtype=np.int64)
    last_mean = np.tile(UNIFORM, (n, 1))
    last_acted = np.full(n, -10, dtype=np.int64)
    keep = mode == "train"
    records = [[] for _ in range(n)] if keep else None
    n_decisions = 0

    for t in range(horizon):
        idle_ids = np.flatnonzero(state.idle)
        if len(idle_ids) == 0:
            env.step(np.zeros(n, dtype=np.int64))
            continue
        cells = state.cell[idle_ids].copy()
        _, inv, counts = np.unique(cells, return_inverse=True, return_counts=True)
        lone = counts[inv.reshape(-1)] == 1
        obs_full = encode_obs(cells, t, horizon, n_cells, ctx_vec)
        own_prev = one_hot(prev_action[idle_ids])
        acts = np.zeros(len(idle_ids), dtype=np.int64)
        m_in = np.zeros((len(idle_ids), N_ACTIONS))
        obs_used = [None] * len(idle_ids)
        gids = group_of_arr[idle_ids]
        for g in group_keys:
            sel = np.flatnonzero(gids == hash(g))
            if len(sel) == 0:
                continue
            pol = group_policy[g]
            o = obs_full[sel] if pol.include_context else obs_full[sel, : n_cells + 1]
            if mean_mode == "predicted":
                m = predict_mean_action(pol.mean_params, pol.mean_spec, o, own_prev[sel])
            else:
                m = previous_step_means(last_mean, last_acted, idle_ids[sel], t)
            m = np.where(lone[sel, None], UNIFORM, m)
            p = policy_probs(pol.actor_params, pol.actor_spec, o, m, pol.beta)
            acts[sel] = sample_actions(p, rng, pol.greedy)
            m_in[sel] = m
            for k, j in enumerate(sel):
                obs_used[j] = o[k]
        true_m = true_mean_actions(cells, acts)
        _, rewards, _ = env.step(acts)
        n_decisions += len(idle_ids)
        if keep:
            for k, i in enumerate(idle_ids):
                records[i].append((obs_used[k], acts[k], true_m[k], m_in[k], own_prev[k],
                                   rewards[i] * reward_scale))
        prev_action[idle_ids] = acts
        last_mean[idle_ids] = true_m
        last_acted[idle_ids] = t

    transitions = {}
    if keep:
        for g in group_keys:
            if collect is not None and g[1] not in collect:
                continue
            members = [i for i in range(n) if group_of[i] == g]
            batch = _chain(records, members, ctx_vec)
            if batch is not None:
                transitions[g[1]] = batch
    return EpisodeResult(env.metrics(), transitions, env.served_fare.copy(),
                         env.served_count.copy(), env.reward_sum.copy(), n_decisions,
                         env.state.controllable.copy(), env if record_log else None)


def previous_step_means(last_mean, last_acted, ids, t: int) -> np.ndarray:
    """Each agent's true mean action from step ``t - 1``; uniform if it did not act then."""
    fresh = (np.asarray(last_acted)[ids] == t - 1)[:, None]
    return np.where(fresh, np.asarray(last_mean)[ids], UNIFORM)


def _chain(records, members, ctx_vec) -> Optional[Batch]:
    """Link each agent's consecutive decisions into transitions."""
    rows = []
    for i in members:
        rec = records[i]
        for j, r in enumerate(rec):
            nxt = rec[j + 1] if j + 1 < len(rec) else None
            rows.append((r, nxt))
    if not rows:
        return None
    width = len(rows[0][0][0])
    m = len(rows)
    zeros_obs = np.zeros(width)
    return Batch(
        obs=np.array([r[0] for r, _ in rows]),
        action=np.array([r[1] for r, _ in rows], dtype=np.int64),
        mean=np.array([r[2] for r, _ in rows]),
        policy_mean=np.array([r[3] for r, _ in rows]),
        own_prev=np.array([r[4] for r, _ in rows]),
        reward=np.array([r[5] for r, _ in rows], dtype=np.float64),
        next_obs=np.array([nx[0] if nx else zeros_obs for _, nx in rows]),
        next_mean=np.array([nx[2] if nx else UNIFORM for _, nx in rows]),
        next_policy_mean=np.array([nx[3] if nx else UNIFORM for _, nx in rows]),
        terminal=np.array([nx is None for _, nx in rows]),
        context=np.tile(ctx_vec, (m, 1)),
    )


def _unique_contexts(ctx):
    ctx_u, inv = np.unique(ctx, axis=0, return_inverse=True)
    return ctx_u, inv.reshape(-1)


def critic_step(nets: TypeNets, batch: Batch, mcfg: MfacConfig) -> float:
    ctx_u, inv = _unique_contexts(batch.context)
    theta = nets.expand(nets.critic, ctx_u, inv)
    target = nets.expand(nets.critic, ctx_u, inv, nets.critic_target)
    actor = nets.expand(nets.actor, ctx_u, inv)
    loss, grad, _ = critic_loss_grad(nets.critic_spec, theta, batch, target, nets.actor_spec,
                                     actor, mcfg.gamma, mcfg.beta)
    if np.isfinite(loss):
        nets.critic.step(nets.route(nets.critic, ctx_u, inv, grad))
    return loss


def actor_step(nets: TypeNets, batch: Batch, mcfg: MfacConfig) -> float:
    ctx_u, inv = _unique_contexts(batch.context)
    theta = nets.expand(nets.actor, ctx_u, inv)
    critic = nets.expand(nets.critic, ctx_u, inv)
    loss, grad = actor_loss_grad(nets.actor_spec, theta, nets.critic_spec, critic, batch,
                                 mcfg.entropy_weight)
    if np.isfinite(loss):
        nets.actor.step(nets.route(nets.actor, ctx_u, inv, grad))
    return loss


def mean_step(nets: TypeNets, batch: Batch) -> float:
    loss, grad = mean_loss_grad(nets.mean.spec, nets.mean.params,
                                mean_net_input(batch.obs, batch.own_prev), batch.mean)
    if np.isfinite(loss):
        nets.mean.step(grad)
    return loss


def update_phase(bundle: TrainedBundle) -> dict:
    cfg = bundle.config
    rng = bundle.rng["update"]
    row = {"phase": bundle.phases + 1, "episode": bundle.episode}
    bad = False
    for t in TYPES:
        buf = bundle.buffers[t]
        if len(buf) < cfg.min_buffer:
            continue
        nets = bundle.nets[t]
        losses = []
        for _ in range(cfg.updates_per_phase):
            batch = buf.sample(cfg.mfac.batch_size, rng)
            cl = critic_step(nets, batch, cfg.mfac)
            al = actor_step(nets, batch, cfg.mfac)
            ml = mean_step(nets, batch)
            losses.append((cl, al, ml))
            bad |= not np.all(np.isfinite((cl, al, ml)))
            bundle.updates[t] += 1
            if bundle.updates[t] % cfg.mfac.target_refresh == 0:
                nets.critic_target = nets.critic.params.copy()
        arr = np.array(losses)
        row[f"critic_loss_{t}"], row[f"actor_loss_{t}"], row[f"mean_loss_{t}"] = arr.mean(0).tolist()
    bundle.phases += 1
    bundle.nonfinite_streak = bundle.nonfinite_streak + 1 if bad else 0
    bundle.update_history.append(row)
    return row


def train(config: TrainConfig, demand: DemandModel, bundle: Optional[TrainedBundle] = None,
          out_dir=None, kind: str = "hyper") -> TrainedBundle:
    """Run (or resume) training until ``config.episodes`` episodes have been played."""
    if bundle is None:
        bundle = init_bundle(config, demand, kind)
    cfg = bundle.config
    fare = cfg.synthetic_fare if cfg.synthetic_fare is not None else demand.mean_fare()
    out_dir = Path(out_dir) if out_dir is not None else None

    while bundle.episode < config.episodes:
        ctx = sample_context(cfg.design_space, bundle.rng["context"])
        pols = type_policies(bundle, ctx)
        env_seed = int(bundle.rng["env"].integers(2 ** 63))
        rp = RewardParams(ctx.alpha, fare, cfg.hourly_rate)
        res = run_episode(demand, ctx, cfg.total_agents, pols, env_seed, bundle.rng["policy"], rp,
                          mode="train", reward_scale=cfg.mfac.reward_scale)
        for t, batch in res.transitions.items():
            bundle.buffers[t].add(batch)
        bundle.episode += 1
        ctrl = res.controllable
        bundle.history.append({
            "episode": bundle.episode, "n_c": ctx.n_c, "alpha": ctx.alpha,
            "served_demand": res.metrics.served_demand,
            "total_requests": res.metrics.total_requests,
            "served_fares": res.metrics.served_fares, "orr": res.metrics.orr,
            "reward_c": float(res.reward_sum[ctrl].mean()) if ctrl.any() else 0.0,
            "reward_u": float(res.reward_sum[~ctrl].mean()) if (~ctrl).any() else 0.0,
            "transitions": res.n_decisions,
        })
        if bundle.episode % cfg.update_interval == 0:
            update_phase(bundle)
            if bundle.nonfinite_streak > cfg.nonfinite_limit:
                if out_dir is not None:
                    save_bundle(bundle, out_dir / "diverged.ckpt")
                raise TrainingDiverged(
                    f"{bundle.nonfinite_streak} consecutive update phases with non-finite losses "
                    f"at episode {bundle.episode}")
        if out_dir is not None and cfg.checkpoint_every and bundle.episode % cfg.checkpoint_every == 0:
            save_bundle(bundle, out_dir / "checkpoint.ckpt")
    return bundle


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _rng_restore(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_bundle(bundle: TrainedBundle, path) -> None:
    arrays, nets_meta = {}, {}
    for t in TYPES:
        nets = bundle.nets[t]
        for name in ("actor", "critic", "mean"):
            net = getattr(nets, name)
            arrays.update(net.state_arrays(f"{t}.{name}"))
            nets_meta[f"{t}.{name}"] = net.state_meta()
        arrays[f"{t}.critic_target"] = nets.critic_target
        nets_meta[f"{t}.include_context"] = nets.include_context
        arrays.update(bundle.buffers[t].state_arrays(f"buffer.{t}"))
    meta = {
        "kind": bundle.kind,
        "config": bundle.config.to_dict(),
        "n_cells": bundle.n_cells,
        "horizon": bundle.horizon,
        "nets": nets_meta,
        "buffers": {t: bundle.buffers[t].state_meta() for t in TYPES},
        "rng": {k: _rng_state(g) for k, g in bundle.rng.items()},
        "episode": bundle.episode,
        "phases": bundle.phases,
        "updates": bundle.updates,
        "history": bundle.history,
        "update_history": bundle.update_history,
        "nonfinite_streak": bundle.nonfinite_streak,
    }
    save_checkpoint(path, arrays, meta, BUNDLE_VERSION)


def load_bundle(path) -> TrainedBundle:
    arrays, meta = load_checkpoint(path, BUNDLE_VERSION)
    nets = {}
    for t in TYPES:
        parts = {name: Trainable.restore(meta["nets"][f"{t}.{name}"], arrays, f"{t}.{name}")
                 for name in ("actor", "critic", "mean")}
        tn = TypeNets(parts["actor"], parts["critic"], parts["mean"],
                      meta["nets"][f"{t}.include_context"])
        tn.critic_target = arrays[f"{t}.critic_target"].copy()
        nets[t] = tn
    buffers = {t: ReplayBuffer.restore(meta["buffers"][t], arrays, f"buffer.{t}") for t in TYPES}
    return TrainedBundle(
        meta["kind"], nets, TrainConfig.from_dict(meta["config"]), meta["n_cells"],
        meta["horizon"], buffers, {k: _rng_restore(s) for k, s in meta["rng"].items()},
        meta["episode"], meta["phases"], meta["updates"], meta["history"],
        meta["update_history"], meta["nonfinite_streak"])


def bundle_hash(bundle: TrainedBundle) -> str:
    import hashlib
    h = hashlib.sha256()
    for t in TYPES:
        for name in ("actor", "critic", "mean"):
            h.update(getattr(bundle.nets[t], name).params.tobytes())
    return h.hexdigest()[:16]


def write_history(bundle: TrainedBundle, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in (("history.csv", bundle.history), ("updates.csv", bundle.update_history)):
        if not rows:
            continue
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
