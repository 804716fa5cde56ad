"""Mean-field actor-critic pieces: encodings, replay, and update rules.

Loss/gradient routines accept shared ``(P,)`` or per-sample ``(B, P)``
parameters and return gradients of the same shape, so the trainer can
route them either straight into a plain network or back through a
hypernetwork.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .diffcore import MlpSpec, Trainable, backward, forward
from .repoenv import N_ACTIONS

UNIFORM = np.full(N_ACTIONS, 1.0 / N_ACTIONS)


@dataclass
class MfacConfig:
    gamma: float = 1.0
    lr_actor: float = 0.00004
    lr_critic: float = 0.0003
    lr_mean: float = 0.0001
    entropy_weight: float = 0.01
    # Exploration temperature on actor logits; 1.0 leaves the softmax head as is.
    beta: float = 1.0
    reward_scale: float = 1.0
    batch_size: int = 256
    buffer_capacity: int = 100_000
    target_refresh: int = 200

    def __post_init__(self):
        for name in ("lr_actor", "lr_critic", "lr_mean"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def obs_dim(n_cells: int, include_context: bool = True) -> int:
    return n_cells + 1 + (2 if include_context else 0)


def encode_obs(cells, t: int, horizon: int, n_cells: int, context=None) -> np.ndarray:
    """Observation rows: cell one-hot, time in [0, 1], then ``context`` if given."""
    cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
    width = obs_dim(n_cells, context is not None)
    out = np.zeros((len(cells), width))
    out[np.arange(len(cells)), cells] = 1.0
    out[:, n_cells] = t / horizon
    if context is not None:
        out[:, n_cells + 1:] = context
    return out


def observe(state, agent_id: int, n_cells: int, context=None) -> np.ndarray:
    return encode_obs([state.cell[agent_id]], state.t, state.horizon, n_cells, context)[0]


def one_hot(actions, width: int = N_ACTIONS) -> np.ndarray:
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    out = np.zeros((len(actions), width))
    valid = actions >= 0
    out[np.flatnonzero(valid), actions[valid]] = 1.0
    return out


def true_mean_actions(cells, actions) -> np.ndarray:
    """Per agent, the action distribution of the *other* agents sharing its cell.

    Agents alone in their cell get the uniform distribution.
    """
    cells = np.asarray(cells, dtype=np.int64)
    oh = one_hot(actions)
    if len(cells) == 0:
        return oh
    uniq, inv = np.unique(cells, return_inverse=True)
    sums = np.zeros((len(uniq), N_ACTIONS))
    np.add.at(sums, inv, oh)
    counts = np.bincount(inv)
    others = sums[inv] - oh
    n_other = (counts[inv] - 1)[:, None]
    return np.where(n_other > 0, others / np.maximum(n_other, 1), UNIFORM)


def _tempered(probs, beta):
    if beta == 1.0:
        return probs
    logits = beta * np.log(np.maximum(probs, 1e-300))
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs(actor_params, spec: MlpSpec, observation, mean_action, beta: float = 1.0):
    x = np.concatenate([np.atleast_2d(observation), np.atleast_2d(mean_action)], axis=1)
    p = _tempered(forward(spec, actor_params, x), beta)
    return p[0] if np.ndim(observation) == 1 else p


def q_values(critic_params, spec: MlpSpec, observation, mean_action):
    x = np.concatenate([np.atleast_2d(observation), np.atleast_2d(mean_action)], axis=1)
    q = forward(spec, critic_params, x)
    return q[0] if np.ndim(observation) == 1 else q


def q_value(critic_params, spec: MlpSpec, observation, action: int, mean_action) -> float:
    return float(q_values(critic_params, spec, observation, mean_action)[action])


def mean_net_input(observation, own_action_onehot):
    return np.concatenate([np.atleast_2d(observation), np.atleast_2d(own_action_onehot)], axis=1)


def predict_mean_action(mean_params, spec: MlpSpec, observation, own_action_onehot):
    p = forward(spec, mean_params, mean_net_input(observation, own_action_onehot))
    return p[0] if np.ndim(observation) == 1 else p


def sample_actions(probs, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    probs = np.atleast_2d(probs)
    if greedy:
        return probs.argmax(axis=1)
    u = rng.random(len(probs))
    a = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(a, N_ACTIONS - 1)


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    mean: np.ndarray
    policy_mean: np.ndarray
    own_prev: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_mean: np.ndarray
    next_policy_mean: np.ndarray
    terminal: np.ndarray
    context: np.ndarray

    def __len__(self):
        return len(self.action)

    def take(self, idx) -> "Batch":
        return Batch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def concat(cls, parts) -> "Batch":
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                      for f in fields(cls)})


class ReplayBuffer:
    """Bounded FIFO ring buffer of transitions stored column-wise."""

    def __init__(self, capacity: int, obs_width: int):
        self.capacity = int(capacity)
        self.obs_width = obs_width
        w = {"obs": obs_width, "next_obs": obs_width, "mean": N_ACTIONS, "policy_mean": N_ACTIONS,
             "own_prev": N_ACTIONS, "next_mean": N_ACTIONS, "next_policy_mean": N_ACTIONS,
             "context": 2}
        self.data = {}
        for f in fields(Batch):
            if f.name == "action":
                self.data[f.name] = np.zeros(self.capacity, dtype=np.int64)
            elif f.name == "terminal":
                self.data[f.name] = np.zeros(self.capacity, dtype=bool)
            elif f.name == "reward":
                self.data[f.name] = np.zeros(self.capacity)
            else:
                self.data[f.name] = np.zeros((self.capacity, w[f.name]))
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, batch: Batch) -> None:
        n = len(batch)
        if n == 0:
            return
        if not np.all(np.isfinite(batch.reward)):
            raise ValueError("non-finite reward in transition batch")
        if batch.action.min() < 0 or batch.action.max() >= N_ACTIONS:
            raise ValueError("action outside the action set")
        if n > self.capacity:
            batch = batch.take(slice(n - self.capacity, n))
            n = self.capacity
        idx = (self.head + np.arange(n)) % self.capacity
        for name, arr in self.data.items():
            arr[idx] = getattr(batch, name)
        self.head = (self.head + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        n = min(n, self.size)
        idx = rng.choice(self.size, size=n, replace=False)
        return Batch(**{name: arr[idx] for name, arr in self.data.items()})

    def state_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v[: self.size] for k, v in self.data.items()}

    def state_meta(self) -> dict:
        return {"capacity": self.capacity, "obs_width": self.obs_width, "size": self.size,
                "head": self.head}

    @classmethod
    def restore(cls, meta: dict, arrays: dict, prefix: str) -> "ReplayBuffer":
        buf = cls(meta["capacity"], meta["obs_width"])
        for k in buf.data:
            buf.data[k][: meta["size"]] = arrays[f"{prefix}.{k}"]
        buf.size, buf.head = meta["size"], meta["head"]
        return buf


def td_targets(reward, next_value, terminal, gamma: float) -> np.ndarray:
    return reward + gamma * (~terminal) * next_value


def critic_loss_grad(critic_spec: MlpSpec, critic_params, batch: Batch, target_params,
                     actor_spec: MlpSpec, actor_params, gamma: float = 1.0, beta: float = 1.0):
    """Squared TD error with an expected-SARSA bootstrap under the current actor.

    Returns ``(loss, grad, targets)``.
    """
    n = len(batch)
    x = np.concatenate([batch.obs, batch.mean], axis=1)
    q_all = forward(critic_spec, critic_params, x)
    q = q_all[np.arange(n), batch.action]
    q_next = q_values(target_params, critic_spec, batch.next_obs, batch.next_mean)
    pi_next = policy_probs(actor_params, actor_spec, batch.next_obs, batch.next_policy_mean, beta)
    y = td_targets(batch.reward, (pi_next * q_next).sum(axis=1), batch.terminal, gamma)
    err = q - y
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q_all)
    dq[np.arange(n), batch.action] = 2.0 * err / n
    grad, _ = backward(critic_spec, critic_params, x, dq)
    return loss, grad, y


def actor_loss_grad(actor_spec: MlpSpec, actor_params, critic_spec: MlpSpec, critic_params,
                    batch: Batch, entropy_weight: float = 0.01):
    """Policy-gradient loss with advantage ``Q(o,a,ā) - E_π Q(o,·,ā)`` and an entropy bonus."""
    n = len(batch)
    xa = np.concatenate([batch.obs, batch.policy_mean], axis=1)
    pi = forward(actor_spec, actor_params, xa)
    q_all = q_values(critic_params, critic_spec, batch.obs, batch.mean)
    adv = q_all[np.arange(n), batch.action] - (pi * q_all).sum(axis=1)
    pa = np.maximum(pi[np.arange(n), batch.action], 1e-300)
    logpi = np.log(np.maximum(pi, 1e-300))
    entropy = -(pi * logpi).sum(axis=1)
    loss = float(-np.mean(adv * np.log(pa)) - entropy_weight * np.mean(entropy))
    dpi = np.zeros_like(pi)
    dpi[np.arange(n), batch.action] = -adv / (n * pa)
    dpi += entropy_weight * (logpi + 1.0) / n
    grad, _ = backward(actor_spec, actor_params, xa, dpi)
    return loss, grad


def mean_action_loss(pred, labels) -> float:
    """``(1/n) Σ ||ā - â||²``."""
    pred, labels = np.atleast_2d(pred), np.atleast_2d(labels)
    return float(np.sum((pred - labels) ** 2) / len(labels))


def mean_loss_grad(spec: MlpSpec, params, inputs, labels):
    pred = forward(spec, params, inputs)
    diff = pred - labels
    n = len(labels)
    loss = mean_action_loss(pred, labels)
    grad, _ = backward(spec, params, inputs, 2.0 * diff / n)
    return loss, grad


def _apply(net: Trainable, loss: float, grad) -> bool:
    if not np.isfinite(loss):
        net.opt.skipped += 1
        return False
    return net.step(grad)


def mean_net_update(net: Trainable, inputs, labels):
    """One gradient step on the mean-action loss.  Returns the pre-step loss."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    loss, grad = mean_loss_grad(net.spec, net.params, inputs, labels)
    _apply(net, loss, grad)
    return loss


def critic_update(critic: Trainable, target_params, actor_spec, actor_params, batch: Batch,
                  gamma: float = 1.0):
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grad, _ = critic_loss_grad(critic.spec, critic.params, batch, target_params, actor_spec,
                                     actor_params, gamma)
    _apply(critic, loss, grad)
    return loss


def actor_update(actor: Trainable, critic_spec, critic_params, batch: Batch,
                 entropy_weight: float = 0.01):
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grad = actor_loss_grad(actor.spec, actor.params, critic_spec, critic_params, batch,
                                 entropy_weight)
    _apply(actor, loss, grad)
    return loss
