"""Small differentiable MLP engine with hypernetwork composition.

Parameters live in flat float64 vectors.  Each layer contributes its
weight matrix (row-major, shape ``(n_in, n_out)``) followed by its bias.
Every routine accepts either a shared parameter vector ``(P,)`` or one
vector per sample ``(B, P)``; the second form is what a hypernetwork
produces when a batch mixes several contexts.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "softmax")
CHECKPOINT_FORMAT = "pcmas-checkpoint"


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def describe(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_head": self.output_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d["hidden_activation"], d["output_head"])


@dataclass(frozen=True)
class HypernetSpec:
    """A network mapping a context vector to the flat parameters of ``target``."""

    context_dim: int
    hidden: tuple
    target: MlpSpec
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.context_dim < 1:
            raise ValueError("context_dim must be positive")

    @property
    def net(self) -> MlpSpec:
        return MlpSpec(
            (self.context_dim, *self.hidden, param_count(self.target)),
            self.hidden_activation,
            "linear",
        )

    def describe(self) -> dict:
        return {
            "context_dim": self.context_dim,
            "hidden": list(self.hidden),
            "target": self.target.describe(),
            "hidden_activation": self.hidden_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypernetSpec":
        return cls(d["context_dim"], tuple(d["hidden"]), MlpSpec.from_dict(d["target"]),
                   d["hidden_activation"])


AnySpec = Union[MlpSpec, HypernetSpec]


@lru_cache(maxsize=None)
def _layout(spec: MlpSpec):
    out = []
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        out.append((offset, offset + n_in * n_out, n_in, n_out))
        offset += n_in * n_out + n_out
    return tuple(out), offset


def param_count(spec: AnySpec) -> int:
    if isinstance(spec, HypernetSpec):
        return param_count(spec.net)
    return _layout(spec)[1]


def layer_slices(spec: MlpSpec):
    """(weight slice, bias slice, n_in, n_out) for each layer."""
    return [
        (slice(w0, b0), slice(b0, b0 + n_out), n_in, n_out)
        for w0, b0, n_in, n_out in _layout(spec)[0]
    ]


def _split(spec: MlpSpec, params: np.ndarray):
    lead = params.shape[:-1]
    layers = []
    for w0, b0, n_in, n_out in _layout(spec)[0]:
        W = params[..., w0:b0].reshape(lead + (n_in, n_out))
        b = params[..., b0:b0 + n_out]
        layers.append((W, b))
    return layers


def _affine(x, W, b):
    if W.ndim == 2:
        return x @ W + b
    return np.matmul(x[:, None, :], W)[:, 0, :] + b


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _check(spec: MlpSpec, params, x):
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    P = param_count(spec)
    if params.shape[-1] != P or params.ndim > 2:
        raise ShapeError(f"expected {P} parameters for {spec.layer_sizes}, got shape {params.shape}")
    if x.shape[-1] != spec.in_dim or x.ndim > 2:
        raise ShapeError(f"expected input width {spec.in_dim}, got shape {x.shape}")
    if params.ndim == 2:
        if x.ndim != 2 or x.shape[0] != params.shape[0]:
            raise ShapeError(
                f"per-sample parameters {params.shape} need a batch of {params.shape[0]} inputs, "
                f"got {x.shape}")
    return params, x


def _run(spec: MlpSpec, params, x):
    layers = _split(spec, params)
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(layers):
        z = _affine(h, W, b)
        pre.append(z)
        if i < len(layers) - 1:
            h = _activate(spec.hidden_activation, z)
        elif spec.output_head == "softmax":
            h = _softmax(z)
        else:
            h = z
        acts.append(h)
    return layers, acts, pre


def forward(spec: MlpSpec, params, x) -> np.ndarray:
    """Evaluate the network on one input ``(in,)`` or a batch ``(B, in)``."""
    params, x = _check(spec, params, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    _, acts, _ = _run(spec, params, xb)
    y = acts[-1]
    return y[0] if single else y


def backward(spec: MlpSpec, params, x, output_grad):
    """Gradients of a scalar loss given dL/d(output).

    Returns ``(param_grad, input_grad)``.  With shared parameters the
    parameter gradient is summed over the batch; with per-sample
    parameters it keeps one row per sample.
    """
    params, x = _check(spec, params, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    g = np.asarray(output_grad, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], spec.out_dim):
        raise ShapeError(f"output grad shape {g.shape} does not match {(xb.shape[0], spec.out_dim)}")

    layers, acts, pre = _run(spec, params, xb)
    if spec.output_head == "softmax":
        y = acts[-1]
        g = y * (g - (g * y).sum(axis=-1, keepdims=True))

    shared = params.ndim == 1
    grad = np.zeros_like(params)
    slices = layer_slices(spec)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_prev = acts[i]
        ws, bs, n_in, n_out = slices[i]
        if shared:
            grad[ws] = (a_prev.T @ g).ravel()
            grad[bs] = g.sum(axis=0)
            dx = g @ W.T
        else:
            grad[:, ws] = (a_prev[:, :, None] * g[:, None, :]).reshape(len(g), -1)
            grad[:, bs] = g
            dx = np.matmul(g[:, None, :], np.swapaxes(W, 1, 2))[:, 0, :]
        if i > 0:
            if spec.hidden_activation == "relu":
                g = dx * (pre[i - 1] > 0)
            else:
                g = dx * (1.0 - acts[i] ** 2)
        else:
            g = dx
    if single:
        return (grad if shared else grad[0]), g[0]
    return grad, g


def hyper_forward(hspec: HypernetSpec, phi, context) -> np.ndarray:
    out = forward(hspec.net, phi, context)
    assert out.shape[-1] == param_count(hspec.target), "hypernetwork output width mismatch"
    return out


def hyper_backward(hspec: HypernetSpec, phi, context, target_param_grad) -> np.ndarray:
    """Chain a gradient on generated parameters back onto the hypernetwork weights."""
    tg = np.asarray(target_param_grad, dtype=np.float64)
    if tg.shape[-1] != param_count(hspec.target):
        raise ShapeError(f"target grad width {tg.shape[-1]} != {param_count(hspec.target)}")
    phi_grad, _ = backward(hspec.net, phi, context, tg)
    return phi_grad


def _uniform_init(rng, spec: MlpSpec) -> np.ndarray:
    params = np.empty(param_count(spec))
    for ws, bs, n_in, n_out in layer_slices(spec):
        bound = 1.0 / np.sqrt(n_in)
        params[ws] = rng.uniform(-bound, bound, size=n_in * n_out)
        params[bs] = rng.uniform(-bound, bound, size=n_out)
    return params


def init_params(spec: AnySpec, seed: int) -> np.ndarray:
    """Deterministic initialization.

    Plain networks use fan-in scaled uniform ranges.  For a hypernetwork
    the final generating layer is built so that every generated target
    layer starts in that same range: its bias is a fan-in scaled sample of
    the target layer and its weights are shrunk by ``1/sqrt(h_last)``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec, MlpSpec):
        return _uniform_init(rng, spec)

    net = spec.net
    phi = _uniform_init(rng, net)
    ws, bs, h_last, n_out = layer_slices(net)[-1]
    col_bound = np.empty(n_out)
    for t_ws, t_bs, t_in, _ in layer_slices(spec.target):
        col_bound[t_ws] = 1.0 / np.sqrt(t_in)
        col_bound[t_bs] = 1.0 / np.sqrt(t_in)
    W = rng.uniform(-1.0, 1.0, size=(h_last, n_out)) * col_bound / np.sqrt(h_last)
    phi[ws] = W.ravel()
    phi[bs] = rng.uniform(-1.0, 1.0, size=n_out) * col_bound
    return phi


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params, grads, state: AdamState, learning_rate: float):
    """One Adam update.  Returns ``(params, state, applied)``.

    Non-finite gradients leave params and moments untouched and bump
    ``state.skipped``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ShapeError(f"grad shape {grads.shape} != param shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        return params, state, False
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    params = params - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state, True


@dataclass
class Trainable:
    """A parameter vector with its optimizer, plain network or hypernetwork."""

    spec: AnySpec
    params: np.ndarray
    lr: float
    opt: AdamState = field(default=None)

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamState.zeros_like(self.params)

    @classmethod
    def create(cls, spec: AnySpec, seed: int, lr: float, zero: bool = False) -> "Trainable":
        params = np.zeros(param_count(spec)) if zero else init_params(spec, seed)
        return cls(spec, params, lr)

    def step(self, grad) -> bool:
        self.params, self.opt, ok = adam_step(self.params, grad, self.opt, self.lr)
        return ok

    def copy(self) -> "Trainable":
        opt = AdamState(self.opt.m.copy(), self.opt.v.copy(), self.opt.t, self.opt.beta1,
                        self.opt.beta2, self.opt.eps, self.opt.skipped)
        return Trainable(self.spec, self.params.copy(), self.lr, opt)

    def state_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.params": self.params, f"{prefix}.m": self.opt.m, f"{prefix}.v": self.opt.v}

    def state_meta(self) -> dict:
        kind = "hyper" if isinstance(self.spec, HypernetSpec) else "mlp"
        return {"kind": kind, "spec": self.spec.describe(), "lr": self.lr, "t": self.opt.t,
                "skipped": self.opt.skipped}

    @classmethod
    def restore(cls, meta: dict, arrays: dict, prefix: str) -> "Trainable":
        spec_cls = HypernetSpec if meta["kind"] == "hyper" else MlpSpec
        spec = spec_cls.from_dict(meta["spec"])
        opt = AdamState(arrays[f"{prefix}.m"].copy(), arrays[f"{prefix}.v"].copy(), meta["t"],
                        skipped=meta["skipped"])
        return cls(spec, arrays[f"{prefix}.params"].copy(), meta["lr"], opt)


def save_checkpoint(path, arrays: dict, meta: dict, version: int) -> None:
    """Write arrays plus a JSON header into one zip container.

    Entries carry a fixed timestamp so identical content gives identical bytes.
    """
    header = {"format": CHECKPOINT_FORMAT, "version": version, "meta": meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path, version: int):
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/"):
                    arrays[name[len("arrays/"):-len(".npy")]] = np.load(
                        io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != version:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} does not match expected {version}")
    return arrays, header["meta"]
