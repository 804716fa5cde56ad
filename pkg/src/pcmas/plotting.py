"""PNG rendering of report tables.  Each figure is drawn from rows already written as CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# No timestamps or version strings, so reruns give identical files.
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _smooth(x, w):
    x = np.asarray(x, float)
    if len(x) < w or w < 2:
        return x
    return np.convolve(x, np.ones(w) / w, mode="valid")


def training_curves(history: list, updates: list, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    w = max(1, len(history) // 50)
    sd = _smooth([h["served_demand"] for h in history], w)
    axes[0].plot(np.arange(len(sd)) + w, sd)
    axes[0].set_xlabel("episode")
    axes[0].set_ylabel("served demand (moving avg)")
    for key in ("critic_loss_c", "critic_loss_u"):
        pts = [(u["episode"], u[key]) for u in updates if key in u]
        if pts:
            e, v = zip(*pts)
            axes[1].plot(e, v, label=key)
    axes[1].set_xlabel("episode")
    axes[1].set_ylabel("critic loss")
    axes[1].set_yscale("log")
    if axes[1].lines:
        axes[1].legend()
    return _save(fig, path)


def nashconv_bars(plot_rows: list, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.6))
    types = sorted({r["agent_type"] for r in plot_rows})
    labels = sorted({(r["n_c"], r["alpha"]) for r in plot_rows})
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(types))
    for i, t in enumerate(types):
        vals = {(r["n_c"], r["alpha"]): r for r in plot_rows if r["agent_type"] == t}
        m = [vals[l]["mean"] if l in vals else np.nan for l in labels]
        s = [vals[l]["std"] if l in vals else 0.0 for l in labels]
        ax.bar(x + i * width, m, width, yerr=s, label=f"type {t}", capsize=3)
    ax.set_xticks(x + width * (len(types) - 1) / 2)
    ax.set_xticklabels([f"{n}/{a:.2f}" for n, a in labels], rotation=45)
    ax.set_xlabel("n_c / alpha")
    ax.set_ylabel("NashConv (served fare)")
    ax.axhline(0, color="k", lw=0.5)
    ax.legend()
    return _save(fig, path)


def sweep_heatmap(rows: list, path, title: str = "") -> Path:
    n_vals = sorted({r["n_c"] for r in rows})
    a_vals = sorted({r["alpha"] for r in rows})
    grid = np.full((len(n_vals), len(a_vals)), np.nan)
    for r in rows:
        grid[n_vals.index(r["n_c"]), a_vals.index(r["alpha"])] = r["objective"]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(a_vals)))
    ax.set_xticklabels([f"{a:.2f}" for a in a_vals], rotation=45)
    ax.set_yticks(range(len(n_vals)))
    ax.set_yticklabels(n_vals)
    ax.set_xlabel("alpha")
    ax.set_ylabel("n_c")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="objective")
    return _save(fig, path)


def paired_bars(labels, a, b, names, path, ylabel: str = "objective") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    x = np.arange(len(labels))
    ax.bar(x - 0.2, a, 0.4, label=names[0])
    ax.bar(x + 0.2, b, 0.4, label=names[1])
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30)
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save(fig, path)


def utility_bars(rows: list, path) -> Path:
    totals = sorted({r["total_agents"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for ax, key in zip(axes, ("served_demand", "served_fares")):
        fracs = sorted({r["fraction"] for r in rows})
        width = 0.8 / max(1, len(fracs))
        for i, f in enumerate(fracs):
            vals = [next((r[key] for r in rows if r["total_agents"] == n and r["fraction"] == f),
                         np.nan) for n in totals]
            ax.bar(np.arange(len(totals)) + i * width, vals, width, label=f"{f:.0%} controllable")
        ax.set_xticks(np.arange(len(totals)) + width * (len(fracs) - 1) / 2)
        ax.set_xticklabels([f"N={n}" for n in totals])
        ax.set_ylabel(key.replace("_", " "))
    axes[0].legend(fontsize=7)
    return _save(fig, path)
