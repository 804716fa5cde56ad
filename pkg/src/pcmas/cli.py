"""``pcmas`` command line: ingest, train, evaluate, optimize and study."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .config import OUTPUT_ROOT_ENV, RunConfig, load_config
from .designer import (
    ObjectiveSpec,
    default_grid,
    scenario_sweep,
    segment_study,
    utility_study,
)
from .diffcore import CheckpointError
from .evalsuite import (
    BASELINE_KINDS,
    BrConfig,
    SYSTEM_KINDS,
    ablate_mean_net,
    context_grid,
    desk_br_config,
    make_baseline,
    nashconv,
    nashconv_plot_data,
    param_report,
    random_system,
)
from .hyperdesign import (
    Architecture,
    DesignSpace,
    GameContext,
    TrainConfig,
    bundle_hash,
    desk_config,
    init_bundle,
    load_bundle,
    save_bundle,
    train,
    write_history,
)
from .mfac import MfacConfig
from .taxidata import (
    SAMPLE_SCHEMA,
    TLC2014_SCHEMA,
    DemandModel,
    GridSpec,
    IngestReport,
    SchemaError,
    build_demand,
    filter_window,
    parse_trips,
    synthetic_demand,
)

log = logging.getLogger("pcmas")

SCHEMAS = {"sample": SAMPLE_SCHEMA, "tlc2014": TLC2014_SCHEMA}


class UsageError(Exception):
    """Bad input detected before any compute; exit code 2."""


# -- output helpers -----------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_rows(path: Path, rows: list, config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(k for r in rows for k in r)) + ["config_hash"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**{k: _fmt(v) for k, v in r.items()}, "config_hash": config_hash})
    return path


def write_json(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_fmt)
        fh.write("\n")
    return path


# -- config → library objects -------------------------------------------------


def load_demand(rc: RunConfig) -> DemandModel:
    if rc.demand.path is not None:
        p = Path(rc.demand.path)
        if not p.exists():
            raise UsageError(f"demand model not found: {p}")
        return DemandModel.load(p)
    s = rc.demand.synthetic
    return synthetic_demand(s.rows, s.cols, s.horizon, s.hotspots, s.background, s.base_fare,
                            s.fare_per_cell, seed=s.seed)


def build_train_config(rc: RunConfig, total_agents=None, episodes=None) -> TrainConfig:
    t = rc.train
    total = rc.total_agents if total_agents is None else total_agents
    base = desk_config() if t.preset == "desk" else TrainConfig()
    n_range = tuple(t.n_c_range) if t.n_c_range else (0, total)
    a_range = tuple(t.alpha_range) if t.alpha_range else (0.0, 1.0)
    arch = Architecture(**t.architecture.model_dump()) if t.architecture else base.architecture
    mfac = MfacConfig(**t.mfac.model_dump()) if t.mfac else base.mfac
    eps = episodes if episodes is not None else (t.episodes if t.episodes is not None else base.episodes)
    try:
        return dataclasses.replace(
            base, total_agents=total, seed=rc.seed, episodes=eps,
            update_interval=t.update_interval or base.update_interval,
            updates_per_phase=t.updates_per_phase or base.updates_per_phase,
            design_space=DesignSpace(n_range, a_range), architecture=arch, mfac=mfac,
            synthetic_fare=t.synthetic_fare, hourly_rate=t.hourly_rate,
            checkpoint_every=t.checkpoint_every, nonfinite_limit=t.nonfinite_limit)
    except ValueError as e:
        raise UsageError(str(e)) from e


def build_br_config(rc: RunConfig) -> BrConfig:
    b = rc.eval.br
    over = {k: v for k, v in b.model_dump().items() if k != "preset" and v is not None}
    over["eval_runs"] = rc.eval.eval_runs
    return desk_br_config(**over) if b.preset == "desk" else BrConfig(**over)


def _system(args, rc) -> str:
    return args.system or rc.train.system


def new_system(kind: str, cfg: TrainConfig, demand: DemandModel):
    if kind == "hyper":
        return init_bundle(cfg, demand, "hyper")
    if kind == "Random":
        return random_system(cfg, demand)
    return make_baseline(kind, cfg, demand)


def obtain_bundle(args, rc: RunConfig, demand: DemandModel):
    kind = _system(args, rc)
    if kind == "Random":
        return random_system(build_train_config(rc), demand)
    path = Path(args.bundle) if args.bundle else rc.output_path() / "train" / kind / "bundle.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run 'pcmas train' first)")
    return load_bundle(path)


# -- commands -------------------------------------------------------------------


def cmd_ingest(args) -> int:
    grid = GridSpec(tuple(args.origin), args.rows, args.cols, args.cell_km)
    report = IngestReport()
    path = Path(args.trips)
    try:
        with open(path, encoding="utf-8") as fh:
            trips, report = parse_trips(fh, SCHEMAS[args.schema], args.delimiter, report)
    except OSError as e:
        print(f"error: cannot read {path}: {e}", file=sys.stderr)
        return 1
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    window = trips if args.all_times else filter_window(trips, weekday_only=not args.all_days)
    report.in_window = len(window)
    model = build_demand(window, grid, args.bin_minutes, args.scale, args.horizon, report=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    stats = report.as_dict()
    stats["model"] = {"path": str(out), "rows": model.rows, "cols": model.cols,
                      "horizon": model.horizon, "mean_rate_per_step": float(model.rates.sum(1).mean())}
    write_json(out.with_suffix(".report.json"), stats)
    print(f"rows read {stats['rows_read']}, parsed {stats['parsed']}, "
          f"skipped {stats['skipped_total']} {stats['skipped']}")
    print(f"in window {stats['in_window']}, in zone {stats['in_zone']}, "
          f"out of zone {stats['out_of_zone']}, days {stats['days']}")
    print(f"demand model written to {out}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    cfg = build_train_config(rc, episodes=args.episodes)
    kind = _system(args, rc)
    if kind == "Random":
        raise UsageError("the Random system has nothing to train")
    out = rc.output_path() / "train" / kind
    ckpt = out / "checkpoint.ckpt"
    if args.resume and ckpt.exists():
        bundle = load_bundle(ckpt)
        bundle.config = dataclasses.replace(bundle.config, episodes=cfg.episodes)
        log.info("resuming from episode %d", bundle.episode)
    else:
        bundle = new_system(kind, cfg, demand)
    bundle = train(bundle.config, demand, bundle=bundle, out_dir=out)
    save_bundle(bundle, out / "bundle.ckpt")
    write_history(bundle, out)
    h = rc.config_hash()
    write_rows(out / "params.csv", param_report({kind: bundle}), h)
    summary = {"config_hash": h, "system": kind, "episodes": bundle.episode,
               "bundle_hash": bundle_hash(bundle), "update_phases": bundle.phases,
               "version": __version__}
    write_json(out / "summary.json", summary)
    if not args.no_figures and bundle.history:
        from .plotting import training_curves
        training_curves(bundle.history, bundle.update_history, out / "training.png")
    print(f"trained {kind} for {bundle.episode} episodes; bundle {out / 'bundle.ckpt'}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    bundle = obtain_bundle(args, rc, demand)
    kind = _system(args, rc)
    br = build_br_config(rc)
    if rc.eval.contexts:
        contexts = [GameContext(int(n), float(a)) for n, a in rc.eval.contexts]
    else:
        contexts = context_grid(bundle.config.total_agents, rc.eval.n_c_segments,
                                rc.eval.alpha_segments, bundle.config.design_space)
    for c in contexts:
        if not bundle.config.design_space.contains(c):
            raise UsageError(f"context {c} lies outside the trained design space")
    rows = nashconv(bundle, demand, contexts, rc.eval.seeds, br, rc.eval.types)
    out = rc.output_path() / "eval" / kind
    h = rc.config_hash()
    write_rows(out / "nashconv.csv", [dict(system=kind, **r.as_dict()) for r in rows], h)
    plot = nashconv_plot_data(rows)
    write_rows(out / "nashconv_plot.csv", plot, h)
    if not args.no_figures and plot:
        from .plotting import nashconv_bars
        nashconv_bars(plot, out / "nashconv.png")
    for r in plot:
        print(f"n_c={r['n_c']} alpha={r['alpha']:.2f} type={r['agent_type']}: "
              f"NashConv {r['mean']:.3f} ± {r['std']:.3f}")
    return 0


def cmd_optimize(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    bundle = obtain_bundle(args, rc, demand)
    o = rc.optimize
    n_def, a_def = default_grid(bundle.config.design_space, o.grid_points)
    n_vals = o.n_c_values if o.n_c_values is not None else n_def
    a_vals = o.alpha_values if o.alpha_values is not None else a_def
    space = bundle.config.design_space
    for n in n_vals:
        for a in a_vals:
            if not space.contains(GameContext(int(n), float(a))):
                raise UsageError(f"grid cell ({n}, {a}) lies outside the trained design space")
    sweeps = scenario_sweep(bundle, demand, o.k_values, o.hourly_rates, n_vals, a_vals,
                            o.eval_runs, rc.seed, rc.workers)
    out = rc.output_path() / "optimize" / _system(args, rc)
    h = rc.config_hash()
    summaries = []
    for s in sweeps:
        tag = f"k{s.spec.k:g}_rate{s.spec.hourly_rate:g}"
        rows = [dict(r, bundle_hash=s.meta["bundle_hash"], seed=rc.seed) for r in s.rows()]
        write_rows(out / f"sweep_{tag}.csv", rows, h)
        summaries.append(s.summary())
        if not args.no_figures:
            from .plotting import sweep_heatmap
            sweep_heatmap(s.rows(), out / f"sweep_{tag}.png", f"k={s.spec.k:g}, rate={s.spec.hourly_rate:g}")
        print(f"k={s.spec.k:g} rate={s.spec.hourly_rate:g}: best n_c={s.best.n_c} "
              f"alpha={s.best.alpha:.2f} F={s.best.objective:.4f} baseline={s.baseline.objective:.4f} "
              f"improvement {s.improvement_rel:+.2%} ({s.improvement_abs:+.4f})")
    write_rows(out / "improvements.csv", summaries, h)
    return 0


def cmd_ablate(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    bundle = obtain_bundle(args, rc, demand)
    a = rc.ablate
    rows = []
    for n, alpha in a.contexts:
        rows += ablate_mean_net(bundle, demand, GameContext(int(n), float(alpha)), a.eval_runs,
                                rc.seed, a.k, a.hourly_rate)
    out = rc.output_path() / "ablate" / _system(args, rc)
    h = rc.config_hash()
    write_rows(out / "ablation.csv", [r.as_dict() for r in rows], h)
    pred = float(np.mean([r.objective_predicted for r in rows]))
    prev = float(np.mean([r.objective_previous for r in rows]))
    d = np.array([r.delta for r in rows])
    summary = {"config_hash": h, "objective_predicted": pred, "objective_previous": prev,
               "delta": pred - prev, "delta_se": float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0,
               "relative_delta": (pred - prev) / prev if prev else 0.0,
               "episodes_per_arm": len(rows), "paired_seeds": True}
    write_json(out / "ablation_summary.json", summary)
    if not args.no_figures:
        from .plotting import paired_bars
        labels = [f"{n}/{al:.2f}" for n, al in a.contexts]
        per = [[r for r in rows if (r.n_c, r.alpha) == (int(n), float(al))] for n, al in a.contexts]
        paired_bars(labels, [np.mean([r.objective_predicted for r in p]) for p in per],
                    [np.mean([r.objective_previous for r in p]) for p in per],
                    ("predicted mean action", "previous-step mean action"),
                    out / "ablation.png")
    print(f"predicted {pred:.4f} vs previous {prev:.4f}: delta {pred - prev:+.4f} "
          f"({summary['relative_delta']:+.2%}), {len(rows)} paired episodes per arm")
    return 0


def cmd_segment(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    s = rc.segment
    cfg = build_train_config(rc, episodes=s.budget)
    res = segment_study(cfg, demand, ObjectiveSpec(s.k, s.hourly_rate, s.eval_runs),
                        s.points_per_axis, rc.seed)
    out = rc.output_path() / "segment"
    h = rc.config_hash()
    write_rows(out / "segment.csv", res["rows"], h)
    summary = {k: v for k, v in res.items() if k != "rows"}
    summary["config_hash"] = h
    write_json(out / "segment_summary.json", summary)
    if not args.no_figures:
        from .plotting import paired_bars
        segs = sorted({r["segment"] for r in res["rows"]})
        pick = lambda key: [np.mean([r[key] for r in res["rows"] if r["segment"] == s_]) for s_ in segs]
        paired_bars([f"segment {i}" for i in segs], pick("objective_full"),
                    pick("objective_segmented"), ("full space", "per segment"), out / "segment.png")
    print(f"overall objective: full {res['overall_full']:.4f}, segmented "
          f"{res['overall_segmented']:.4f}, delta {res['delta_mean']:+.4f} ± {res['delta_se']:.4f}")
    return 0


def cmd_utility(args, rc: RunConfig) -> int:
    demand = load_demand(rc)
    u = rc.utility
    bundles = {}
    for total in u.totals:
        cfg = build_train_config(rc, total_agents=total, episodes=u.episodes)
        bundles[total] = train(cfg, demand)
    rows = utility_study(bundles, demand, u.fractions, u.alphas, u.eval_runs, rc.seed)
    out = rc.output_path() / "utility"
    h = rc.config_hash()
    write_rows(out / "utility.csv", rows, h)
    if not args.no_figures:
        from .plotting import utility_bars
        utility_bars(rows, out / "utility.png")
    for r in rows:
        print(f"N={r['total_agents']} fraction={r['fraction']:.2f}: served demand "
              f"{r['served_demand']:.2f} (delta {r['demand_delta']:+.2f} ± {r['demand_delta_se']:.2f})")
    return 0


# -- parser -------------------------------------------------------------------


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcmas", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="bin trip records into a demand model")
    ing.add_argument("trips")
    ing.add_argument("--out", required=True)
    ing.add_argument("--schema", choices=sorted(SCHEMAS), default="sample")
    ing.add_argument("--delimiter", default=",")
    ing.add_argument("--origin", nargs=2, type=float, default=GridSpec().origin_lonlat,
                     metavar=("LON", "LAT"))
    ing.add_argument("--rows", type=int, default=7)
    ing.add_argument("--cols", type=int, default=5)
    ing.add_argument("--cell-km", type=float, default=2.0)
    ing.add_argument("--bin-minutes", type=int, default=12)
    ing.add_argument("--horizon", type=int, default=21)
    ing.add_argument("--scale", type=float, default=1 / 60)
    ing.add_argument("--all-days", action="store_true", help="keep weekends")
    ing.add_argument("--all-times", action="store_true", help="skip the time-window filter")

    def common(sp, bundle=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path)")
        sp.add_argument("--output-dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--no-figures", action="store_true")
        sp.add_argument("--system", choices=SYSTEM_KINDS)
        if bundle:
            sp.add_argument("--bundle", help="checkpoint path (default: the train output)")

    tr = sub.add_parser("train", help="train a hypernetwork system or a baseline")
    common(tr, bundle=False)
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--resume", action="store_true")
    for name, helptext in (("eval-nashconv", "approximate NashConv per context and type"),
                           ("optimize", "grid search over compositions and penalties"),
                           ("ablate", "predicted vs previous-step mean actions")):
        common(sub.add_parser(name, help=helptext))
    common(sub.add_parser("segment-study", help="full-space vs per-segment training"), bundle=False)
    common(sub.add_parser("utility-study", help="value of controllable agents per population size"),
           bundle=False)
    return p


COMMANDS = {"train": cmd_train, "eval-nashconv": cmd_eval, "optimize": cmd_optimize,
            "ablate": cmd_ablate, "segment-study": cmd_segment, "utility-study": cmd_utility}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ingest":
        return cmd_ingest(args)
    try:
        overrides = _parse_set(args.set)
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        if args.workers:
            overrides["workers"] = args.workers
        rc = load_config(args.config, overrides)
        if args.system == "Random" and args.command in ("train", "segment-study", "utility-study"):
            raise UsageError(f"--system Random does not apply to {args.command}")
        return COMMANDS[args.command](args, rc)
    except (ValidationError, UsageError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
