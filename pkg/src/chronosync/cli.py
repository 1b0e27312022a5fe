"""Command line front end.

Subcommands: ``design``, ``simulate``, ``avar``, ``compare`` and
``montecarlo``.  Exit status is 0 on success, 1 on I/O errors and 2 on
domain or validation errors.
"""

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import avar as av
from .config import load_config, optimizer_from_config, schema, scenario_from_config
from .errors import ChronoError, ConfigError, NonIntegerWindow
from .gains import GainSet, build_filters, design_gains
from .numerics import spectral_radius
from .sim import MODES, monte_carlo, read_trace_rows, run_simulation, write_trace_csv

COMPARE_MODES = ("sync", "sync_track", "sync_track_alt")


class UsageError(ChronoError):
    pass


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _write_text(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(text)


def _load_gains(path) -> GainSet:
    text = Path(path).read_text()
    try:
        return GainSet.from_json(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _out_path(explicit, cfg, key, default):
    return explicit or cfg.get("outputs", {}).get(key, default)


# -- design ------------------------------------------------------------------

def cmd_design(args) -> int:
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg)
    gains = design_gains(scenario, optimizer_from_config(cfg), tracking=scenario.topology.g > 0)
    out = _out_path(args.out, cfg, "gains", "gains.json")
    _write_text(out, gains.to_json())

    edges, sup, gnss = build_filters(scenario, gains)
    print(f"F = [{gains.F[0]:.10g}, {gains.F[1]:.10g}]  sync radius {gains.sync_radius:.10g}")
    for f in edges:
        print(f"edge filter {f.node + 1}: error radius {spectral_radius(f.error_matrix):.10g}")
    if sup is not None:
        print(f"supervisor filter: error radius {spectral_radius(sup.error_matrix):.10g}")
    if gnss is not None:
        print(f"GNSS-edge filter: error radius {spectral_radius(gnss.error_matrix):.10g}")
    if gains.F_B is not None:
        print(f"F_B = [{gains.F_B[0]:.10g}, {gains.F_B[1]:.10g}]  margin {gains.margin:.10g}  "
              f"ab radius {gains.ab_radius:.10g}  objective {gains.objective:.10g}")
    print(f"wrote {out}")
    return 0


# -- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg, mode=args.mode, seed=args.seed, horizon=args.horizon,
                                    perfect_tracking=args.perfect_tracking or None)
    gains = _load_gains(args.gains) if args.gains else None
    trace = run_simulation(scenario, gains)
    out = _out_path(args.out, cfg, "trace", "trace.csv")
    write_trace_csv(trace, out)
    print(f"mode {scenario.mode}, seed {scenario.seed}, {scenario.horizon} steps -> {out}")
    return 0


# -- avar --------------------------------------------------------------------

def _phase_by_entity(rows):
    """Per-entity phase arrays ordered by step."""
    out = {}
    for ent, (k, x1, _, _) in rows.items():
        order = np.argsort(k, kind="stable")
        if not np.array_equal(k[order], np.arange(len(k))):
            raise ConfigError(f"entity {ent} has missing or repeated steps")
        out[ent] = x1[order]
    return out


def cmd_avar(args) -> int:
    phases = _phase_by_entity(read_trace_rows(args.trace))
    macs = sorted((e for e in phases if e.startswith("mac")), key=lambda e: int(e[3:]))
    gacs = sorted((e for e in phases if e.startswith("gac")), key=lambda e: int(e[3:]))
    entities = args.entities.split(",") if args.entities else macs
    unknown = [e for e in entities if e not in phases]
    if unknown:
        raise UsageError(f"unknown entity {', '.join(unknown)}; trace has {', '.join(sorted(phases))}")
    ref = 0.0
    if args.reference == "gac_mean":
        if not gacs:
            raise UsageError("reference gac_mean needs GAC rows in the trace")
        ref = np.mean([phases[g] for g in gacs], axis=0)
    curves = [av.avar_curve(phases[e] - ref, args.taus, tau_sample=args.tau_sample, entity=e)
              for e in entities]
    out = args.out or "avar.csv"
    _write_text(out, av.curves_to_csv(curves))
    print(f"{len(curves)} curve(s), {len(args.taus)} tau value(s) -> {out}")
    return 0


# -- monte carlo -------------------------------------------------------------

def cmd_montecarlo(args) -> int:
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg, mode=args.mode, horizon=args.horizon)
    gains = _load_gains(args.gains) if args.gains else None
    mc = monte_carlo(scenario, gains, args.reps, base_seed=args.base_seed, keep_phases=False)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("k", "mean_x1", "mean_x2", "var_x1", "var_x2"))
    f = av.fmt17
    for k in range(mc.z_tilde_mean.shape[0]):
        m, v = mc.z_tilde_mean[k], mc.z_tilde_var[k]
        w.writerow((k, f(m[0]), f(m[1]), f(v[0]), f(v[1])))
    out = _out_path(args.out, cfg, "montecarlo", "montecarlo.csv")
    _write_text(out, buf.getvalue())
    print(f"{mc.reps} replications from seed {mc.base_seed}, mode {scenario.mode} -> {out}")
    return 0


# -- compare -----------------------------------------------------------------

def compare(cfg, gains, *, reps, taus, reference="truth", base_seed=0, config_name=""):
    """Multi-seed AVAR comparison of the three controlled modes.

    Returns ``(report, curves, deviation_rows)``.
    """
    base = scenario_from_config(cfg)
    top = base.topology
    tau = base.tau
    taus = sorted(float(t) for t in taus)
    windows = [av.window_for(t, tau) for t in taus]
    final = slice(int(0.8 * base.horizon), base.horizon + 1)
    stride = max(1, base.horizon // 10000)

    modes, curves, deviation = {}, [], []
    for mode in COMPARE_MODES:
        mc = monte_carlo(base.with_(mode=mode), gains, reps, base_seed=base_seed)
        gac_mean = mc.gac_phase @ top.q_G
        rel = mc.mac_phase - gac_mean[..., np.newaxis]
        ph = rel if reference == "gac_mean" else mc.mac_phase
        per_mac = {}
        for i in range(top.n):
            vals = [float(np.mean(av.avar_statistical(ph[:, :, i], tau, w))) for w in windows]
            per_mac[f"mac{i + 1}"] = vals
            curves.append(av.AvarCurve(f"{mode}/mac{i + 1}", "statistical", list(zip(taus, vals))))
        modes[mode] = {
            "mean_avar": [float(np.mean([per_mac[m][t] for m in per_mac])) for t in range(len(taus))],
            "per_mac": per_mac,
            "rms_gac_deviation": float(np.sqrt(np.mean(rel[:, final] ** 2))),
        }
        for k in range(0, base.horizon + 1, stride):
            for i in range(top.n):
                deviation.append((k, mode, f"mac{i + 1}", rel[0, k, i]))

    analytical = {}
    for i, c in enumerate(base.clocks):
        curves.append(av.avar_curve(c, taus, entity=f"mac{i + 1}"))
        analytical[f"mac{i + 1}"] = [float(v) for v in curves[-1].values]
    curves.append(av.avar_curve(list(base.clocks), taus, q=top.q, entity="ensemble_mean"))
    analytical["ensemble_mean"] = [float(v) for v in curves[-1].values]
    for j, p in enumerate(base.gnss):
        curves.append(av.avar_curve(p.params, taus, entity=f"gac{j + 1}"))
        analytical[f"gac{j + 1}"] = [float(v) for v in curves[-1].values]

    last = {m: modes[m]["mean_avar"][-1] for m in COMPARE_MODES}
    all_zero = all(v == 0.0 for m in modes.values() for vals in m["per_mac"].values() for v in vals)
    le_sync = last["sync_track"] <= last["sync"]
    le_alt = last["sync_track"] <= last["sync_track_alt"]
    status = "degenerate" if all_zero else ("expected" if le_sync and le_alt else "unexpected")
    report = {
        "config": config_name,
        "reps": int(reps),
        "base_seed": int(base_seed),
        "reference": reference,
        "taus": taus,
        "gains": {"F": [float(v) for v in gains.F], "F_B": [float(v) for v in gains.F_B],
                  "margin": float(gains.margin)},
        "modes": modes,
        "analytical": analytical,
        "verdict": {
            "tau": taus[-1],
            "ordering": sorted(COMPARE_MODES, key=lambda m: (last[m], m)),
            "sync_track_le_sync": bool(le_sync),
            "sync_track_le_alt": bool(le_alt),
            "status": status,
        },
        "files": {},
    }
    return report, curves, deviation


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    gains = _load_gains(args.gains)
    if gains.F_B is None:
        raise UsageError("compare needs a gain set with a tracking gain")
    opts = cfg.get("compare", {})
    reps = args.reps or opts.get("reps", 50)
    taus = args.taus or opts.get("taus", [1.0, 10.0, 100.0])
    reference = args.reference or opts.get("reference", "truth")
    base_seed = args.base_seed if args.base_seed is not None else opts.get("base_seed", 0)
    out_dir = Path(_out_path(args.out_dir, cfg, "compare_dir", "compare_out"))

    report, curves, deviation = compare(cfg, gains, reps=reps, taus=taus, reference=reference,
                                        base_seed=base_seed, config_name=str(args.config))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "avar_curves.csv", av.curves_to_csv(curves))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("k", "mode", "entity", "phase_vs_gac_mean_s"))
    for k, mode, ent, v in deviation:
        w.writerow((k, mode, ent, av.fmt17(v)))
    _write_text(out_dir / "phase_deviation.csv", buf.getvalue())
    report["files"] = {"avar_curves": "avar_curves.csv", "phase_deviation": "phase_deviation.csv"}
    jsonschema.validate(report, schema("report.schema.json"))
    _write_text(out_dir / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    v = report["verdict"]
    print(f"verdict at tau={v['tau']:g}: {v['status']} (ordering {' < '.join(v['ordering'])})")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chronosync", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="synthesise all gains for a scenario")
    d.add_argument("config")
    d.add_argument("--out", help="gain set JSON (default: outputs.gains or gains.json)")
    d.set_defaults(func=cmd_design)

    s = sub.add_parser("simulate", help="run one replication and write a trace CSV")
    s.add_argument("config")
    s.add_argument("--gains", help="gain set JSON (not needed for mode free)")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--perfect-tracking", action="store_true",
                   help="feed the true tracking error to the broadcast control")
    s.add_argument("--out", help="trace CSV; a .gz suffix compresses")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("avar", help="statistical AVAR of entities in a trace")
    a.add_argument("trace")
    a.add_argument("--entities", help="comma-separated, e.g. mac1,mac2 (default: all MACs)")
    a.add_argument("--taus", type=_float_list, required=True, help="comma-separated averaging times (s)")
    a.add_argument("--reference", choices=("truth", "gac_mean"), default="truth")
    a.add_argument("--tau-sample", type=float, default=1.0, help="trace sampling interval (s)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_avar)

    c = sub.add_parser("compare", help="multi-seed AVAR comparison of sync, sync_track, sync_track_alt")
    c.add_argument("config")
    c.add_argument("--gains", required=True)
    c.add_argument("--reps", type=int)
    c.add_argument("--taus", type=_float_list)
    c.add_argument("--reference", choices=("truth", "gac_mean"))
    c.add_argument("--base-seed", type=int)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("montecarlo", help="per-step mean and variance of the tracking error")
    m.add_argument("config")
    m.add_argument("--gains")
    m.add_argument("--reps", type=int, default=50)
    m.add_argument("--mode", choices=MODES)
    m.add_argument("--horizon", type=int)
    m.add_argument("--base-seed", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ChronoError, NonIntegerWindow, jsonschema.ValidationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
