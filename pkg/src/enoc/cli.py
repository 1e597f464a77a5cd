"""Command-line front end: solve, verify, bench, query.

Exit codes: 0 success, 1 at least one verification check failed, 2 usage or
configuration error.  All randomness flows from the configured seed, and a
run manifest echoes the full resolved configuration so any artifact can be
reproduced bit-exactly with ``solve --from-manifest``.

A JSON config file (``--config``) overrides command-line flags; flags cover
the common keys, the config file covers everything.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import EnocError
from .measure import EnsembleState
from .problem import ProblemSpec
from .library import builtin, cost_lipschitz_bound, load_problem
from .ensemble import (ControlSignal, TimeGrid, integrate, random_signal,
                       trajectory_bound_suite)
from .value import (Axis, ValueGrid, ValueQuery, compute_value, dpp_residual,
                    unstack_state, value_dp, value_oracle)
from .verify import (epigraph_invariance, hjb_residual, oscillation_diagnostic,
                     terminal_limit)

_FMT = "%.17g"

_DEFAULTS = {
    "problem": "linear-ensemble",
    "params": {},
    "method": "all",
    "steps": 8,
    "s": 0.0,
    "phi": 0.25,
    "grid": None,
    "tol": None,
    "seed": 0,
    "workers": 1,
    "budget": 1_000_000,
    "verify": {},
    "bench": {},
}

_VERIFY_DEFAULTS = {
    "trials": 100,
    "bounds_steps": 200,
    "dpp_steps": 4,
    "dpp_phis": 10,
    "epi_steps": 4,
    "hjb_steps": 50,
    "hjb_counts": 41,
    "hjb_extent": 5.0,
    "kappa": 5.0,
    "gaps": [0.2, 0.1, 0.05, 0.025],
    "terminal_steps": 8,
    "osc_controls": 5,
    "osc_steps": 100,
    "radii": None,
}


def _parse_param(text):
    key, _, raw = text.partition("=")
    if not _:
        raise ValueError(f"--param needs key=value, got {text!r}")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def _parse_axis(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"--grid needs lo:hi:count, got {text!r}")
    return [float(parts[0]), float(parts[1]), int(parts[2])]


def resolve_config(args) -> dict:
    """defaults <- flags <- config file (the file wins, as documented)."""
    cfg = json.loads(json.dumps(_DEFAULTS))
    flag_map = {
        "problem": args.problem, "method": getattr(args, "method", None),
        "steps": args.steps, "s": args.s, "tol": getattr(args, "tol", None),
        "seed": args.seed, "workers": args.workers, "budget": args.budget,
    }
    for key, val in flag_map.items():
        if val is not None:
            cfg[key] = val
    if getattr(args, "param", None):
        for text in args.param:
            key, val = _parse_param(text)
            cfg["params"][key] = val
    if getattr(args, "phi", None) is not None:
        cfg["phi"] = [float(v) for v in args.phi.split(",")]
    if getattr(args, "grid", None):
        cfg["grid"] = [_parse_axis(g) for g in args.grid]
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        for key, val in file_cfg.items():
            if key == "params":
                cfg["params"].update(val)
            elif key in ("verify", "bench"):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def _build_problem(cfg) -> ProblemSpec:
    ref = cfg["problem"]
    if isinstance(ref, str) and (os.path.sep in ref or ref.endswith(".json")):
        return load_problem(ref)
    return builtin(ref, **cfg["params"])


def _initial_state(cfg, p: ProblemSpec) -> EnsembleState:
    phi = cfg["phi"]
    d = p.stacked_dim
    if np.isscalar(phi):
        vec = np.full(d, float(phi))
    else:
        vec = np.asarray(phi, dtype=float)
        if vec.size == 1:
            vec = np.full(d, vec[0])
        elif vec.size != d:
            raise ValueError(f"phi needs {d} entries (atoms x state dim), got {vec.size}")
    return unstack_state(vec, p.space, p.n)


def _out_dir(args):
    out = args.out or os.environ.get("ENOC_OUT") or "enoc-out"
    os.makedirs(out, exist_ok=True)
    return out


def _write_control_csv(path, sig: ControlSignal):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["interval", "t_start", "t_end"]
                    + [f"u{k}" for k in range(sig.m)])
        for j in range(sig.grid.steps):
            wr.writerow([j, _FMT % sig.grid.nodes[j], _FMT % sig.grid.nodes[j + 1]]
                        + [_FMT % v for v in sig.values[j]])


def _dp_axes(cfg, p: ProblemSpec):
    if cfg["grid"] is None:
        raise ValueError("the dp method needs --grid lo:hi:count per stacked axis")
    axes = [Axis(*trip) for trip in cfg["grid"]]
    if len(axes) == 1 and p.stacked_dim > 1:
        axes = axes * p.stacked_dim
    return axes


def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            cfg = json.load(fh)["config"]
    out = _out_dir(args)
    p = _build_problem(cfg)
    phi = _initial_state(cfg, p)
    s = float(cfg["s"])
    methods = [cfg["method"]] if cfg["method"] != "all" else ["oracle", "dp", "adjoint"]

    values = {}
    timings = {}
    artifacts = []
    for method in methods:
        t0 = time.perf_counter()
        query = ValueQuery(s=s, phi=phi, method=method, steps=int(cfg["steps"]),
                           axes=_dp_axes(cfg, p) if method == "dp" else None,
                           budget=int(cfg["budget"]), workers=int(cfg["workers"]))
        res = compute_value(p, query)
        values[method] = res.value
        sig = res.control
        if res.grid is not None:
            res.grid.save(os.path.join(out, "value_grid.bin"))
            artifacts.append("value_grid.bin")
        timings[method] = time.perf_counter() - t0
        cname = f"control_{method}.csv"
        _write_control_csv(os.path.join(out, cname), sig)
        artifacts.append(cname)
        tname = f"trajectory_{method}.csv"
        integrate(p, s, phi, sig).to_csv(os.path.join(out, tname))
        artifacts.append(tname)

    with open(os.path.join(out, "value.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["method", "value"])
        for method in methods:
            wr.writerow([method, _FMT % values[method]])
    artifacts.append("value.csv")

    manifest = {
        "config": cfg,
        "versions": {"enoc": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "timings": timings,
        "values": {k: float(v) for k, v in values.items()},
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for method in methods:
        print(f"{method}: value={values[method]:.12g} ({timings[method]:.3f}s)")
    return 0


def _default_radii(p: ProblemSpec):
    """Radii between the distinct pairwise distances (never exactly on one)."""
    dists = np.unique(p.space.metric[p.space.metric > 0])
    if dists.size == 0:
        return [1.0]
    pts = np.concatenate([[dists[0] / 2], (dists[:-1] + dists[1:]) / 2.0,
                          [dists[-1] * 1.5]])
    return [float(r) for r in pts]


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    vcfg = dict(_VERIFY_DEFAULTS)
    vcfg.update(cfg["verify"])
    out = _out_dir(args)
    p = _build_problem(cfg)
    phi = _initial_state(cfg, p)
    s = float(cfg["s"])
    seed = int(cfg["seed"])
    budget = int(cfg["budget"])
    tol = cfg["tol"]
    rows = []

    suite = trajectory_bound_suite(
        p, trials=int(vcfg["trials"]), steps=int(vcfg["bounds_steps"]),
        seed=seed, slack=(1.0 + tol) if tol is not None else 1.05)
    worst_ratio = max(suite.max_ratio.values())
    rows.append(("trajectory_bounds", suite.slack, worst_ratio, suite.passed))
    print(suite)

    rng = np.random.default_rng(seed)
    grid = TimeGrid(s, p.horizon, int(vcfg["dpp_steps"]))
    dpp_tol = tol if tol is not None else 1e-10
    worst_dpp = 0.0
    dpp_pass = True
    for _ in range(int(vcfg["dpp_phis"])):
        phi_r = EnsembleState(rng.uniform(-0.5, 0.5, (p.space.size, p.n)), p.space)
        for j in range(1, grid.steps):
            res = dpp_residual(p, s, grid.nodes[j], phi_r, grid, budget=budget)
            worst_dpp = max(worst_dpp, abs(res.residual), res.one_sided_max)
    dpp_pass = worst_dpp <= dpp_tol
    rows.append(("dpp_residual", dpp_tol, worst_dpp, dpp_pass))
    print(f"[{'pass' if dpp_pass else 'FAIL'}] dpp_residual: worst={worst_dpp:.3g}")

    epi = epigraph_invariance(
        p, s, phi, TimeGrid(s, p.horizon, int(vcfg["epi_steps"])), budget=budget,
        drift_tol=tol if tol is not None else 1e-8,
        mono_tol=tol if tol is not None else 1e-10)
    rows.append(("epigraph_invariance", epi.tolerance, epi.worst, epi.passed))
    print(epi)

    axes = (
        [Axis(*trip) for trip in cfg["grid"]] if cfg["grid"] is not None
        else [Axis(-vcfg["hjb_extent"], vcfg["hjb_extent"], int(vcfg["hjb_counts"]))]
        * p.stacked_dim
    )
    vg = value_dp(p, axes, TimeGrid(s, p.horizon, int(vcfg["hjb_steps"])),
                  workers=int(cfg["workers"]))
    hjb = hjb_residual(vg, p, kappa=float(vcfg["kappa"]))
    if tol is not None:
        hjb.tolerance = tol
        hjb.passed = hjb.worst <= tol
    rows.append(("hjb_residual", hjb.tolerance, hjb.worst, hjb.passed))
    print(hjb)

    lim = terminal_limit(
        p, phi, vcfg["gaps"], steps=int(vcfg["terminal_steps"]), budget=budget,
        cost_lipschitz=cost_lipschitz_bound(p, radius=vcfg["hjb_extent"]))
    if tol is not None:
        lim.tolerance = tol
        lim.passed = lim.worst <= tol
    rows.append(("terminal_limit", lim.tolerance, lim.worst, lim.passed))
    print(lim)

    radii = vcfg["radii"] or _default_radii(p)
    osc = oscillation_diagnostic(p, s, phi, int(vcfg["osc_controls"]), radii,
                                 steps=int(vcfg["osc_steps"]), seed=seed)
    if tol is not None:
        osc.tolerance = tol
        osc.passed = osc.worst <= tol
    rows.append(("oscillation", osc.tolerance, osc.worst, osc.passed))
    print(osc)

    with open(os.path.join(out, "checks.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "tolerance", "worst", "passed"])
        for name, tolerance, worst, passed in rows:
            wr.writerow([name, tolerance, _FMT % worst, passed])
    n_fail = sum(1 for row in rows if not row[3])
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        for name, tolerance, worst, passed in rows:
            fh.write(f"{'pass' if passed else 'FAIL'} {name} worst={worst:.6g}\n")
        fh.write(f"{len(rows) - n_fail}/{len(rows)} checks passed\n")
    print(f"{len(rows) - n_fail}/{len(rows)} checks passed")
    return 1 if n_fail else 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    bcfg = {"integrate_steps": [100, 200, 400], "dp_counts": [11, 21, 41],
            "oracle_steps": [4, 6, 8]}
    bcfg.update(cfg["bench"])
    out = _out_dir(args)
    p = _build_problem(cfg)
    phi = _initial_state(cfg, p)
    s = float(cfg["s"])
    rng = np.random.default_rng(int(cfg["seed"]))
    rows = []
    for steps in bcfg["integrate_steps"]:
        grid = TimeGrid(s, p.horizon, int(steps))
        sig = random_signal(p, grid, rng)
        t0 = time.perf_counter()
        integrate(p, s, phi, sig)
        rows.append(("integrate", int(steps), time.perf_counter() - t0))
    for count in bcfg["dp_counts"]:
        axes = [Axis(-5.0, 5.0, int(count))] * p.stacked_dim
        grid = TimeGrid(s, p.horizon, 20)
        t0 = time.perf_counter()
        value_dp(p, axes, grid, workers=int(cfg["workers"]))
        rows.append(("value_dp", int(count), time.perf_counter() - t0))
    for steps in bcfg["oracle_steps"]:
        grid = TimeGrid(s, p.horizon, int(steps))
        t0 = time.perf_counter()
        value_oracle(p, s, phi, grid, budget=int(cfg["budget"]))
        rows.append(("value_oracle", int(steps), time.perf_counter() - t0))
    path = os.path.join(out, "bench.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["operation", "size", "seconds"])
        for op, size, sec in rows:
            wr.writerow([op, size, "%.6f" % sec])
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_query(args) -> int:
    vg = ValueGrid.load(args.grid_file)
    z = np.array([float(v) for v in args.state.split(",")])
    val = vg.value_at(float(args.time), z)
    print(_FMT % val)
    return 0


def _add_common(sub):
    sub.add_argument("--problem", help="builtin name or problem file path")
    sub.add_argument("--param", action="append",
                     help="builtin parameter key=value (JSON values)")
    sub.add_argument("--steps", type=int, help="time grid intervals")
    sub.add_argument("--s", type=float, help="initial time")
    sub.add_argument("--phi", help="initial stacked state, comma separated")
    sub.add_argument("--grid", action="append",
                     help="state axis lo:hi:count, repeat per axis "
                          "(write --grid=-5:5:81 for negative bounds)")
    sub.add_argument("--tol", type=float, help="override check tolerances")
    sub.add_argument("--seed", type=int, help="random seed")
    sub.add_argument("--out", help="output directory (or $ENOC_OUT)")
    sub.add_argument("--workers", type=int, help="worker threads")
    sub.add_argument("--budget", type=int, help="enumeration budget")
    sub.add_argument("--config", help="JSON config file; overrides flags")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="enoc",
        description="Ensemble optimal control: solve, certify, benchmark.")
    sp = ap.add_subparsers(dest="command", required=True)
    so = sp.add_parser("solve", help="compute the value by the selected methods")
    _add_common(so)
    so.add_argument("--method", choices=["oracle", "dp", "adjoint", "all"])
    so.add_argument("--from-manifest", help="re-run the configuration of a manifest")
    so.set_defaults(fn=cmd_solve)
    sv = sp.add_parser("verify", help="run the certification battery")
    _add_common(sv)
    sv.set_defaults(fn=cmd_verify)
    sb = sp.add_parser("bench", help="time the core operations")
    _add_common(sb)
    sb.set_defaults(fn=cmd_bench)
    sq = sp.add_parser("query", help="query a stored value grid")
    sq.add_argument("--grid-file", required=True)
    sq.add_argument("--time", required=True)
    sq.add_argument("--state", required=True)
    sq.set_defaults(fn=cmd_query)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (EnocError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
