"""Command-line interface.

Subcommands: simulate (bypass run), identify (fit a model from a trace),
govern (supervised run), moas-export (2-D admissible-set slice), and
compare (fan out the standard run set).  Exit codes: 0 success, 1
configuration error, 2 runtime/model error, 3 empty slice.
"""

import argparse
import concurrent.futures
import json
import os
import sys

import numpy as np

from saltgov import dmdc, moas, runio, scenario
from saltgov import plant as plant_mod
from saltgov.moas import EmptySliceError
from saltgov.scenario import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_EMPTY_SLICE = 3


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}")
    if isinstance(cfg, dict) and cfg.get("kind") == "saltgov-run":
        return cfg["config"]  # manifests embed the resolved configuration
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    return cfg


def _apply_flag_overrides(cfg, args):
    gov = dict(cfg.get("governor") or {})
    if getattr(args, "mode", None):
        gov["mode"] = args.mode
    if getattr(args, "horizon", None) is not None:
        gov["horizon"] = args.horizon
    if getattr(args, "epsilon", None) is not None:
        gov["epsilon"] = args.epsilon
    cfg["governor"] = gov
    if getattr(args, "constraints", None):
        cons = dict(cfg.get("constraints") or {})
        cons["schedule"] = args.constraints
        cfg["constraints"] = cons
    if getattr(args, "rank", None) is not None:
        model = cfg.get("model")
        if isinstance(model, dict) and "identify" in model:
            ident = dict(model["identify"])
            ident["rank"] = args.rank
            cfg["model"] = {"identify": ident}
    return cfg


def _print_summary(result):
    print(f"run complete: {len(result.trace['t'])} trace rows, "
          f"mode={result.config['governor']['mode']}")
    for label, entry in result.violations.items():
        status = "VIOLATED" if entry["max"] > 0.0 else "ok"
        print(f"  {label}: max excess {entry['max']:+.4f} degC over "
              f"{entry['count']} instants [{status}]")
    mode = result.config["governor"]["mode"]
    glog = result.governor_log
    if mode == "srg":
        kap = glog["kappa"]
        print(f"  kappa: min {np.nanmin(kap):.4f}  mean {np.nanmean(kap):.4f}  "
              f"steps with kappa<1: {int(np.sum(kap < 1.0 - 1e-12))}")
    elif mode == "cg":
        act = glog["n_active"]
        binding = int(np.sum(act > 0))
        print(f"  qp: {binding} steps with active constraints "
              f"({100.0 * binding / max(len(act), 1):.1f}%), "
              f"max active set {int(act.max(initial=0))}, "
              f"max kkt residual {np.nanmax(glog['kkt']):.2e}")
    if result.fallback_steps:
        print(f"  WARNING: fallback engaged on {result.fallback_steps} steps")


def cmd_simulate(args):
    cfg = _load_config(args.config)
    cfg = _apply_flag_overrides(cfg, args)
    cfg.setdefault("governor", {})
    cfg["governor"] = {**cfg["governor"], "mode": "bypass"}
    cfg["model"] = None
    result = scenario.run_experiment(cfg, out_dir=args.out)
    _print_summary(result)
    return EXIT_OK


def cmd_identify(args):
    columns = runio.read_columns_csv(args.trace)
    runio.require_columns(columns, runio.TRACE_COLUMNS, path=args.trace)
    n_rows = len(columns["t"])
    states = "auto" if args.states == "auto" else tuple(args.states.split(","))
    min_rows = (len(scenario.DEFAULT_STATE_CANDIDATES) if states == "auto"
                else len(states)) + len(scenario.MV_NAMES) + 1
    if n_rows < min_rows:
        raise ConfigError("trace", f"need at least {min_rows} rows, got {n_rows}")
    model, selection = scenario.identify_from_trace(
        columns, states=states, rank=args.rank)
    dmdc.save_model(model, args.out)
    print(f"model written to {args.out}")
    print(f"states: {', '.join(model.state_names)}")
    if selection is not None:
        compact = [ev for ev in selection.evaluations
                   if set(ev[0]) == set(dmdc.COMPACT_STATE_SET)]
        if compact:
            print(f"compact set {dmdc.COMPACT_STATE_SET}: "
                  f"validation mse {compact[-1][1]:.3e}")
    log = scenario.snapshot_log_from_trace(columns, model.state_names)
    scores = dmdc.normalized_output_mse(model, log)
    print("replay normalized MSE per output:")
    for name, score in scores.items():
        print(f"  {name:10s} {score:.3e}")
    return EXIT_OK


def cmd_govern(args):
    cfg = _load_config(args.config)
    cfg = _apply_flag_overrides(cfg, args)
    mode = cfg.get("governor", {}).get("mode", "cg")
    if mode == "bypass":
        return cmd_simulate(args)
    if cfg.get("model") is None:
        if args.identify_first:
            cfg["model"] = {"identify": {"states": "auto", "rank": args.rank}}
        else:
            raise ConfigError("model", "governed run needs a model "
                                        "(or pass --identify-first)")
    result = scenario.run_experiment(cfg, out_dir=args.out)
    _print_summary(result)
    return EXIT_OK


def cmd_moas_export(args):
    model = dmdc.load_model(args.model)
    cset = moas.output_limits(args.t_p_out_max, args.t_s_out_min)
    schedule = scenario.make_bound_schedule(args.constraints,
                                            base=args.t_s_out_min)
    bounds = np.array([args.t_p_out_max,
                       -scenario.bound_at(schedule, args.t)])
    aset = moas.build_moas(model, cset.with_bounds(bounds),
                           horizon=args.horizon, epsilon=args.epsilon,
                           check_determinedness=False,
                           time_index=int(round(args.t / model.dt)))
    columns = runio.read_columns_csv(args.trace)
    runio.require_columns(columns, ("t",) + model.state_names, path=args.trace)
    idx = int(np.argmin(np.abs(columns["t"] - args.t)))
    x_dev = np.array([columns[name][idx] for name in model.state_names]) \
        - model.ref_states
    verts = moas.export_slice(aset, x_dev)
    runio.write_columns_csv(args.out, runio.SLICE_COLUMNS, {
        "dm_dot_s_ref": verts[:, 0], "dT_p_in_ref": verts[:, 1],
    })
    print(f"{len(verts)} vertices written to {args.out} "
          f"(t={args.t} s, schedule={args.constraints})")
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args.config)
    variants = [
        ("bypass", {"governor": {"mode": "bypass"}, "model": None}),
        ("cg-constant", {"governor": {"mode": "cg"}, "schedule": "constant"}),
        ("cg-increasing", {"governor": {"mode": "cg"}, "schedule": "eq7-increasing"}),
        ("cg-decreasing", {"governor": {"mode": "cg"}, "schedule": "eq7-decreasing"}),
    ]

    def build(name, spec):
        sub = json.loads(json.dumps(cfg))  # deep copy
        gov = dict(sub.get("governor") or {})
        gov.update(spec.get("governor", {}))
        sub["governor"] = gov
        if "schedule" in spec:
            cons = dict(sub.get("constraints") or {})
            cons["schedule"] = spec["schedule"]
            sub["constraints"] = cons
        if "model" in spec:
            sub["model"] = spec["model"]
        elif gov["mode"] != "bypass" and sub.get("model") is None:
            sub["model"] = {"identify": {"states": "auto", "rank": None}}
        return sub

    max_workers = int(os.environ.get("SALTGOV_THREADS", "0") or 0)
    if max_workers <= 0:
        max_workers = min(4, os.cpu_count() or 1)
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {
            name: pool.submit(scenario.run_experiment, build(name, spec),
                              os.path.join(args.out, name))
            for name, spec in variants
        }
        for name, fut in futures.items():
            results[name] = fut.result()

    summary = {}
    for name, _ in variants:
        res = results[name]
        summary[name] = {
            "violations": {
                label: {"max": float(v["max"]), "count": int(v["count"])}
                for label, v in res.violations.items()
            },
            "fallback_steps": int(res.fallback_steps),
        }
        print(f"[{name}]")
        _print_summary(res)
    runio.write_json(os.path.join(args.out, "comparison.json"), summary)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="saltgov",
        description="Molten-salt loop setpoint supervision toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p, with_mode=True):
        p.add_argument("--config", "-c", required=True, help="run config JSON (or a manifest)")
        p.add_argument("--out", "-o", required=True, help="output directory")
        if with_mode:
            p.add_argument("--mode", choices=["bypass", "srg", "cg"])
        p.add_argument("--constraints",
                       choices=["constant", "eq7-increasing", "eq7-decreasing"])
        p.add_argument("--horizon", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--rank", type=int)

    p_sim = sub.add_parser("simulate", help="unsupervised (bypass) run")
    add_run_flags(p_sim, with_mode=False)
    p_sim.set_defaults(func=cmd_simulate)

    p_id = sub.add_parser("identify", help="fit a state-space model from a trace")
    p_id.add_argument("--trace", required=True, help="trace CSV from a run")
    p_id.add_argument("--out", "-o", required=True, help="model JSON path")
    p_id.add_argument("--rank", type=int, default=None)
    p_id.add_argument("--states", default="auto",
                      help="'auto' or comma-separated state labels")
    p_id.set_defaults(func=cmd_identify)

    p_gov = sub.add_parser("govern", help="supervised run (srg or cg)")
    add_run_flags(p_gov)
    p_gov.add_argument("--identify-first", action="store_true",
                       help="fit the model from a bypass run of the same trajectory")
    p_gov.set_defaults(func=cmd_govern)

    p_moas = sub.add_parser("moas-export", help="export a 2-D admissible-set slice")
    p_moas.add_argument("--model", required=True, help="model JSON")
    p_moas.add_argument("--trace", required=True,
                        help="trace CSV supplying the state at time t")
    p_moas.add_argument("--t", type=float, required=True, help="slice instant, s")
    p_moas.add_argument("--out", "-o", required=True, help="vertex CSV path")
    p_moas.add_argument("--constraints", default="constant",
                        choices=["constant", "eq7-increasing", "eq7-decreasing"])
    p_moas.add_argument("--t-p-out-max", type=float,
                        default=scenario.T_P_OUT_MAX_DEFAULT)
    p_moas.add_argument("--t-s-out-min", type=float,
                        default=scenario.T_S_OUT_MIN_DEFAULT)
    p_moas.add_argument("--horizon", type=int, default=1500)
    p_moas.add_argument("--epsilon", type=float, default=0.02)
    p_moas.set_defaults(func=cmd_moas_export)

    p_cmp = sub.add_parser("compare", help="bypass vs governed run set")
    p_cmp.add_argument("--config", "-c", required=True)
    p_cmp.add_argument("--out", "-o", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptySliceError as exc:
        print(f"empty slice: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SLICE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
