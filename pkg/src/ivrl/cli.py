"""``ivrl`` command line: simulation, nuisance fitting, evaluation, learning and benchmarks.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checks
from .encoding import build_code
from .env import true_j
from .harness import (ALL_METHODS, FIGURE_METHODS, ConfigError, benchmark_cells, build_data, build_env, build_fmap,
                      env_k, figure_checks, initial_policy, load_config, method_setup, parse_config, policy_from_json,
                      policy_to_json, results_csv, run_cell, run_cells, run_dir, trace_csv, write_benchmark,
                      write_snapshot)
from .learner import noise_replicate_pessimism, pessimistic_j_dr, pessimistic_j_mis, pessimistic_j_vf, plain_value
from .nuisance import NuisanceConfig, nuisance_candidates

ESTIMATORS = ("plain", "noise-replicate", "vf", "mis", "dr", "true")


def _add_common(p: argparse.ArgumentParser, seeds: bool = False) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--out", help="run directory (default: $IVRL_OUTPUT_ROOT/<command>-<hash>)")
    p.add_argument("--env", choices=("kidney", "tabular"))
    p.add_argument("--n", type=int, help="trajectories")
    p.add_argument("--t", type=int, help="horizon")
    p.add_argument("--seed", type=int, help="data seed")
    if seeds:
        p.add_argument("--seeds", type=int, help="number of seeds")
        p.add_argument("--workers", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("simulate", help="write a logged dataset CSV"))
    _add_common(sub.add_parser("fit-nuisance", help="fit instrument and compliance models"))
    p = sub.add_parser("evaluate", help="estimate J for a stored policy")
    _add_common(p)
    p.add_argument("--policy", help="policy JSON (default: behaviour-cloned policy)")
    p.add_argument("--estimator", choices=ESTIMATORS, default="plain")
    p = sub.add_parser("learn", help="learn a policy with one method")
    _add_common(p)
    p.add_argument("--method", choices=ALL_METHODS, default="pess_IV")
    _add_common(sub.add_parser("benchmark", help="method sweep over seeds"), seeds=True)
    _add_common(sub.add_parser("reproduce-figure", help="the four-method figure protocol"), seeds=True)
    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--quick", action="store_true", help="skip the figure and determinism checks")
    p.add_argument("--out", help="keep the figure run in this directory")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else parse_config("")
    overrides = {}
    for flag, key in (("env", "env__name"), ("n", "data__n"), ("t", "data__t"), ("seed", "data__seed"),
                      ("seeds", "benchmark__seeds"), ("workers", "benchmark__workers")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    return cfg.replace(**overrides) if overrides else cfg


def _prepare(cfg):
    seed = cfg.get("data", "seed")
    env = build_env(cfg)
    data = build_data(cfg, env, seed)
    return seed, env, data, build_fmap(cfg, env, data)


def cmd_simulate(cfg, args) -> int:
    out = run_dir(cfg, "simulate", args.out)
    write_snapshot(out, cfg)
    _, _, data, _ = _prepare(cfg)
    data.to_csv(out / "data.csv")
    print(out / "data.csv")
    return 0


def cmd_fit_nuisance(cfg, args) -> int:
    out = run_dir(cfg, "fit-nuisance", args.out)
    write_snapshot(out, cfg)
    seed, env, data, fmap = _prepare(cfg)
    ncfg = NuisanceConfig(c_cfg=cfg.get("nuisance", "c_cfg"), delta=cfg.get("nuisance", "delta"),
                          n_cand=cfg.get("nuisance", "n_cand"))
    _, meta = nuisance_candidates(data, fmap, build_code(env_k(env)), ncfg, seed,
                                  calibrate=cfg.get("nuisance", "calibrate"))
    meta["fmap"] = fmap.to_dict()
    (out / "nuisance.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(out / "nuisance.json")
    return 0


def cmd_evaluate(cfg, args) -> int:
    out = run_dir(cfg, "evaluate", args.out)
    write_snapshot(out, cfg)
    seed, env, data, fmap = _prepare(cfg)
    init = initial_policy(cfg, env, data)
    policy = policy_from_json(Path(args.policy).read_text()) if args.policy else init
    if args.estimator == "true":
        value, se = true_j(env, policy, n_rollouts=cfg.get("evaluation", "n_rollouts"),
                           seed=cfg.get("evaluation", "eval_seed") + seed, rel_tail=cfg.get("evaluation", "rel_tail"))
    else:
        method = {"vf": "vf_dual", "mis": "mis_dual", "dr": "dr_dual"}.get(args.estimator, "no_pess_IV")
        pcfg, nuis = method_setup(cfg, method, env, data, fmap, seed, policy)
        nu = env.reference()
        se = float("nan")
        if args.estimator == "plain":
            value = plain_value(data, nu, policy, nuis[0], pcfg)
        elif args.estimator == "noise-replicate":
            value = noise_replicate_pessimism(data, nu, policy, nuis[0], pcfg)
        else:
            fn = {"vf": pessimistic_j_vf, "mis": pessimistic_j_mis, "dr": pessimistic_j_dr}[args.estimator]
            value = fn(data, nu, policy, nuis, pcfg)
    text = f"estimator,value,se\n{args.estimator},{value:.17g},{se:.17g}\n"
    (out / "evaluate.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_learn(cfg, args) -> int:
    out = run_dir(cfg, "learn", args.out)
    write_snapshot(out, cfg)
    seed = cfg.get("data", "seed")
    res = run_cell(cfg, args.method, seed)
    (out / "results.csv").write_text(results_csv([res], cfg.get("output", "record_runtime")))
    (out / "trace.csv").write_text(trace_csv(res.learn))
    (out / "policy.json").write_text(policy_to_json(res.learn.policy))
    (out / "run.json").write_text(json.dumps({"method": args.method, "seeds": res.learn.seeds,
                                              "mode": res.learn.mode,
                                              "pessimistic_j": res.learn.pessimistic_j}, indent=2) + "\n")
    print(f"{args.method} seed {seed}: J = {res.j_mean:.4f} (se {res.j_se:.4f}); run directory {out}")
    return 0


def _sweep(cfg, args, command: str) -> int:
    out = run_dir(cfg, command, args.out)
    results = run_cells(cfg, benchmark_cells(cfg), cfg.get("benchmark", "workers"))
    write_benchmark(out, cfg, results)
    for name, ok, detail in figure_checks(results):
        print(f"[{'ok' if ok else 'NO'}] {name}: {detail}")
    print(f"results written to {out}")
    return 0


def cmd_benchmark(cfg, args) -> int:
    return _sweep(cfg, args, "benchmark")


def cmd_reproduce_figure(cfg, args) -> int:
    return _sweep(cfg.replace(benchmark__methods=FIGURE_METHODS), args, "reproduce-figure")


def cmd_selftest(args) -> int:
    results = checks.run_all(full=not args.quick, workdir=args.out)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate, "fit-nuisance": cmd_fit_nuisance, "evaluate": cmd_evaluate, "learn": cmd_learn,
    "benchmark": cmd_benchmark, "reproduce-figure": cmd_reproduce_figure,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest(args)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"ivrl: config error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
