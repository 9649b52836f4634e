"""Run configuration, experiment cells, and run-directory artifacts.

A run is fully described by an INI-style config (``[section]`` plus
``key = value``).  Randomness flows from one root seed per benchmark seed:

* data:          ``generate(..., seed)`` (block generators ``[seed, block]``)
* reward noise:  ``[seed, 0x5EED, j]`` for replicate ``j``
* zeroth order:  ``[seed, 0x2E0]``
* nuisance sets: ``seed`` for the candidate sampler
* evaluation:    ``[eval_seed + seed, block]`` for the Monte-Carlo rollouts
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .encoding import build_code
from .env import Dataset, KidneyEnv, TabularConfoundedMDP, generate, make_tabular, true_j
from .estimators import NaivePropensity
from .funcspace import FeatureMap, SoftmaxPolicy
from .learner import (DualConfig, LearnResult, PessimismConfig, ZerothOrderConfig, behavior_cloning_init,
                      calibrate_alphas, learn)
from .nuisance import NuisanceConfig, fit_propensity, nuisance_candidates, oracle_nuisance, oracle_propensity

OUTPUT_ROOT_VAR = "IVRL_OUTPUT_ROOT"
FIGURE_METHODS = ("pess_IV", "no_pess_IV", "pess_no_IV", "no_pess_no_IV")
# method -> (pessimism mode, uses the instrument)
FIGURE_SPEC = {
    "pess_IV": ("noise-replicate", True),
    "no_pess_IV": ("none", True),
    "pess_no_IV": ("noise-replicate", False),
    "no_pess_no_IV": ("none", False),
}
ALL_METHODS = FIGURE_METHODS + ("vf_dual", "mis_dual", "dr_dual")
RESULT_HEADER = ("method", "seed", "j_mean", "j_se", "runtime_s")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


# --------------------------------------------------------------------------- configuration


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _str_list(text: str) -> tuple:
    return tuple(x.strip() for x in text.replace("\n", ",").split(",") if x.strip())


SCHEMA = {
    "env": {
        "name": (str, "kidney"), "path": (str, ""), "gamma": (float, 0.9),
        "n_s": (int, 5), "n_u": (int, 2), "k": (int, 3), "seed": (int, 0), "compliance": (float, 0.6),
    },
    "data": {"n": (int, 200), "t": (int, 100), "seed": (int, 0)},
    "features": {"degree": (int, 4), "standardize": (_bool, True), "policy_scale": (str, "range")},
    "nuisance": {
        "source": (str, "oracle"), "c_cfg": (float, 1.0), "n_cand": (int, 20), "delta": (float, 0.05),
        "calibrate": (_bool, False),
    },
    "learner": {
        "alpha_vf": (_opt_float, None), "alpha_mis": (_opt_float, None), "alpha_c": (float, 1.0),
        "n_noise": (int, 10), "noise_sd": (float, 0.1), "g_box": (float, 1.0), "w_box": (float, 10.0),
        "n_iter": (int, 200), "n_dirs": (int, 8), "sigma": (float, 0.1), "eta0": (float, 0.1),
        "normalize": (_bool, True), "random_search": (_bool, False), "init": (str, "behavior-cloning"),
    },
    "evaluation": {"n_rollouts": (int, 20000), "eval_seed": (int, 1000), "rel_tail": (float, 0.01)},
    "benchmark": {"seeds": (int, 5), "methods": (_str_list, FIGURE_METHODS), "workers": (int, 1)},
    "output": {"dir": (str, ""), "svg": (_bool, True), "record_runtime": (_bool, False)},
}


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # ((section, key, value), ...), in schema order
    source_text: str = ""

    def get(self, section: str, key: str):
        for s, k, v in self.values:
            if s == section and k == key:
                return v
        raise KeyError(f"{section}.{key}")

    def replace(self, **overrides) -> RunConfig:
        """``replace(data__n=10)`` style overrides, validated like file values."""
        vals = {(s, k): v for s, k, v in self.values}
        for name, val in overrides.items():
            section, _, key = name.partition("__")
            if (section, key) not in vals:
                raise ConfigError(f"unknown key {section}.{key}")
            vals[(section, key)] = val
        cfg = RunConfig(tuple((s, k, vals[(s, k)]) for s, k, _ in self.values), self.source_text)
        validate(cfg)
        return cfg

    def to_ini(self) -> str:
        out = []
        current = None
        for s, k, v in self.values:
            if s != current:
                out.append(f"{'' if current is None else chr(10)}[{s}]")
                current = s
            if isinstance(v, tuple):
                v = ", ".join(v)
            out.append(f"{k} = {'' if v is None else v}")
        return "\n".join(out) + "\n"


def parse_config(text: str = "") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    vals = []
    for section, keys in SCHEMA.items():
        for key, (conv, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    val = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from exc
            else:
                val = default
            vals.append((section, key, val))
    cfg = RunConfig(tuple(vals), text)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def validate(cfg: RunConfig) -> None:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    need(cfg.get("env", "name") in ("kidney", "tabular"), "env.name", "must be kidney or tabular")
    need(0 < cfg.get("env", "gamma") < 1, "env.gamma", "must lie in (0, 1)")
    for key in ("n", "t"):
        need(cfg.get("data", key) >= 1, f"data.{key}", "must be positive")
    need(cfg.get("features", "degree") >= 0, "features.degree", "must be non-negative")
    need(cfg.get("features", "policy_scale") in ("range", "standardize"), "features.policy_scale",
         "must be range or standardize")
    need(cfg.get("nuisance", "source") in ("oracle", "fitted", "fitted+conf-set"), "nuisance.source",
         "must be oracle, fitted or fitted+conf-set")
    for key in ("alpha_vf", "alpha_mis"):
        val = cfg.get("learner", key)
        need(val is None or val >= 0, f"learner.{key}", "must be non-negative")
    need(cfg.get("learner", "n_noise") >= 1, "learner.n_noise", "must be at least 1")
    need(cfg.get("learner", "noise_sd") >= 0, "learner.noise_sd", "must be non-negative")
    need(cfg.get("learner", "n_iter") >= 0, "learner.n_iter", "must be non-negative")
    need(cfg.get("learner", "n_dirs") >= 1, "learner.n_dirs", "must be positive")
    need(cfg.get("learner", "sigma") > 0, "learner.sigma", "must be positive")
    need(cfg.get("learner", "eta0") > 0, "learner.eta0", "must be positive")
    need(cfg.get("learner", "init") in ("behavior-cloning", "uniform"), "learner.init",
         "must be behavior-cloning or uniform")
    need(cfg.get("evaluation", "n_rollouts") >= 2, "evaluation.n_rollouts", "must be at least 2")
    need(cfg.get("benchmark", "seeds") >= 1, "benchmark.seeds", "must be positive")
    need(cfg.get("benchmark", "workers") >= 1, "benchmark.workers", "must be positive")
    for m in cfg.get("benchmark", "methods"):
        need(m in ALL_METHODS, "benchmark.methods", f"unknown method {m!r}")


def config_hash(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha1(cfg.to_ini().encode()).hexdigest()[:10]


# --------------------------------------------------------------------------- building blocks


def build_env(cfg: RunConfig):
    gamma = cfg.get("env", "gamma")
    if cfg.get("env", "name") == "kidney":
        return KidneyEnv(gamma=gamma)
    path = cfg.get("env", "path")
    if path:
        return TabularConfoundedMDP.from_dict(json.loads(Path(path).read_text()))
    return make_tabular(cfg.get("env", "n_s"), cfg.get("env", "n_u"), cfg.get("env", "k"), cfg.get("env", "seed"),
                        gamma=gamma, compliance=cfg.get("env", "compliance"))


def env_k(env) -> int:
    return env.k


def build_fmap(cfg: RunConfig, env, data: Dataset) -> FeatureMap:
    degree = cfg.get("features", "degree")
    if not cfg.get("features", "standardize"):
        return FeatureMap(degree)
    if isinstance(env, TabularConfoundedMDP):
        return FeatureMap.fitted(env.state_values, degree)
    return FeatureMap.fitted(data.s, degree)


def build_policy_fmap(cfg: RunConfig, env, data: Dataset) -> FeatureMap:
    """Policy features; ``range`` keeps every monomial within [-1, 1] on the observed states."""
    if cfg.get("features", "policy_scale") == "standardize":
        return build_fmap(cfg, env, data)
    states = env.state_values if isinstance(env, TabularConfoundedMDP) else data.s
    return FeatureMap.range_scaled(states, cfg.get("features", "degree"))


def build_data(cfg: RunConfig, env, seed: int) -> Dataset:
    return generate(env, cfg.get("data", "n"), cfg.get("data", "t"), seed)


def iv_nuisances(cfg: RunConfig, env, data: Dataset, fmap: FeatureMap, seed: int) -> list:
    source = cfg.get("nuisance", "source")
    if source == "oracle":
        return [oracle_nuisance(env)]
    ncfg = NuisanceConfig(c_cfg=cfg.get("nuisance", "c_cfg"), delta=cfg.get("nuisance", "delta"),
                          n_cand=cfg.get("nuisance", "n_cand") if source == "fitted+conf-set" else 0)
    cands, _ = nuisance_candidates(data, fmap, build_code(env_k(env)), ncfg, seed,
                                   calibrate=cfg.get("nuisance", "calibrate"))
    return cands


def naive_propensity(cfg: RunConfig, env, data: Dataset, fmap: FeatureMap) -> NaivePropensity:
    if cfg.get("nuisance", "source") == "oracle":
        return NaivePropensity(oracle_propensity(env))
    return NaivePropensity(fit_propensity(data, fmap, env_k(env)))


def pessimism_config(cfg: RunConfig, fmap: FeatureMap, mode: str, seed: int, objective: str = "vf",
                     alpha_vf: float = 0.0, alpha_mis: float = 0.0) -> PessimismConfig:
    return PessimismConfig(alpha_vf=alpha_vf, alpha_mis=alpha_mis, mode=mode, objective=objective,
                           n_noise=cfg.get("learner", "n_noise"), noise_sd=cfg.get("learner", "noise_sd"),
                           noise_seed=seed, nuisance_source=cfg.get("nuisance", "source"),
                           gamma=cfg.get("env", "gamma"), fmap=fmap, g_box=cfg.get("learner", "g_box"),
                           w_box=cfg.get("learner", "w_box"))


def zo_config(cfg: RunConfig) -> ZerothOrderConfig:
    return ZerothOrderConfig(n_iter=cfg.get("learner", "n_iter"), n_dirs=cfg.get("learner", "n_dirs"),
                             sigma=cfg.get("learner", "sigma"), eta0=cfg.get("learner", "eta0"),
                             normalize=cfg.get("learner", "normalize"),
                             random_search=cfg.get("learner", "random_search"))


def initial_policy(cfg: RunConfig, env, data: Dataset, fmap: FeatureMap | None = None) -> SoftmaxPolicy:
    fmap = fmap or build_policy_fmap(cfg, env, data)
    if cfg.get("learner", "init") == "uniform":
        return SoftmaxPolicy.uniform(env_k(env), fmap)
    return behavior_cloning_init(data, fmap, env_k(env))


def evaluate_policy(cfg: RunConfig, env, policy, seed: int):
    return true_j(env, policy, n_rollouts=cfg.get("evaluation", "n_rollouts"),
                  seed=cfg.get("evaluation", "eval_seed") + seed, rel_tail=cfg.get("evaluation", "rel_tail"))


def method_setup(cfg: RunConfig, method: str, env, data: Dataset, fmap: FeatureMap, seed: int, init):
    """``(pessimism config, nuisance candidates)`` for one named method."""
    if method in FIGURE_SPEC:
        mode, uses_iv = FIGURE_SPEC[method]
        nuis = iv_nuisances(cfg, env, data, fmap, seed) if uses_iv else [naive_propensity(cfg, env, data, fmap)]
        return pessimism_config(cfg, fmap, mode, seed), nuis
    objective = method.split("_")[0]
    nuis = iv_nuisances(cfg, env, data, fmap, seed)
    a_vf, a_mis = cfg.get("learner", "alpha_vf"), cfg.get("learner", "alpha_mis")
    if a_vf is None or a_mis is None:
        base = pessimism_config(cfg, fmap, "constrained-dual", seed, objective)
        cal_vf, cal_mis = calibrate_alphas(data, env.reference(), init, nuis[0], base,
                                           delta=cfg.get("nuisance", "delta"), c_cfg=cfg.get("learner", "alpha_c"),
                                           seed=seed)
        a_vf = cal_vf if a_vf is None else a_vf
        a_mis = cal_mis if a_mis is None else a_mis
    return pessimism_config(cfg, fmap, "constrained-dual", seed, objective, a_vf, a_mis), nuis


@dataclass
class CellResult:
    method: str
    seed: int
    j_mean: float
    j_se: float
    runtime_s: float
    learn: LearnResult | None = None


def run_cell(cfg: RunConfig, method: str, seed: int) -> CellResult:
    """One ``(method, seed)`` cell: simulate, learn, evaluate by rollouts."""
    start = time.perf_counter()
    env = build_env(cfg)
    if method == "behavior":
        j, se = evaluate_policy(cfg, env, "behavior", seed)
        return CellResult(method, seed, j, se, time.perf_counter() - start)
    data = build_data(cfg, env, seed)
    fmap = build_fmap(cfg, env, data)
    init = initial_policy(cfg, env, data)
    pcfg, nuis = method_setup(cfg, method, env, data, fmap, seed, init)
    res = learn(data, env.reference(), nuis, pcfg, zo_config(cfg), seed, init=init, dcfg=DualConfig())
    j, se = evaluate_policy(cfg, env, res.policy, seed)
    return CellResult(method, seed, j, se, time.perf_counter() - start, res)


def _cell_job(args):
    text, method, seed = args
    return run_cell(parse_config(text), method, seed)


def run_cells(cfg: RunConfig, cells, workers: int = 1) -> list[CellResult]:
    """Run cells serially or in a process pool; results keep the input order."""
    jobs = [(cfg.to_ini(), m, s) for m, s in cells]
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def benchmark_cells(cfg: RunConfig):
    base = cfg.get("data", "seed")
    seeds = [base + i for i in range(cfg.get("benchmark", "seeds"))]
    methods = list(cfg.get("benchmark", "methods")) + ["behavior"]
    return [(m, s) for m in methods for s in seeds]


# --------------------------------------------------------------------------- statistics


class IntervalUndefined(ValueError):
    pass


def confidence_interval(values, level: float = 0.95):
    """``mean +- t_{(1+level)/2, n-1} sd / sqrt(n)`` over seeds."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise IntervalUndefined("a confidence interval needs at least two seeds")
    mean = float(x.mean())
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))
    return mean, mean - half, mean + half


def summarize(results: list[CellResult]) -> dict:
    by = {}
    for r in results:
        by.setdefault(r.method, []).append(r.j_mean)
    return {m: np.asarray(v) for m, v in by.items()}


def figure_checks(results: list[CellResult]) -> list[tuple[str, bool, str]]:
    """The qualitative orderings of the reproduced figure, as ``(name, ok, detail)``."""
    by = summarize(results)
    beh = by["behavior"]
    out = []

    def se(x):
        return x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else 0.0

    for m in ("pess_IV", "no_pess_IV"):
        if m in by:
            out.append((f"{m} beats behavior", bool(by[m].mean() > beh.mean()),
                        f"{by[m].mean():.4f} vs {beh.mean():.4f}"))
    for m in ("pess_no_IV", "no_pess_no_IV"):
        if m in by:
            pooled = float(np.sqrt(se(by[m]) ** 2 + se(beh) ** 2))
            out.append((f"{m} does not beat behavior + pooled se",
                        bool(by[m].mean() <= beh.mean() + pooled),
                        f"{by[m].mean():.4f} vs {beh.mean():.4f} + {pooled:.4f}"))
    if "pess_IV" in by and "no_pess_IV" in by:
        a, b = by["pess_IV"].std(ddof=1), by["no_pess_IV"].std(ddof=1)
        out.append(("pess_IV sd <= no_pess_IV sd", bool(a <= b), f"{a:.4f} vs {b:.4f}"))
    return out


# --------------------------------------------------------------------------- artifacts


def _fmt(x) -> str:
    return format(float(x), ".17g")


def results_csv(results: list[CellResult], record_runtime: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in results:
        w.writerow([r.method, r.seed, _fmt(r.j_mean), _fmt(r.j_se), _fmt(r.runtime_s) if record_runtime else ""])
    return buf.getvalue()


def timings_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "seed", "runtime_s"))
    for r in results:
        w.writerow([r.method, r.seed, f"{r.runtime_s:.3f}"])
    return buf.getvalue()


def trace_csv(res: LearnResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("iter", "objective", "grad_norm", "param_hash"))
    for it, obj, gn, h in res.trace_rows():
        w.writerow([it, _fmt(obj), _fmt(gn), h])
    return buf.getvalue()


def plot_rows(results: list[CellResult]):
    rows = []
    for m, vals in summarize(results).items():
        if vals.size >= 2:
            rows.append((m, *confidence_interval(vals)))
        else:
            rows.append((m, float(vals[0]), float("nan"), float("nan")))
    return rows


def plot_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "mean", "ci_lo", "ci_hi"))
    for m, mean, lo, hi in rows:
        w.writerow([m, _fmt(mean), _fmt(lo), _fmt(hi)])
    return buf.getvalue()


def svg_chart(rows, title: str = "Expected total reward by method") -> str:
    """Self-contained SVG: one point with a 95% interval per method."""
    width, height, pad = 640, 360, 60
    vals = [v for _, mean, lo, hi in rows for v in (mean, lo, hi) if np.isfinite(v)]
    lo_v, hi_v = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi_v == lo_v:
        lo_v, hi_v = lo_v - 1, hi_v + 1
    span = hi_v - lo_v
    lo_v, hi_v = lo_v - 0.05 * span, hi_v + 0.05 * span

    def y(v):
        return pad + (hi_v - v) / (hi_v - lo_v) * (height - 2 * pad)

    step = (width - 2 * pad) / max(len(rows), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">',
             f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for i in range(5):
        v = lo_v + i * (hi_v - lo_v) / 4
        parts.append(f'<text x="{pad - 6}" y="{y(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.2f}</text>')
    for i, (m, mean, lo, hi) in enumerate(rows):
        x = pad + (i + 0.5) * step
        if np.isfinite(lo) and np.isfinite(hi):
            parts.append(f'<line x1="{x:.1f}" y1="{y(hi):.1f}" x2="{x:.1f}" y2="{y(lo):.1f}" '
                         'stroke="steelblue" stroke-width="3"/>')
        parts.append(f'<circle cx="{x:.1f}" cy="{y(mean):.1f}" r="4" fill="crimson"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs"))


def run_dir(cfg: RunConfig, command: str, explicit: str | None = None) -> Path:
    if explicit:
        path = Path(explicit)
    elif cfg.get("output", "dir"):
        path = output_root() / cfg.get("output", "dir")
    else:
        path = output_root() / f"{command}-{config_hash(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_snapshot(path: Path, cfg: RunConfig) -> None:
    (path / "config.ini").write_text(cfg.source_text)
    (path / "config.resolved.ini").write_text(cfg.to_ini())


def write_benchmark(path: Path, cfg: RunConfig, results: list[CellResult]) -> None:
    write_snapshot(path, cfg)
    (path / "results.csv").write_text(results_csv(results, cfg.get("output", "record_runtime")))
    (path / "timings.csv").write_text(timings_csv(results))
    traces = path / "traces"
    traces.mkdir(exist_ok=True)
    for r in results:
        if r.learn is not None:
            (traces / f"{r.method}_seed{r.seed}.csv").write_text(trace_csv(r.learn))
    rows = plot_rows(results)
    (path / "plot_data.csv").write_text(plot_csv(rows))
    if cfg.get("output", "svg"):
        (path / "chart.svg").write_text(svg_chart(rows))


def policy_to_json(policy: SoftmaxPolicy) -> str:
    return json.dumps({"w_pi": policy.w_pi.tolist(), "fmap": policy.fmap.to_dict()}, indent=2) + "\n"


def policy_from_json(text: str) -> SoftmaxPolicy:
    d = json.loads(text)
    fm = d["fmap"]
    std = tuple(fm["standardize"]) if fm.get("standardize") else None
    return SoftmaxPolicy(np.asarray(d["w_pi"], dtype=float), FeatureMap(fm["degree"], std))
