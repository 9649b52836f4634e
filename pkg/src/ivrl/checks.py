"""Acceptance checks shared by the test suite and ``ivrl selftest``.

Each check returns a :class:`CheckResult`; ``passed`` already includes the
runtime budget.
"""

from __future__ import annotations

import dataclasses
import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import build_code
from .env import KidneyEnv, exact_ratio, exact_value, generate, make_tabular, true_j
from .estimators import StepBatch, inner_max_closed_form, l_dr_pop, l_mis, l_mis_pop, moments, phi_mis_pop, \
    phi_vf_pop
from .funcspace import BoxedLinearW, FeatureMap, LinearV, SoftmaxPolicy
from .learner import PessimismConfig, calibrate_alphas, dual_vf_from_moments, pessimistic_j_mis, pessimistic_j_vf
from .nuisance import NuisanceConfig, fit_theta, oracle_nuisance, squared_hellinger


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    runtime_s: float
    budget_s: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:2d} [{status}] {self.name}: {self.detail} ({self.runtime_s:.1f}s / {self.budget_s:g}s)"


def _timed(number, name, budget, fn) -> CheckResult:
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    return CheckResult(number, name, bool(ok) and elapsed < budget, detail, elapsed, budget)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# --------------------------------------------------------------------------- fixtures


def tabular_fixture(seed: int = 1):
    """Five-state fixture with a random softmax policy on standardised features."""
    env = make_tabular(5, 2, 3, seed=seed)
    fmap = FeatureMap.fitted(env.state_values, 4)
    policy = SoftmaxPolicy(np.random.default_rng([seed, 7]).normal(size=(3, fmap.dim)), fmap)
    return env, fmap, policy


def linear_v_of(values, fmap: FeatureMap, states) -> LinearV:
    return LinearV(np.linalg.solve(fmap(states), values), fmap)


# --------------------------------------------------------------------------- criteria


def check_simplex_code() -> CheckResult:
    def run():
        worst = 0.0
        for k in range(2, 9):
            v = build_code(k).vectors
            gram = np.full((k, k), -1.0 / (k - 1))
            np.fill_diagonal(gram, 1.0)
            worst = max(worst, np.abs(v.sum(axis=0)).max(), np.abs(v @ v.T - gram).max())
        return worst <= 1e-12, f"max deviation {worst:.2e}"

    return _timed(1, "simplex code algebra", 1.0, run)


def check_identification(t_len: int = 7, n_random: int = 10) -> CheckResult:
    def run():
        env, fmap, pol = tabular_fixture()
        nu = oracle_nuisance(env)
        g = env.gamma
        j = true_j(env, pol)[0]
        v_pi = linear_v_of(exact_value(env, pol), fmap, env.state_values)
        w_coef = np.linalg.solve(fmap(env.state_values), exact_ratio(env, pol, t_len))
        box = float(np.abs(w_coef).max()) + 1.0
        w_pi = BoxedLinearW(w_coef, box, fmap)
        errs = {}
        basis = np.eye(fmap.dim)
        errs["vf"] = max(abs(phi_vf_pop(env, t_len, pol, v_pi, BoxedLinearW(e, 1.0, fmap), nu, g)) for e in basis)
        errs["mis"] = max(abs(phi_mis_pop(env, t_len, pol, w_pi, LinearV(e, fmap), nu, g)) for e in basis)
        errs["lmis"] = abs(l_mis_pop(env, t_len, pol, w_pi, nu) - j)
        rng = np.random.default_rng(11)
        dr_v = dr_w = 0.0
        for _ in range(n_random):
            v = LinearV(rng.normal(size=fmap.dim), fmap)
            w = BoxedLinearW(rng.uniform(-box, box, size=fmap.dim), box, fmap)
            dr_v = max(dr_v, abs(l_dr_pop(env, t_len, pol, w_pi, v, nu, g) - j))
            dr_w = max(dr_w, abs(l_dr_pop(env, t_len, pol, w, v_pi, nu, g) - j))
        errs["dr_w"], errs["dr_v"] = dr_v, dr_w
        worst = max(errs.values())
        return worst <= 1e-10, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())

    return _timed(2, "identification oracle suite", 10.0, run)


def check_kidney_compliance() -> CheckResult:
    def run():
        delta = KidneyEnv().compliance_by_branch()
        dev = float(np.abs(delta - 0.70).max())
        return dev <= 1e-12, f"max |Delta - 0.70| = {dev:.1e}"

    return _timed(3, "kidney compliance constant", 1.0, run)


def check_inner_max(n: int = 100, d: int = 5) -> CheckResult:
    def run():
        rng = np.random.default_rng(4)
        corners = list(itertools.product((-1.0, 1.0), repeat=d))
        mismatches = 0
        for _ in range(n):
            b = rng.normal(size=d)
            value, arg = inner_max_closed_form(b, 1.0)
            brute = max(corners, key=lambda c: sum(ci * bi for ci, bi in zip(c, b)))
            brute_val = sum(ci * bi for ci, bi in zip(brute, b))
            if value != brute_val or not np.array_equal(arg, np.array(brute)):
                mismatches += 1
        return mismatches == 0, f"{mismatches} mismatches over {n} vectors"

    return _timed(4, "closed-form inner max vs vertex enumeration", 5.0, run)


def in_class_theta_env(seed: int = 3):
    """Fixture whose instrument law is exactly a multinomial logit in the features."""
    env = make_tabular(5, 2, 3, seed=seed)
    fmap = FeatureMap.fitted(env.state_values, 4)
    w = np.random.default_rng([seed, 5]).normal(scale=0.3, size=(3, fmap.dim))
    logits = fmap(env.state_values) @ w.T
    theta = np.exp(logits - logits.max(axis=1, keepdims=True))
    theta /= theta.sum(axis=1, keepdims=True)
    return dataclasses.replace(env, theta=theta), fmap


def check_mle_rate(sizes=(1000, 4000, 16000), n_seeds: int = 20, t_len: int = 10) -> CheckResult:
    def run():
        env, fmap = in_class_theta_env()
        errs = []
        for nt in sizes:
            e = []
            for seed in range(n_seeds):
                data = generate(env, nt // t_len, t_len, seed=seed)
                model = fit_theta(data, fmap, NuisanceConfig(), env.k)
                s = data.s.ravel()
                e.append(float(squared_hellinger(model(s), env.theta[env.index_of(s)]).mean()))
            errs.append(np.mean(e))
        slope = loglog_slope(sizes, errs)
        return -1.3 <= slope <= -0.7, f"slope {slope:.3f}, errors {', '.join(f'{x:.2e}' for x in errs)}"

    return _timed(5, "MLE Hellinger rate", 120.0, run)


def feasible_probes(mom, alpha, box, n_probe, rng):
    """``v_hat`` plus random perturbations that verifiably satisfy the VF constraint."""
    m_min = box * np.abs(mom.vf_residual(np.linalg.solve(mom.M, -mom.c))).sum()
    base = np.linalg.solve(mom.M, -mom.c)
    probes = [base]
    while len(probes) < n_probe + 1:
        d = rng.normal(size=base.size)
        lhs = box * np.abs(mom.M @ d).sum()
        cand = base + d * (alpha / lhs) * rng.uniform(0.0, 1.0)
        if box * np.abs(mom.vf_residual(cand)).sum() - m_min <= alpha:
            probes.append(cand)
    return probes


def check_weak_duality(n_fixtures: int = 20, n_probe: int = 10) -> CheckResult:
    def run():
        worst = -np.inf
        for seed in range(n_fixtures):
            env, fmap, pol = tabular_fixture(seed)
            nuis = oracle_nuisance(env)
            data = generate(env, 200, 10, seed=seed)
            mom = moments(data, env.reference(), pol, nuis, env.gamma, fmap)
            alpha = 0.05 * (1 + seed % 5)
            value, _ = dual_vf_from_moments(mom, alpha, 1.0)
            rng = np.random.default_rng([seed, 99])
            for p in feasible_probes(mom, alpha, 1.0, n_probe, rng):
                worst = max(worst, value - float(mom.nu_weight @ p))
        return worst <= 1e-6, f"max(dual - probe) = {worst:.2e}"

    return _timed(6, "weak duality against feasible probes", 120.0, run)


def check_pessimism_validity(n_seeds: int = 20, n: int = 300, t_len: int = 10) -> CheckResult:
    def run():
        env, fmap, pol = tabular_fixture()
        nuis = oracle_nuisance(env)
        j = true_j(env, pol)[0]
        base = PessimismConfig(fmap=fmap, gamma=env.gamma, w_box=10.0, mode="constrained-dual")
        ok_vf = ok_mis = 0
        for seed in range(n_seeds):
            data = generate(env, n, t_len, seed=100 + seed)
            a_vf, a_mis = calibrate_alphas(data, env.reference(), pol, nuis, base, seed=seed)
            cfg = dataclasses.replace(base, alpha_vf=a_vf, alpha_mis=a_mis)
            ok_vf += pessimistic_j_vf(data, env.reference(), pol, [nuis], cfg) <= j + 1e-6
            ok_mis += pessimistic_j_mis(data, env.reference(), pol, [nuis], cfg) <= j + 1e-6
        need = int(np.ceil(0.9 * n_seeds))
        return ok_vf >= need and ok_mis >= need, f"VF {ok_vf}/{n_seeds}, MIS {ok_mis}/{n_seeds} below J"

    return _timed(7, "pessimism validity", 300.0, run)


def check_mis_rate(sizes=(1000, 10000, 100000), n_seeds: int = 20, t_len: int = 10) -> CheckResult:
    def run():
        env, fmap, pol = tabular_fixture()
        nuis = oracle_nuisance(env)
        j = true_j(env, pol)[0]
        w_coef = np.linalg.solve(fmap(env.state_values), exact_ratio(env, pol, t_len))
        w_pi = BoxedLinearW(w_coef, float(np.abs(w_coef).max()), fmap)
        errs = []
        for m in sizes:
            e = [abs(l_mis(StepBatch.empirical(generate(env, m, t_len, seed=seed)), pol, w_pi, nuis) - j)
                 for seed in range(n_seeds)]
            errs.append(float(np.mean(e)))
        slope = loglog_slope(sizes, errs)
        return abs(slope + 0.5) <= 0.15, f"slope {slope:.3f}, errors {', '.join(f'{x:.2e}' for x in errs)}"

    return _timed(8, "empirical MIS rate", 300.0, run)


def check_figure(workdir=None, seeds: int = 5) -> CheckResult:
    from .harness import benchmark_cells, figure_checks, parse_config, run_cells, run_dir, write_benchmark

    def run():
        cfg = parse_config(f"[data]\nn = 200\nt = 100\n[benchmark]\nseeds = {seeds}\n")
        results = run_cells(cfg, benchmark_cells(cfg))
        if workdir is not None:
            write_benchmark(run_dir(cfg, "reproduce-figure", str(Path(workdir) / "figure")), cfg, results)
        checks = figure_checks(results)
        return all(ok for _, ok, _ in checks), "; ".join(f"{n}: {'ok' if ok else 'NO'} ({d})" for n, ok, d in checks)

    return _timed(9, "figure ordering at desk scale", 1800.0, run)


DETERMINISM_CONFIG = """\
[data]
n = 60
t = 40
[learner]
n_iter = 15
[evaluation]
n_rollouts = 2000
[benchmark]
seeds = 2
"""


def check_determinism(budget_s: float = 3600.0) -> CheckResult:
    from .harness import benchmark_cells, parse_config, results_csv, run_cells

    def run():
        cfg = parse_config(DETERMINISM_CONFIG)
        cells = benchmark_cells(cfg)
        outs = [results_csv(run_cells(cfg, cells, workers=w)) for w in (1, 1, 8)]
        same = outs[0] == outs[1] == outs[2]
        return same, "byte-identical across two serial runs and 8 workers" if same else "results differ"

    return _timed(10, "benchmark determinism", budget_s, run)


def run_all(full: bool = True, workdir=None, echo=print) -> list[CheckResult]:
    checks = [check_simplex_code, check_identification, check_kidney_compliance, check_inner_max, check_mle_rate,
              check_weak_duality, check_pessimism_validity, check_mis_rate]
    out = []
    for fn in checks:
        res = fn()
        echo(res.line())
        out.append(res)
    if full:
        with tempfile.TemporaryDirectory() as tmp:
            fig = check_figure(workdir or tmp)
            echo(fig.line())
            det = check_determinism(2 * max(fig.runtime_s, 1.0))
            echo(det.line())
        out += [fig, det]
    return out
