"""Pessimistic policy evaluation and zeroth-order policy search.

Every estimator below works in coefficient space through :class:`Moments`:

* VF value set  ``{w_v : B ||c + M w_v||_1 - m_vf <= alpha_vf}``, objective ``q^T w_v``
* MIS ratio set ``{w_w in box : ||q - G w_w||_1 - m_mis <= alpha_mis}``, objective ``c^T w_w``

where ``m_vf`` and ``m_mis`` are the losses of the min-max fits.  The VF and
MIS problems are solved through their Lagrangian duals; DR alternates primal
block solves on the product of both sets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import Dataset, as_reference
from .estimators import (Moments, NaivePropensity, StepBatch, as_batch, base_ratio, fit_v_from_moments,
                         fit_w_from_moments, moments_from_ratio)
from .funcspace import BoxedLinearW, FeatureMap, LinearV, SoftmaxPolicy
from .nuisance import fit_logit
from .solvers import l1_constrained_lp, l1_min, l1_min_lp

MODES = ("constrained-dual", "noise-replicate", "none")
OBJECTIVES = ("vf", "mis", "dr")
SOURCES = ("oracle", "fitted", "fitted+conf-set")


class DualFailure(RuntimeError):
    """Dual ascent could not certify a value (multiplier cap reached or iteration cap)."""

    def __init__(self, message, lam=None, gap_history=None):
        super().__init__(message)
        self.lam = lam
        self.gap_history = list(gap_history or [])


class ReplicateFailure(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"noise replicate {index} failed: {cause}")
        self.index = index


@dataclass
class PessimismConfig:
    alpha_vf: float = 0.0
    alpha_mis: float = 0.0
    alpha0: float | None = None
    alpha1: float | None = None
    mode: str = "noise-replicate"
    objective: str = "vf"
    n_noise: int = 10
    noise_sd: float = 0.1
    noise_seed: int = 0
    nuisance_source: str = "oracle"
    gamma: float = 0.9
    fmap: FeatureMap = field(default_factory=FeatureMap)
    g_box: float = 1.0
    w_box: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.nuisance_source not in SOURCES:
            raise ValueError(f"nuisance_source must be one of {SOURCES}, got {self.nuisance_source!r}")
        for name in ("alpha_vf", "alpha_mis", "alpha0", "alpha1", "noise_sd"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_noise < 1:
            raise ValueError("n_noise must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class DualConfig:
    lambda_init: float = 1.0
    lambda_cap: float = 1e6
    tol: float = 1e-5
    feas_tol: float = 1e-9
    rel_width: float = 1e-12
    max_iter: int = 200
    eta0: float = 1.0
    backend: str = "auto"


@dataclass
class DualState:
    lam: float
    v_current: LinearV | BoxedLinearW | None
    gap_history: list
    value: float = float("nan")
    lam_history: list = field(default_factory=list)
    iterations: int = 0
    unbounded: bool = False
    residual: float = float("nan")

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("dual multiplier must be non-negative")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    objective: float
    grad_norm: float
    param_hash: str
    params: tuple


@dataclass
class LearnResult:
    policy: SoftmaxPolicy
    pessimistic_j: float
    trace: list
    mode: str
    seeds: dict

    def trace_rows(self):
        return [(r.iter, r.objective, r.grad_norm, r.param_hash) for r in self.trace]


def param_hash(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta, dtype=np.float64).tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------- generic dual ascent


@dataclass
class _Inner:
    obj: float  # primal objective at the inner minimiser
    mhat: float  # constraint function at the inner minimiser
    x: np.ndarray


def _dual_ascent(inner: Callable[[float], _Inner | None], alpha: float, cfg: DualConfig, wrap):
    """Maximise ``g(lam) = min_x obj(x) + lam (mhat(x) - alpha)`` over ``lam >= 0``.

    ``inner(lam)`` returns ``None`` when the inner problem is unbounded below.
    Ascent: projected supergradient steps ``lam += max(eta_k s, lam)`` (at least
    doubling) while the supergradient ``s`` is positive or the inner problem is
    unbounded.  Once a multiplier with ``s <= 0`` brackets the maximiser,
    bisection on the sign of ``s`` finishes.  The stopping residual combines
    complementarity ``lam |s|`` with the primal violation ``max(s, 0)``.  The best ``g`` seen is returned,
    which is a valid lower bound on the constrained minimum.
    """
    gaps, lams = [], []
    best = (-np.inf, None, 0.0, np.nan)

    def record(lam, sol):
        nonlocal best
        lams.append(lam)
        if sol is None:
            return None
        s = sol.mhat - alpha
        g = sol.obj + lam * s
        gaps.append(sol.mhat)
        if g > best[0]:
            best = (g, sol, lam, max(lam * abs(s), s))
        return s

    lam, lo, hi, it = 0.0, 0.0, None, 0
    while hi is None:
        it += 1
        s = record(lam, inner(lam))
        if s is not None and s <= cfg.feas_tol:
            hi = lam
            break
        lo = lam
        step = cfg.lambda_init if s is None else cfg.eta0 / np.sqrt(it) * s
        lam = max(lam + max(step, lam), cfg.lambda_init)
        if lam > cfg.lambda_cap:
            raise DualFailure(f"dual multiplier exceeded cap {cfg.lambda_cap:g}; constraint set suspected empty",
                              lam, gaps)
        if it >= cfg.max_iter:
            raise DualFailure("dual ascent did not bracket the multiplier", lam, gaps)
    if hi > 0 and best[3] > cfg.tol:
        while hi - lo > cfg.rel_width * max(1.0, hi) and it < cfg.max_iter:
            it += 1
            mid = 0.5 * (lo + hi)
            s = record(mid, inner(mid))
            if s is None or s > cfg.feas_tol:
                lo = mid
            else:
                hi = mid
            if best[3] <= cfg.tol:
                break
    value, sol, lam_best, resid = best
    if sol is None:
        raise DualFailure("no bounded inner problem found", lam, gaps)
    state = DualState(lam_best, wrap(sol.x), gaps, float(value), lams, it, False, float(resid))
    return float(value), state


# --------------------------------------------------------------------------- VF


def _vf_min_loss(mom: Moments, box: float, backend: str) -> tuple[float, np.ndarray]:
    res = l1_min(mom.M, mom.c, backend=backend)
    return box * res.value, res.x


def dual_vf_from_moments(mom: Moments, alpha_vf: float, box: float = 1.0, dcfg: DualConfig | None = None):
    """Dual of ``min q^T w_v`` over the VF confidence set; returns ``(value, DualState)``."""
    dcfg = dcfg or DualConfig()
    if alpha_vf < 0:
        raise ValueError("alpha_vf must be non-negative")
    m_min, w_hat = _vf_min_loss(mom, box, dcfg.backend)
    e = mom.nu_weight
    wrap = lambda x: LinearV(x, mom.fmap)  # noqa: E731
    if np.isinf(alpha_vf):
        return -np.inf, DualState(0.0, None, [], -np.inf, unbounded=True)
    square = mom.M.shape[0] == mom.M.shape[1] and dcfg.backend in ("auto", "solve")
    if square and np.linalg.cond(mom.M) < 1e10:
        # b = c + M w ranges over all of R^d: the inner problem is bounded iff
        # lam B >= ||M^{-T} q||_inf, with minimiser b = 0.
        u_norm = np.abs(np.linalg.solve(mom.M.T, e)).max()
        base_obj = float(e @ w_hat)

        def inner(lam):
            if lam * box < u_norm * (1 - 1e-12):
                return None
            return _Inner(base_obj, box * float(np.abs(mom.vf_residual(w_hat)).sum()) - m_min, w_hat)
    else:
        def inner(lam):
            res = l1_min_lp(mom.M, mom.c, cost=e, weight=lam * box)
            if res.status == "unbounded":
                return None
            x = res.x
            return _Inner(float(e @ x), box * float(np.abs(mom.vf_residual(x)).sum()) - m_min, x)
    return _dual_ascent(inner, alpha_vf, dcfg, wrap)


def primal_vf(mom: Moments, alpha_vf: float, box: float = 1.0, cost: np.ndarray | None = None,
              backend: str = "auto"):
    """Direct LP for ``min cost^T w_v`` over the VF confidence set (``cost`` defaults to ``q``)."""
    m_min, _ = _vf_min_loss(mom, box, backend)
    cost = mom.nu_weight if cost is None else cost
    return l1_constrained_lp(cost, mom.M, mom.c, (m_min + alpha_vf) / box)


# --------------------------------------------------------------------------- MIS


def _mis_min_loss(mom: Moments, w_box: float, backend: str) -> float:
    return l1_min(-mom.G, mom.q, box=w_box, backend=backend).value


def dual_mis_from_moments(mom: Moments, alpha_mis: float, w_box: float = 1.0, dcfg: DualConfig | None = None):
    """Dual of ``min c^T w_w`` over the MIS confidence set; returns ``(value, DualState)``."""
    dcfg = dcfg or DualConfig()
    if alpha_mis < 0:
        raise ValueError("alpha_mis must be non-negative")
    m_min = _mis_min_loss(mom, w_box, dcfg.backend)
    wrap = lambda x: BoxedLinearW(np.clip(x, -w_box, w_box), w_box, mom.fmap)  # noqa: E731
    if np.isinf(alpha_mis):
        x = -w_box * np.where(mom.c >= 0, 1.0, -1.0)
        return float(mom.c @ x), DualState(0.0, wrap(x), [], float(mom.c @ x))

    def inner(lam):
        res = l1_min_lp(-mom.G, mom.q, cost=mom.c, weight=lam, box=w_box)
        x = res.x
        return _Inner(float(mom.c @ x), float(np.abs(mom.mis_residual(x)).sum()) - m_min, x)

    return _dual_ascent(inner, alpha_mis, dcfg, wrap)


def primal_mis(mom: Moments, alpha_mis: float, w_box: float = 1.0, cost: np.ndarray | None = None,
               backend: str = "auto"):
    m_min = _mis_min_loss(mom, w_box, backend)
    cost = mom.c if cost is None else cost
    return l1_constrained_lp(cost, -mom.G, mom.q, m_min + alpha_mis, box=w_box)


# --------------------------------------------------------------------------- DR


@dataclass
class DrSolution:
    value: float
    w: np.ndarray
    v: np.ndarray
    vf_slack: float
    mis_slack: float
    history: list


def dr_from_moments(mom: Moments, alpha_vf: float, alpha_mis: float, g_box: float = 1.0, w_box: float = 1.0,
                    sweeps: int = 3, order: str = "both", fix_v: np.ndarray | None = None,
                    backend: str = "auto") -> DrSolution:
    """Block-coordinate minimisation of ``c^T w + v^T (q - G w)`` over both confidence sets.

    Starts from the min-max fits; each block is a linear objective over one
    set, solved exactly.  The objective is non-increasing across blocks.
    ``fix_v`` pins the value block (with ``v = 0`` this is the MIS problem).
    The problem is bilinear, so the two block orders can stop at different
    partial optima; ``order="both"`` runs each and keeps the lower value.
    """
    if order == "both":
        runs = [dr_from_moments(mom, alpha_vf, alpha_mis, g_box, w_box, sweeps, o, fix_v, backend) for o in ("wv", "vw")]
        return min(runs, key=lambda r: r.value)
    v = fit_v_from_moments(mom, g_box, backend).solution.w_v if fix_v is None else np.asarray(fix_v, float)
    w = fit_w_from_moments(mom, w_box, backend).solution.w_g

    def obj(w, v):
        return float(mom.c @ w + v @ mom.mis_residual(w))

    history = [obj(w, v)]
    for _ in range(sweeps):
        for block in order:
            if block == "w":
                res = primal_mis(mom, alpha_mis, w_box, cost=mom.c - mom.G.T @ v, backend=backend)
                if res.status != "optimal":
                    raise DualFailure(f"MIS block {res.status}")
                cand = np.clip(res.x, -w_box, w_box)
                if obj(cand, v) <= history[-1]:
                    w = cand
            elif fix_v is None:
                res = primal_vf(mom, alpha_vf, g_box, cost=mom.mis_residual(w), backend=backend)
                if res.status == "unbounded":
                    return DrSolution(-np.inf, w, v, np.nan, np.nan, history + [-np.inf])
                if res.status != "optimal":
                    raise DualFailure(f"VF block {res.status}")
                if obj(w, res.x) <= history[-1]:
                    v = res.x
            history.append(obj(w, v))
    m_vf, _ = _vf_min_loss(mom, g_box, backend)
    m_mis = _mis_min_loss(mom, w_box, backend)
    vf_slack = m_vf + alpha_vf - g_box * float(np.abs(mom.vf_residual(v)).sum())
    mis_slack = m_mis + alpha_mis - float(np.abs(mom.mis_residual(w)).sum())
    return DrSolution(history[-1], w, v, vf_slack, mis_slack, history)


# --------------------------------------------------------------------------- data-level wrappers


def _moments(data, nu_sample, policy, nuisance, cfg: PessimismConfig, t_len=None) -> Moments:
    batch = as_batch(data, t_len)
    rho = base_ratio(batch, nuisance, policy.k) * policy.probs(batch.s)[np.arange(batch.s.size), batch.a]
    return moments_from_ratio(batch, rho, cfg.fmap, nu_sample, cfg.gamma)


def _candidates(nuisance_candidates):
    cands = list(nuisance_candidates) if isinstance(nuisance_candidates, (list, tuple)) else [nuisance_candidates]
    if not cands:
        raise ValueError("at least one nuisance candidate is required")
    return cands


def dual_solve_vf(data, nu_sample, policy, nuisance, alpha_vf: float, dcfg: DualConfig | None = None,
                  cfg: PessimismConfig | None = None, t_len=None):
    cfg = cfg or PessimismConfig()
    mom = _moments(data, nu_sample, policy, nuisance, cfg, t_len)
    return dual_vf_from_moments(mom, alpha_vf, cfg.g_box, dcfg)


def pessimistic_j_vf(data, nu_sample, policy, nuisance_candidates, cfg: PessimismConfig,
                     dcfg: DualConfig | None = None, t_len=None) -> float:
    """``min`` over candidates of the smallest ``(1-gamma) E_nu v`` on the VF confidence set."""
    return min(dual_solve_vf(data, nu_sample, policy, nu, cfg.alpha_vf, dcfg, cfg, t_len)[0]
               for nu in _candidates(nuisance_candidates))


def pessimistic_j_mis(data, nu_sample, policy, nuisance_candidates, cfg: PessimismConfig,
                      dcfg: DualConfig | None = None, t_len=None) -> float:
    """``min`` over candidates of the smallest ``L_mis(w)`` on the MIS confidence set."""
    out = []
    for nu in _candidates(nuisance_candidates):
        mom = _moments(data, nu_sample, policy, nu, cfg, t_len)
        out.append(dual_mis_from_moments(mom, cfg.alpha_mis, cfg.w_box, dcfg)[0])
    return min(out)


def pessimistic_j_dr(data, nu_sample, policy, nuisance_candidates, cfg: PessimismConfig, t_len=None,
                     sweeps: int = 3, order: str = "both") -> float:
    out = []
    for nu in _candidates(nuisance_candidates):
        mom = _moments(data, nu_sample, policy, nu, cfg, t_len)
        out.append(dr_from_moments(mom, cfg.alpha_vf, cfg.alpha_mis, cfg.g_box, cfg.w_box, sweeps, order).value)
    return min(out)


def replicate_noise(shape, n_noise: int, sd: float, seed: int) -> np.ndarray:
    """Reward perturbations, shape ``(n_noise, *shape)``; replicate ``j`` depends only on ``(seed, j)``."""
    return np.stack([np.random.default_rng([seed, 0x5EED, j]).normal(0.0, sd, shape) for j in range(n_noise)])


def noise_replicate_pessimism(data: Dataset, nu_sample, policy, nuisance, cfg: PessimismConfig) -> float:
    """``min_j (1-gamma) E_nu v_j`` over VF fits on noise-perturbed rewards."""
    ev = PolicyEvaluator(data, nu_sample, nuisance, cfg)
    return ev.noise_replicate(policy)


def plain_value(data, nu_sample, policy, nuisance, cfg: PessimismConfig, t_len=None) -> float:
    mom = _moments(data, nu_sample, policy, nuisance, cfg, t_len)
    fit = fit_v_from_moments(mom, cfg.g_box)
    return float(mom.nu_weight @ fit.solution.w_v)


# --------------------------------------------------------------------------- fast evaluator


class PolicyEvaluator:
    """Precomputed policy-independent pieces of the VF moments for repeated evaluation.

    Holds the step features, the ``policy``-free part of the weights and the
    noise-replicate reward matrix, so one evaluation costs a few ``einsum``
    reductions and a ``d x d`` solve per replicate.
    """

    def __init__(self, data, nu_sample, nuisance, cfg: PessimismConfig, t_len=None):
        self.cfg = cfg
        self.batch: StepBatch = as_batch(data, t_len)
        self.nuisance = nuisance
        self.psi, self.psi_next = self.batch.features(cfg.fmap)
        nu = as_reference(nu_sample)
        self.q = (1 - cfg.gamma) * np.einsum("i,ij->j", nu.weights, cfg.fmap(nu.points))
        self.p0 = np.einsum("i,ij,ik->jk", self.batch.weights, self.psi, self.psi)
        self.rows = np.arange(self.batch.s.size)
        self._base = {}
        r = self.batch.r
        if isinstance(data, Dataset) and cfg.n_noise and cfg.noise_sd >= 0:
            noise = replicate_noise(data.r.shape, cfg.n_noise, cfg.noise_sd, cfg.noise_seed)
            self.rewards = np.column_stack([r] + [r + e.ravel() for e in noise])
        else:
            self.rewards = r[:, None]
        # Columns whose weighted sums give gamma-free M entries and every c vector.
        n, d = self.psi.shape
        self._prod = np.concatenate([
            np.einsum("ij,ik->ijk", self.psi, self.psi_next).reshape(n, d * d),
            np.einsum("ir,ij->irj", self.rewards, self.psi).reshape(n, -1),
        ], axis=1)
        self._prod0 = np.concatenate([self._prod[:, : d * d], self._prod[:, d * d: d * d + d]], axis=1)
        self._wb = self.batch.weights

    def base(self, k: int) -> np.ndarray:
        if k not in self._base:
            self._base[k] = base_ratio(self.batch, self.nuisance, k)
        return self._base[k]

    def _pi_taken(self, policy) -> np.ndarray:
        if isinstance(policy, SoftmaxPolicy):
            logits = self.batch.features(policy.fmap)[0] @ policy.w_pi.T
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            return e[self.rows, self.batch.a] / e.sum(axis=1)
        return policy.probs(self.batch.s)[self.rows, self.batch.a]

    def moments(self, policy, all_rewards: bool = False):
        wr = self._wb * self.base(policy.k) * self._pi_taken(policy)
        d = self.psi.shape[1]
        sums = np.einsum("i,ij->j", wr, self._prod if all_rewards else self._prod0)
        M = self.cfg.gamma * sums[: d * d].reshape(d, d) - self.p0
        C = sums[d * d:].reshape(-1, d).T
        return M, C

    def _values(self, M, C) -> np.ndarray:
        if np.linalg.cond(M) < 1e10:
            return self.q @ np.linalg.solve(M, -C)
        out = np.empty(C.shape[1])
        for j in range(C.shape[1]):
            out[j] = self.q @ l1_min(M, C[:, j]).x
        return out

    def plain(self, policy) -> float:
        M, C = self.moments(policy)
        return float(self._values(M, C)[0])

    def noise_replicate(self, policy) -> float:
        if self.rewards.shape[1] < 2:
            raise ValueError("evaluator was built without noise replicates")
        M, C = self.moments(policy, all_rewards=True)
        vals = self._values(M, C[:, 1:])
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise ReplicateFailure(int(bad[0]), "non-finite fit")
        return float(vals.min())

    def objective(self, mode: str) -> Callable:
        if mode == "noise-replicate":
            return self.noise_replicate
        if mode == "none":
            return self.plain
        raise ValueError(f"evaluator does not implement mode {mode!r}")


def policy_objective(data, nu_sample, nuisance_candidates, cfg: PessimismConfig,
                     dcfg: DualConfig | None = None) -> Callable:
    """The policy-to-value map selected by ``cfg.mode`` and ``cfg.objective``."""
    cands = _candidates(nuisance_candidates)
    if cfg.mode in ("noise-replicate", "none"):
        if cfg.objective != "vf":
            raise ValueError("noise-replicate and plain modes use the VF estimator")
        evs = [PolicyEvaluator(data, nu_sample, nu, cfg) for nu in cands]
        return lambda p: min(ev.objective(cfg.mode)(p) for ev in evs)
    fn = {"vf": pessimistic_j_vf, "mis": pessimistic_j_mis}.get(cfg.objective)
    if fn is not None:
        return lambda p: fn(data, nu_sample, p, cands, cfg, dcfg)
    return lambda p: pessimistic_j_dr(data, nu_sample, p, cands, cfg)


# --------------------------------------------------------------------------- radius calibration


def calibrate_alphas(data: Dataset, nu_sample, policy, nuisance, cfg: PessimismConfig, n_boot: int = 200,
                     delta: float = 0.05, c_cfg: float = 1.0, seed: int = 0) -> tuple[float, float]:
    """Trajectory-bootstrap radii ``(alpha_vf, alpha_mis)``.

    Trajectories are resampled with replacement; for each resample the excess
    loss of the original min-max fits over the resampled minimum is computed,
    and ``c_cfg`` times its ``(1 - delta)`` quantile is returned.
    """
    batch = StepBatch.empirical(data)
    rho = base_ratio(batch, nuisance, policy.k) * policy.probs(batch.s)[np.arange(batch.s.size), batch.a]
    psi, psi_next = batch.features(cfg.fmap)
    n, t = data.s.shape
    w = (rho / t).reshape(n, t)
    ps, pn = psi.reshape(n, t, -1), psi_next.reshape(n, t, -1)
    r = data.r
    c_i = np.einsum("nt,nt,ntj->nj", w, r, ps)
    m_i = cfg.gamma * np.einsum("nt,ntj,ntk->njk", w, ps, pn) - np.einsum("ntj,ntk->njk", ps, ps) / t
    g_i = np.einsum("nt,ntk,ntj->nkj", w, ps - cfg.gamma * pn, ps)
    mom = moments_from_ratio(batch, rho, cfg.fmap, nu_sample, cfg.gamma)
    v_hat = fit_v_from_moments(mom, cfg.g_box).solution.w_v
    w_hat = fit_w_from_moments(mom, cfg.w_box).solution.w_g
    rng = np.random.default_rng([seed, 0xA1FA])
    stats_vf = np.empty(n_boot)
    stats_mis = np.empty(n_boot)
    for b in range(n_boot):
        counts = rng.multinomial(n, np.full(n, 1.0 / n)) / n
        c_b = counts @ c_i
        m_b = np.einsum("n,njk->jk", counts, m_i)
        g_b = np.einsum("n,nkj->kj", counts, g_i)
        boot = Moments(c_b, m_b, g_b, mom.q, cfg.gamma, cfg.fmap)
        stats_vf[b] = cfg.g_box * (np.abs(boot.vf_residual(v_hat)).sum() - l1_min(m_b, c_b).value)
        stats_mis[b] = np.abs(boot.mis_residual(w_hat)).sum() - l1_min(-g_b, mom.q, box=cfg.w_box).value
    q = 1 - delta
    return c_cfg * float(np.quantile(stats_vf, q)), c_cfg * float(np.quantile(stats_mis, q))


# --------------------------------------------------------------------------- zeroth-order search


@dataclass
class ZerothOrderConfig:
    n_iter: int = 200
    n_dirs: int = 8
    sigma: float = 0.1
    eta0: float = 0.5
    normalize: bool = True
    random_search: bool = False

    def __post_init__(self):
        if self.n_iter < 0 or self.n_dirs < 1:
            raise ValueError("n_iter must be >= 0 and n_dirs >= 1")
        if not (self.sigma > 0 and self.eta0 > 0):
            raise ValueError("sigma and eta0 must be positive")


def zeroth_order_search(objective: Callable, init: SoftmaxPolicy, zcfg: ZerothOrderConfig | None = None,
                        seed: int = 0, mode: str = "custom") -> LearnResult:
    """Gaussian-smoothing ascent on ``objective(policy)`` over the softmax parameters.

    Per iteration, ``n_dirs`` antithetic pairs give the gradient estimate
    ``mean_p (f(t + s u_p) - f(t - s u_p)) / (2 s) u_p``; the step is
    ``eta0 / sqrt(1 + k)`` times the estimate (its direction when
    ``normalize``).  With ``random_search`` the best probe replaces the
    iterate instead.  The best policy seen is returned.
    """
    zcfg = zcfg or ZerothOrderConfig()
    rng = np.random.default_rng([seed, 0x2E0])
    theta = np.asarray(init.w_pi, dtype=float).ravel().copy()
    trace = []
    best_f, best_theta = -np.inf, theta.copy()

    def f(th):
        val = float(objective(init.with_params(th)))
        if np.isnan(val):
            raise RuntimeError("objective returned NaN")
        return val

    for k in range(zcfg.n_iter + 1):
        try:
            f0 = f(theta)
        except Exception as exc:
            raise RuntimeError(f"objective evaluation failed at iteration {k}: {exc}") from exc
        if f0 > best_f:
            best_f, best_theta = f0, theta.copy()
        if k == zcfg.n_iter:
            trace.append(TraceRow(k, f0, 0.0, param_hash(theta), tuple(theta)))
            break
        u = rng.standard_normal((zcfg.n_dirs, theta.size))
        try:
            fp = np.array([f(theta + zcfg.sigma * d) for d in u])
            fm = np.array([f(theta - zcfg.sigma * d) for d in u])
        except Exception as exc:
            raise RuntimeError(f"objective evaluation failed at iteration {k}: {exc}") from exc
        grad = ((fp - fm) / (2 * zcfg.sigma)) @ u / zcfg.n_dirs
        gnorm = float(np.sqrt(grad @ grad))
        trace.append(TraceRow(k, f0, gnorm, param_hash(theta), tuple(theta)))
        if zcfg.random_search:
            j = int(np.argmax(np.concatenate([fp, fm])))
            cand = theta + zcfg.sigma * (u[j] if j < zcfg.n_dirs else -u[j - zcfg.n_dirs])
            if max(fp.max(), fm.max()) > f0:
                theta = cand
            continue
        eta = zcfg.eta0 / np.sqrt(1 + k)
        if zcfg.normalize:
            if gnorm > 0:
                theta = theta + eta * grad / gnorm
        else:
            theta = theta + eta * grad
    return LearnResult(init.with_params(best_theta), best_f, trace, mode, {"zeroth_order": seed})


def behavior_cloning_init(data: Dataset, fmap: FeatureMap, k: int, ridge: float = 1e-3) -> SoftmaxPolicy:
    """Softmax policy fitted to the logged actions; a start inside the data support."""
    logit = fit_logit(fmap(data.s.ravel()), data.a.ravel(), k, ridge)
    return SoftmaxPolicy(logit.weights.copy(), fmap)


def learn(data, nu_sample, nuisance_candidates, cfg: PessimismConfig, zcfg: ZerothOrderConfig | None = None,
          seed: int = 0, init: SoftmaxPolicy | None = None, dcfg: DualConfig | None = None,
          k: int | None = None) -> LearnResult:
    """Maximise the configured (pessimistic or plain) value estimate over softmax policies."""
    if init is None:
        if k is None:
            raise ValueError("need an initial policy or the action count k")
        init = SoftmaxPolicy.uniform(k, cfg.fmap)
    obj = policy_objective(data, nu_sample, nuisance_candidates, cfg, dcfg)
    res = zeroth_order_search(obj, init, zcfg, seed, mode=f"{cfg.mode}:{cfg.objective}")
    res.seeds.update(noise=cfg.noise_seed)
    return res


def baseline_no_iv(data, nu_sample, propensity, cfg: PessimismConfig, policy: SoftmaxPolicy | None = None,
                   zcfg: ZerothOrderConfig | None = None, seed: int = 0, k: int | None = None,
                   floor: float = 1e-3):
    """The same pipeline with the naive ratio ``pi(a|s) / P(a|s)``.

    ``propensity`` maps states to ``(n, K)`` action probabilities.  With a
    ``policy`` the configured value estimate is returned; otherwise a policy
    is learned.
    """
    if propensity is None:
        raise ValueError("the no-instrument baseline needs a propensity model")
    naive = propensity if isinstance(propensity, NaivePropensity) else NaivePropensity(propensity, floor)
    if policy is not None:
        return policy_objective(data, nu_sample, [naive], cfg)(policy)
    return learn(data, nu_sample, [naive], cfg, zcfg, seed, k=k)
