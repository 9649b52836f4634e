"""Instrument law ``Theta(s, z)`` and compliance ``Delta(s, a)``: MLE fits, confidence sets, oracles."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoding import SimplexCode
from .env import Dataset, KidneyEnv, TabularConfoundedMDP
from .funcspace import FeatureMap


class OptimizerFailure(RuntimeError):
    pass


class CoverageError(ValueError):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass
class NuisanceConfig:
    ridge: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 200
    floor_theta: float = 1e-3
    floor_delta: float = 1e-3
    c_cfg: float = 1.0
    theta_max: float = 10.0
    delta: float = 0.05
    n_cand: int = 20


# --------------------------------------------------------------------------- multinomial logit


@dataclass
class MultinomialLogit:
    """Softmax regression ``P(y = k | x) proportional to exp(x^T weights[k])``."""

    weights: np.ndarray
    ridge: float = 1e-6
    loss: float = float("nan")
    n_iter: int = 0
    hessian: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def probs(self, x: np.ndarray) -> np.ndarray:
        return _softmax(x @ self.weights.T)

    def with_weights(self, w: np.ndarray) -> MultinomialLogit:
        return MultinomialLogit(np.asarray(w).reshape(self.weights.shape), self.ridge)


def _softmax(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def nll(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Average negative log-likelihood (no ridge term)."""
    logits = x @ weights.T
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def _objective(w, x, y, k, ridge):
    wm = w.reshape(k, -1)
    return nll(wm, x, y) + 0.5 * ridge * float(w @ w)


def _grad_hess(w, x, y, k, ridge):
    n, p = x.shape
    wm = w.reshape(k, p)
    probs = _softmax(x @ wm.T)
    resid = probs.copy()
    resid[np.arange(n), y] -= 1.0
    grad = (resid.T @ x).ravel() / n + ridge * w
    # Hessian blocks: mean_i (p_ia d_ab - p_ia p_ib) x_i x_i^T
    xx = np.einsum("ij,il->ijl", x, x)
    diag = np.einsum("ia,ijl->ajl", probs, xx)
    cross = np.einsum("ia,ib,ijl->ajbl", probs, probs, xx)
    hess = -cross
    for a in range(k):
        hess[a, :, a, :] += diag[a]
    hess = hess.reshape(k * p, k * p) / n + ridge * np.eye(k * p)
    return grad, hess


def fit_logit(x: np.ndarray, y: np.ndarray, k: int, ridge: float = 1e-6, tol: float = 1e-8,
              max_iter: int = 200, w0: np.ndarray | None = None) -> MultinomialLogit:
    """Ridge-regularised multinomial logit by damped Newton iterations.

    Stops when the gradient norm drops below ``tol`` or the Newton decrement
    reaches machine precision.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if x.shape[0] == 0:
        raise ValueError("cannot fit on empty data")
    p = x.shape[1]
    w = np.zeros(k * p) if w0 is None else np.asarray(w0, dtype=float).ravel().copy()
    f = _objective(w, x, y, k, ridge)
    for it in range(1, max_iter + 1):
        grad, hess = _grad_hess(w, x, y, k, ridge)
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            break
        step = np.linalg.solve(hess, grad)
        decrement = float(grad @ step)
        if decrement <= 1e-15 * max(1.0, abs(f)):
            break
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = _objective(w_new, x, y, k, ridge)
            if f_new <= f - 0.25 * t * decrement or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            break
        w, f = w_new, f_new
    else:
        grad, hess = _grad_hess(w, x, y, k, ridge)
        if np.linalg.norm(grad) > tol:
            raise OptimizerFailure(
                f"logit fit did not converge in {max_iter} iterations (gradient norm {np.linalg.norm(grad):.3e})")
    grad, hess = _grad_hess(w, x, y, k, ridge)
    wm = w.reshape(k, p)
    return MultinomialLogit(wm, ridge, nll(wm, x, y), it, hess)


# --------------------------------------------------------------------------- Theta and Delta models


@dataclass
class ThetaModel:
    """Fitted ``Theta(s, .)`` over features ``psi(s)``."""

    logit: MultinomialLogit
    fmap: FeatureMap

    def __call__(self, s) -> np.ndarray:
        return self.logit.probs(np.atleast_2d(self.fmap(np.atleast_1d(s))))

    def design(self, data: Dataset):
        return self.fmap(data.s.ravel()), data.z.ravel()


def action_design(fmap: FeatureMap, code: SimplexCode, s, z) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    z = np.broadcast_to(np.asarray(z, dtype=int), s.shape)
    return np.hstack([fmap(s), code.vectors[z]])


@dataclass
class ActionModel:
    """Fitted ``P(A = a | S = s, Z = z)`` over features ``(psi(s), code[z])``."""

    logit: MultinomialLogit
    fmap: FeatureMap
    code: SimplexCode

    def probs(self, s, z) -> np.ndarray:
        return self.logit.probs(action_design(self.fmap, self.code, s, z))

    def compliance(self, s) -> np.ndarray:
        """Raw ``Delta(s, a) = P(a | s, Z=a) - mean_{z != a} P(a | s, z)``, shape ``(n, K)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.code.k
        table = np.stack([self.probs(s, z) for z in range(k)], axis=1)  # [n, z, a]
        diag = np.einsum("naa->na", table)
        return diag - (table.sum(axis=1) - diag) / (k - 1)

    def design(self, data: Dataset):
        return action_design(self.fmap, self.code, data.s.ravel(), data.z.ravel()), data.a.ravel()


@dataclass
class NuisanceEstimate:
    """``Theta`` and ``Delta`` functions with floors applied on evaluation.

    ``theta_fn`` and ``delta_fn`` map an array of states to ``(n, K)`` arrays.
    """

    theta_fn: Callable[[np.ndarray], np.ndarray]
    delta_fn: Callable[[np.ndarray], np.ndarray]
    floor_theta: float = 1e-3
    floor_delta: float = 1e-3
    label: str = ""

    def theta(self, s) -> np.ndarray:
        return np.maximum(self.theta_fn(np.atleast_1d(s)), self.floor_theta)

    def delta(self, s) -> np.ndarray:
        d = self.delta_fn(np.atleast_1d(s))
        sign = np.where(d < 0, -1.0, 1.0)
        return sign * np.maximum(np.abs(d), self.floor_delta)


def fit_theta(data: Dataset, fmap: FeatureMap, cfg: NuisanceConfig | None = None, k: int | None = None) -> ThetaModel:
    """MLE of the instrument law ``Z | S`` with a multinomial logit in ``psi(s)``."""
    cfg = cfg or NuisanceConfig()
    if data.n_steps == 0:
        raise ValueError("empty dataset")
    k = k or int(data.z.max()) + 1
    x = fmap(data.s.ravel())
    logit = fit_logit(x, data.z.ravel(), k, cfg.ridge, cfg.tol, cfg.max_iter)
    return ThetaModel(logit, fmap)


def fit_action_model(data: Dataset, fmap: FeatureMap, code: SimplexCode, cfg: NuisanceConfig | None = None) -> ActionModel:
    cfg = cfg or NuisanceConfig()
    missing = set(range(code.k)) - set(np.unique(data.z).tolist())
    if missing:
        raise CoverageError(f"instrument categories {sorted(missing)} never observed")
    x = action_design(fmap, code, data.s.ravel(), data.z.ravel())
    logit = fit_logit(x, data.a.ravel(), code.k, cfg.ridge, cfg.tol, cfg.max_iter)
    return ActionModel(logit, fmap, code)


def fit_delta(data: Dataset, fmap: FeatureMap, code: SimplexCode, cfg: NuisanceConfig | None = None):
    """Fit ``A | S, Z`` and derive the compliance function.

    Returns ``(delta_fn, action_model)``.  Warns when the raw compliance falls
    below ``floor_delta`` anywhere on the observed states.
    """
    cfg = cfg or NuisanceConfig()
    model = fit_action_model(data, fmap, code, cfg)
    raw = model.compliance(data.s.ravel())
    if np.min(np.abs(raw)) < cfg.floor_delta:
        warnings.warn(f"weak instrument: |Delta| falls to {np.min(np.abs(raw)):.2e}, clamped at {cfg.floor_delta}",
                      WeakInstrumentWarning, stacklevel=2)
    return model.compliance, model


def fit_nuisance(data: Dataset, fmap: FeatureMap, code: SimplexCode, cfg: NuisanceConfig | None = None):
    """Fit both nuisances; returns ``(NuisanceEstimate, theta_model, action_model)``."""
    cfg = cfg or NuisanceConfig()
    theta_model = fit_theta(data, fmap, cfg, code.k)
    delta_fn, action_model = fit_delta(data, fmap, code, cfg)
    est = NuisanceEstimate(theta_model, delta_fn, cfg.floor_theta, cfg.floor_delta, "fitted")
    return est, theta_model, action_model


def fit_propensity(data: Dataset, fmap: FeatureMap, k: int, cfg: NuisanceConfig | None = None):
    """Naive ``P(A | S)`` model ignoring the instrument."""
    cfg = cfg or NuisanceConfig()
    logit = fit_logit(fmap(data.s.ravel()), data.a.ravel(), k, cfg.ridge, cfg.tol, cfg.max_iter)
    return lambda s: logit.probs(fmap(np.atleast_1d(s)))


# --------------------------------------------------------------------------- confidence sets


def conf_radius_theta(d: int, n: int, t_len: int, delta: float, c_cfg: float, theta_max: float) -> float:
    """Loss-gap radius ``c * d * log(theta_max / delta) * log(NT) / (NT)``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    m = n * t_len
    return c_cfg * d * np.log(theta_max / delta) * np.log(m) / m


@dataclass
class ConfidenceSet:
    base_loss: float
    radius: float
    candidates: list
    gaps: np.ndarray
    acceptance: float = float("nan")


def build_conf_set(model: MultinomialLogit, loss_fn: Callable[[np.ndarray], float], radius: float,
                   n_cand: int = 20, seed: int = 0, max_rounds: int = 60, batch: int = 32) -> ConfidenceSet:
    """Finite approximation of ``{theta : L(theta) - L(theta_hat) <= radius}``.

    Gaussian proposals around the minimiser, shaped by the inverse Hessian;
    the scale is adapted so each batch accepts between 20% and 80%.
    The minimiser is always the first candidate.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    base = loss_fn(model.weights)
    cands, gaps = [model], [0.0]
    if radius == 0 or n_cand == 0:
        return ConfidenceSet(base, radius, cands, np.array(gaps))
    rng = np.random.default_rng([seed, 0xC5])
    dim = model.weights.size
    hess = model.hessian if model.hessian is not None else np.eye(dim)
    chol = np.linalg.cholesky(hess + 1e-12 * np.eye(dim))
    scale = np.sqrt(2 * radius / dim)
    tried = accepted = 0
    rate = float("nan")
    for _ in range(max_rounds):
        xi = rng.standard_normal((batch, dim))
        steps = np.linalg.solve(chol.T, xi.T).T * scale
        ok = 0
        for st in steps:
            w = model.weights.ravel() + st
            gap = loss_fn(w.reshape(model.weights.shape)) - base
            if gap <= radius:
                ok += 1
                if len(cands) <= n_cand:
                    cands.append(model.with_weights(w))
                    gaps.append(gap)
        tried += batch
        accepted += ok
        rate = ok / batch
        if len(cands) > n_cand:
            break
        if rate < 0.2:
            scale *= 0.5
        elif rate > 0.8:
            scale *= 2.0
    if len(cands) == 1:
        warnings.warn("confidence set degenerated to the minimiser", RuntimeWarning, stacklevel=2)
    return ConfidenceSet(base, radius, cands, np.array(gaps), accepted / max(tried, 1))


def bootstrap_radius(model: MultinomialLogit, x: np.ndarray, n_boot: int = 50, delta: float = 0.05,
                     seed: int = 0, ridge: float | None = None) -> float:
    """Parametric-bootstrap loss-gap radius.

    Labels are resimulated from ``model`` at the observed design ``x``; the
    ``(1 - delta)`` quantile of ``L*(fitted) - L*(refit)`` is returned.
    """
    rng = np.random.default_rng([seed, 0xB0])
    probs = model.probs(x)
    cdf = np.cumsum(probs, axis=1)
    ridge = model.ridge if ridge is None else ridge
    gaps = np.empty(n_boot)
    for b in range(n_boot):
        y = np.minimum((rng.random(len(x))[:, None] >= cdf).sum(axis=1), model.k - 1)
        refit = fit_logit(x, y, model.k, ridge, w0=model.weights)
        gaps[b] = nll(model.weights, x, y) - refit.loss
    return float(np.quantile(gaps, 1 - delta))


def calibrate_c(model: MultinomialLogit, x: np.ndarray, n: int, t_len: int, cfg: NuisanceConfig,
                n_boot: int = 50, seed: int = 0) -> float:
    """Multiplier ``c_cfg`` that makes the closed-form radius equal the bootstrap radius."""
    unit = conf_radius_theta(model.weights.size, n, t_len, cfg.delta, 1.0, cfg.theta_max)
    return bootstrap_radius(model, x, n_boot, cfg.delta, seed) / unit


def nuisance_candidates(data: Dataset, fmap: FeatureMap, code: SimplexCode, cfg: NuisanceConfig | None = None,
                        seed: int = 0, calibrate: bool = False) -> tuple[list[NuisanceEstimate], dict]:
    """Fitted nuisance plus perturbed members of both loss-based confidence sets.

    Candidates from the two sets are paired index-wise, so the list has
    ``1 + n_cand`` entries at most.  Returns ``(candidates, metadata)``.
    """
    cfg = cfg or NuisanceConfig()
    est, theta_model, action_model = fit_nuisance(data, fmap, code, cfg)
    xt, zt = theta_model.design(data)
    xa, aa = action_model.design(data)
    c_theta = c_act = cfg.c_cfg
    if calibrate:
        c_theta = calibrate_c(theta_model.logit, xt, data.n, data.t_len, cfg, seed=seed)
        c_act = calibrate_c(action_model.logit, xa, data.n, data.t_len, cfg, seed=seed + 1)
    r1 = conf_radius_theta(theta_model.logit.weights.size, data.n, data.t_len, cfg.delta, c_theta, cfg.theta_max)
    r0 = conf_radius_theta(action_model.logit.weights.size, data.n, data.t_len, cfg.delta, c_act, cfg.theta_max)
    set1 = build_conf_set(theta_model.logit, lambda w: nll(w, xt, zt), r1, cfg.n_cand, seed)
    set0 = build_conf_set(action_model.logit, lambda w: nll(w, xa, aa), r0, cfg.n_cand, seed + 1)
    out = [est]
    for i in range(1, min(len(set0.candidates), len(set1.candidates))):
        tm = ThetaModel(set1.candidates[i], fmap)
        am = ActionModel(set0.candidates[i], fmap, code)
        out.append(NuisanceEstimate(tm, am.compliance, cfg.floor_theta, cfg.floor_delta, f"conf[{i}]"))
    meta = {
        "theta_weights": theta_model.logit.weights.tolist(),
        "action_weights": action_model.logit.weights.tolist(),
        "radius_theta": r1, "radius_delta": r0, "c_theta": c_theta, "c_delta": c_act,
        "floor_theta": cfg.floor_theta, "floor_delta": cfg.floor_delta, "n_candidates": len(out),
    }
    return out, meta


# --------------------------------------------------------------------------- oracles


def oracle_nuisance(env, floor_theta: float = 1e-3, floor_delta: float = 1e-3) -> NuisanceEstimate:
    """Exact ``Theta*`` and ``Delta*`` read off the environment tables."""
    if isinstance(env, TabularConfoundedMDP):
        theta, delta = env.theta, env.compliance()
        return NuisanceEstimate(lambda s: theta[env.index_of(s)], lambda s: delta[env.index_of(s)],
                                floor_theta, floor_delta, "oracle")
    if isinstance(env, KidneyEnv):
        branch = env.compliance_by_branch()
        if np.max(np.abs(branch - branch[0])) > 1e-12:
            raise ValueError("kidney behaviour tables violate independent compliance")
        row = branch[0]
        return NuisanceEstimate(env.theta_probs, lambda s: np.broadcast_to(row, (np.size(s), env.k)),
                                floor_theta, floor_delta, "oracle")
    raise TypeError(f"unsupported environment {type(env).__name__}")


def oracle_propensity(env) -> Callable[[np.ndarray], np.ndarray]:
    """``P(A = a | S = s)`` marginalised over confounder and instrument."""
    if isinstance(env, TabularConfoundedMDP):
        table = env.propensity()
        return lambda s: table[env.index_of(s)]
    if isinstance(env, KidneyEnv):
        return env.propensity
    raise TypeError(f"unsupported environment {type(env).__name__}")


def squared_hellinger(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``1/2 sum (sqrt p - sqrt q)^2``."""
    return 0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2, axis=-1)

