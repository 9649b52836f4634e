"""Estimating functionals for VF, MIS and DR policy evaluation and their min-max fits.

All functionals are written against a :class:`StepBatch`: a weighted list of
``(s, z, a, r, s')`` transitions.  The empirical batch of a dataset carries
uniform weights ``1/(NT)``; the population batch of a tabular environment
enumerates the support of the averaged one-step law with its exact
probabilities.  The ``*_hat`` functions take datasets, the ``*_pop`` functions
take tabular environments.

The step weight is ``rho = <z, a> pi(a|s) / (Delta(s,a) Theta(s,z))``, or the
naive ``pi(a|s) / P(a|s)`` when a :class:`NaivePropensity` is passed in place
of the nuisance estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoding import SimplexCode, inner, inner_array
from .env import Dataset, ReferenceLaw, TabularConfoundedMDP, TrajectoryStep, as_reference, exact_step_marginals
from .funcspace import BoxedLinearW, FeatureMap, LinearV
from .nuisance import NuisanceEstimate
from .solvers import l1_min


@dataclass
class NaivePropensity:
    """Stand-in for the nuisance pair that ignores the instrument."""

    fn: Callable[[np.ndarray], np.ndarray]
    floor: float = 1e-3

    def __call__(self, s) -> np.ndarray:
        return np.maximum(self.fn(np.atleast_1d(s)), self.floor)


# --------------------------------------------------------------------------- step batches


@dataclass
class StepBatch:
    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    weights: np.ndarray
    _feat: dict = field(default_factory=dict, repr=False)

    @classmethod
    def empirical(cls, data: Dataset) -> StepBatch:
        n = data.n_steps
        return cls(data.s.ravel(), data.z.ravel(), data.a.ravel(), data.r.ravel(), data.s_next.ravel(),
                   np.full(n, 1.0 / n))

    @classmethod
    def population(cls, env: TabularConfoundedMDP, t_len: int) -> StepBatch:
        law = exact_step_marginals(env, t_len)
        idx = np.nonzero(law > 0)
        s, z, u, a, sn = idx
        sv = env.state_values
        return cls(sv[s], z, a, env.reward[s, u, a], sv[sn], law[idx])

    def features(self, fmap: FeatureMap):
        if fmap not in self._feat:
            self._feat[fmap] = (fmap(self.s), fmap(self.s_next))
        return self._feat[fmap]

    def mean(self, x: np.ndarray) -> float:
        return float(np.einsum("i,i->", self.weights, x))

    def mean_rows(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("i,ij->j", self.weights, x)


def as_batch(source, t_len: int | None = None) -> StepBatch:
    if isinstance(source, StepBatch):
        return source
    if isinstance(source, Dataset):
        return StepBatch.empirical(source)
    if isinstance(source, TabularConfoundedMDP):
        if t_len is None:
            raise ValueError("population batch needs t_len")
        return StepBatch.population(source, t_len)
    raise TypeError(f"cannot build a step batch from {type(source).__name__}")


# --------------------------------------------------------------------------- weights


@dataclass(frozen=True)
class IvWeight:
    value: float
    inner: float
    pi: float
    delta: float
    theta: float


def iv_weight(step: TrajectoryStep, policy, nuisance: NuisanceEstimate, code: SimplexCode) -> IvWeight:
    ip = inner(code, step.z, step.a)
    pi = float(policy.probs(np.atleast_1d(step.s))[0, step.a])
    d = float(nuisance.delta(step.s)[0, step.a])
    th = float(nuisance.theta(step.s)[0, step.z])
    return IvWeight(ip * pi / (d * th), ip, pi, d, th)


def base_ratio(batch: StepBatch, nuisance, k: int) -> np.ndarray:
    """Policy-free part of the step weight (multiply by ``pi(a|s)`` to get ``rho``)."""
    rows = np.arange(batch.s.size)
    if isinstance(nuisance, NaivePropensity):
        return 1.0 / nuisance(batch.s)[rows, batch.a]
    d = nuisance.delta(batch.s)[rows, batch.a]
    th = nuisance.theta(batch.s)[rows, batch.z]
    return inner_array(k, batch.z, batch.a) / (d * th)


def step_ratio(batch: StepBatch, policy, nuisance) -> np.ndarray:
    pi = policy.probs(batch.s)[np.arange(batch.s.size), batch.a]
    return base_ratio(batch, nuisance, policy.k) * pi


# --------------------------------------------------------------------------- functionals


def phi_vf(batch: StepBatch, policy, v, g, nuisance, gamma: float) -> float:
    rho = step_ratio(batch, policy, nuisance)
    return batch.mean(g(batch.s) * (rho * (batch.r + gamma * v(batch.s_next)) - v(batch.s)))


def phi_vf_hat(data: Dataset, policy, v, g, nuisance, gamma: float) -> float:
    """Empirical ``mean g(S) (rho (R + gamma v(S')) - v(S))``."""
    return phi_vf(as_batch(data), policy, v, g, nuisance, gamma)


def phi_vf_pop(env: TabularConfoundedMDP, t_len: int, policy, v, g, nuisance, gamma: float) -> float:
    return phi_vf(StepBatch.population(env, t_len), policy, v, g, nuisance, gamma)


def phi_mis(batch: StepBatch, nu, policy, w, f, nuisance, gamma: float) -> float:
    nu = as_reference(nu)
    rho = step_ratio(batch, policy, nuisance)
    first = (1 - gamma) * nu.mean(f(nu.points))
    return first - batch.mean(rho * w(batch.s) * (f(batch.s) - gamma * f(batch.s_next)))


def phi_mis_hat(data: Dataset, nu_sample, policy, w, f, nuisance, gamma: float) -> float:
    """``(1-gamma) E_nu f - mean rho w(S) (f(S) - gamma f(S'))``."""
    return phi_mis(as_batch(data), nu_sample, policy, w, f, nuisance, gamma)


def phi_mis_pop(env: TabularConfoundedMDP, t_len: int, policy, w, f, nuisance, gamma: float) -> float:
    return phi_mis(StepBatch.population(env, t_len), env.reference(), policy, w, f, nuisance, gamma)


def l_mis(batch: StepBatch, policy, w, nuisance) -> float:
    rho = step_ratio(batch, policy, nuisance)
    return batch.mean(rho * w(batch.s) * batch.r)


def l_mis_hat(data: Dataset, policy, w, nuisance) -> float:
    return l_mis(as_batch(data), policy, w, nuisance)


def l_mis_pop(env: TabularConfoundedMDP, t_len: int, policy, w, nuisance) -> float:
    return l_mis(StepBatch.population(env, t_len), policy, w, nuisance)


def l_dr(batch: StepBatch, nu, policy, w, v, nuisance, gamma: float) -> float:
    nu = as_reference(nu)
    rho = step_ratio(batch, policy, nuisance)
    td = batch.r + gamma * v(batch.s_next) - v(batch.s)
    return batch.mean(rho * w(batch.s) * td) + (1 - gamma) * nu.mean(v(nu.points))


def l_dr_hat(data: Dataset, nu_sample, policy, w, v, nuisance, gamma: float) -> float:
    return l_dr(as_batch(data), nu_sample, policy, w, v, nuisance, gamma)


def l_dr_pop(env: TabularConfoundedMDP, t_len: int, policy, w, v, nuisance, gamma: float) -> float:
    return l_dr(StepBatch.population(env, t_len), env.reference(), policy, w, v, nuisance, gamma)


# --------------------------------------------------------------------------- moment matrices


@dataclass
class Moments:
    """Coefficient-space form of the functionals for one ``(batch, policy, nuisance)``.

    * ``phi_vf(v, g) = w_g^T (c + M w_v)``
    * ``phi_mis(w, f) = w_f^T (q - G w_w)``
    * ``l_mis(w) = c^T w_w``
    * ``l_dr(w, v) = c^T w_w + w_v^T (q - G w_w)``
    """

    c: np.ndarray
    M: np.ndarray
    G: np.ndarray
    q: np.ndarray
    gamma: float
    fmap: FeatureMap

    @property
    def nu_weight(self) -> np.ndarray:
        """Coefficients of ``(1-gamma) E_nu v``; equal to ``q``."""
        return self.q

    def vf_residual(self, w_v: np.ndarray) -> np.ndarray:
        return self.c + self.M @ w_v

    def mis_residual(self, w_w: np.ndarray) -> np.ndarray:
        return self.q - self.G @ w_w


def moments_from_ratio(batch: StepBatch, rho: np.ndarray, fmap: FeatureMap, nu, gamma: float,
                       rewards: np.ndarray | None = None) -> Moments:
    nu = as_reference(nu)
    psi, psi_next = batch.features(fmap)
    r = batch.r if rewards is None else rewards
    wr = batch.weights * rho
    c = np.einsum("i,ij->j", wr * r, psi)
    M = gamma * np.einsum("i,ij,ik->jk", wr, psi, psi_next) - np.einsum("i,ij,ik->jk", batch.weights, psi, psi)
    G = np.einsum("i,ik,ij->kj", wr, psi - gamma * psi_next, psi)
    q = (1 - gamma) * np.einsum("i,ij->j", nu.weights, fmap(nu.points))
    return Moments(c, M, G, q, gamma, fmap)


def moments(source, nu, policy, nuisance, gamma: float, fmap: FeatureMap, t_len: int | None = None) -> Moments:
    batch = as_batch(source, t_len)
    return moments_from_ratio(batch, step_ratio(batch, policy, nuisance), fmap, nu, gamma)


# --------------------------------------------------------------------------- min-max fits


@dataclass
class MinMaxFit:
    solution: LinearV | BoxedLinearW
    inner_max_value: float
    dual_certificate: np.ndarray
    iterations: int
    residual: np.ndarray
    backend: str


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0)


def inner_max_closed_form(b: np.ndarray, box_bound: float = 1.0):
    """``max_{||w||_inf <= B} w^T b = B ||b||_1`` with maximiser ``B sign(b)``, ``sign(0) = +1``."""
    b = np.asarray(b, dtype=float)
    return box_bound * float(np.abs(b).sum()), box_bound * _sign(b)


def inner_max_vf(source, policy, v: LinearV, nuisance, gamma: float, box_bound: float = 1.0,
                 t_len: int | None = None):
    """``max_{g in W} Phi_vf(v, g)`` for the box class; returns ``(value, argmax coefficients)``."""
    batch = as_batch(source, t_len)
    rho = step_ratio(batch, policy, nuisance)
    psi, _ = batch.features(v.fmap)
    b = batch.mean_rows(psi * (rho * (batch.r + gamma * v(batch.s_next)) - v(batch.s))[:, None])
    return inner_max_closed_form(b, box_bound)


@dataclass
class VCfg:
    fmap: FeatureMap = field(default_factory=FeatureMap)
    box: float = 1.0
    backend: str = "auto"


def fit_v_from_moments(mom: Moments, box: float = 1.0, backend: str = "auto") -> MinMaxFit:
    res = l1_min(mom.M, mom.c, backend=backend)
    resid = mom.vf_residual(res.x)
    value, cert = inner_max_closed_form(resid, box)
    return MinMaxFit(LinearV(res.x, mom.fmap), value, cert, res.iterations, resid, res.backend)


def fit_v_hat(data, policy, nuisance, gamma: float, vcfg: VCfg | None = None, t_len: int | None = None) -> MinMaxFit:
    """``argmin_v max_{g in W} Phi_vf(v, g)``, i.e. ``min_w ||c + M w||_1``."""
    vcfg = vcfg or VCfg()
    nu = ReferenceLaw(np.zeros(1), np.ones(1))  # unused by the VF moments
    mom = moments(data, nu, policy, nuisance, gamma, vcfg.fmap, t_len)
    return fit_v_from_moments(mom, vcfg.box, vcfg.backend)


@dataclass
class WCfg:
    fmap: FeatureMap = field(default_factory=FeatureMap)
    box: float = 1.0
    backend: str = "auto"


def fit_w_from_moments(mom: Moments, box: float = 1.0, backend: str = "auto") -> MinMaxFit:
    res = l1_min(-mom.G, mom.q, box=box, backend=backend)
    w = np.clip(res.x, -box, box)
    resid = mom.mis_residual(w)
    value, cert = inner_max_closed_form(resid, 1.0)
    return MinMaxFit(BoxedLinearW(w, box, mom.fmap), value, cert, res.iterations, resid, res.backend)


def fit_w_hat(data, nu_sample, policy, nuisance, gamma: float, wcfg: WCfg | None = None,
              t_len: int | None = None) -> MinMaxFit:
    """``argmin_{w in W} max_{||f||_inf <= 1} Phi_mis(w, f)``, i.e. ``min_w ||q - G w||_1`` over the box."""
    wcfg = wcfg or WCfg()
    mom = moments(data, nu_sample, policy, nuisance, gamma, wcfg.fmap, t_len)
    return fit_w_from_moments(mom, wcfg.box, wcfg.backend)


# --------------------------------------------------------------------------- diagnostics


def rollout_value_is(data: Dataset, policy, nuisance, s0_bucket, gamma: float):
    """Sequential IV importance sampling estimate of ``V^pi`` on a bucket of trajectories.

    ``s0_bucket`` is a boolean mask over trajectories (or a predicate on the
    initial state).  Truncation at ``T`` biases the estimate by at most
    ``gamma^T max|R| / (1 - gamma)``.  Returns ``(estimate, standard error)``.
    """
    mask = s0_bucket(data.s[:, 0]) if callable(s0_bucket) else np.asarray(s0_bucket, dtype=bool)
    if not mask.any():
        raise ValueError("empty initial-state bucket")
    sub = data.subset(mask)
    batch = StepBatch.empirical(sub)
    rho = step_ratio(batch, policy, nuisance).reshape(sub.s.shape)
    disc = gamma ** np.arange(sub.t_len)
    per_traj = (disc * sub.r * np.cumprod(rho, axis=1)).sum(axis=1)
    se = per_traj.std(ddof=1) / np.sqrt(per_traj.size) if per_traj.size > 1 else float("nan")
    return float(per_traj.mean()), float(se)
