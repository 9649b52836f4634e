"""Confounded MDP environments, offline data generation and exact oracles.

Two environments are provided:

* :class:`TabularConfoundedMDP` -- finite observed states and confounders with
  exact oracles for ``V^pi``, ``w^pi``, ``J(pi)`` and the averaged one-step law
  of the behaviour data.
* :class:`KidneyEnv` -- the continuous-state kidney transplantation simulator,
  whose oracles are Monte Carlo.

Observed states are always stored as real numbers.  A tabular environment
emits ``state_values[idx]`` and maps back with :meth:`TabularConfoundedMDP.index_of`.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

BLOCK_SIZE = 1024
STOCHASTIC_TOL = 1e-12
COMPLIANCE_TOL = 1e-10


class EnvError(ValueError):
    """Invalid environment tables."""


class CoverageViolation(ValueError):
    def __init__(self, state, message=None):
        self.state = state
        super().__init__(message or f"behaviour data never visits state {state!r} reachable under the target policy")


class SizeLimitError(ValueError):
    pass


class Policy(Protocol):
    k: int

    def probs(self, s: np.ndarray) -> np.ndarray: ...


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class TrajectoryStep:
    s: float
    z: int
    a: int
    r: float
    s_next: float
    u_diag: float | None = None


@dataclass
class Dataset:
    """``N`` trajectories of ``T`` steps, stored as ``(N, T)`` arrays."""

    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    seed: int | None = None
    u: np.ndarray | None = None

    def __post_init__(self):
        shape = self.s.shape
        if len(shape) != 2 or shape[1] < 1:
            raise ValueError(f"trajectory arrays must be (N, T) with T >= 1, got {shape}")
        for name in ("z", "a", "r", "s_next"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.u is not None and self.u.shape != shape:
            raise ValueError("u has mismatched shape")

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @property
    def t_len(self) -> int:
        return self.s.shape[1]

    @property
    def n_steps(self) -> int:
        return self.s.size

    def blinded(self) -> Dataset:
        return replace(self, u=None)

    def trajectory(self, i: int) -> list[TrajectoryStep]:
        u = self.u[i] if self.u is not None else [None] * self.t_len
        return [
            TrajectoryStep(float(self.s[i, t]), int(self.z[i, t]), int(self.a[i, t]), float(self.r[i, t]),
                           float(self.s_next[i, t]), None if u[t] is None else float(u[t]))
            for t in range(self.t_len)
        ]

    def subset(self, idx) -> Dataset:
        return Dataset(self.s[idx], self.z[idx], self.a[idx], self.r[idx], self.s_next[idx], self.seed,
                       None if self.u is None else self.u[idx])

    def with_rewards(self, r: np.ndarray) -> Dataset:
        return replace(self, r=np.asarray(r, dtype=float).reshape(self.s.shape))

    def to_csv(self, path) -> None:
        """Write ``traj,t,s,z,a,r,s_next[,u]`` rows, traj-major, 17 significant digits."""
        has_u = self.u is not None
        header = ["traj", "t", "s", "z", "a", "r", "s_next"] + (["u"] if has_u else [])
        fmt = "{:.17g}".format
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n):
                for t in range(self.t_len):
                    row = [i, t, fmt(self.s[i, t]), int(self.z[i, t]), int(self.a[i, t]),
                           fmt(self.r[i, t]), fmt(self.s_next[i, t])]
                    if has_u:
                        row.append(fmt(self.u[i, t]))
                    w.writerow(row)

    @classmethod
    def from_csv(cls, path, seed: int | None = None) -> Dataset:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        expected = ["traj", "t", "s", "z", "a", "r", "s_next"]
        if header[:7] != expected or len(header) not in (7, 8) or (len(header) == 8 and header[7] != "u"):
            raise ValueError(f"unexpected dataset header {header}")
        arr = np.array(rows, dtype=float)
        n = int(arr[:, 0].max()) + 1
        t_len = int(arr[:, 1].max()) + 1
        if arr.shape[0] != n * t_len:
            raise ValueError("ragged trajectories in dataset CSV")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]

        def col(j, dtype=float):
            return arr[:, j].reshape(n, t_len).astype(dtype)

        return cls(col(2), col(3, int), col(4, int), col(5), col(6), seed, col(7) if arr.shape[1] == 8 else None)


@dataclass(frozen=True)
class ReferenceLaw:
    """Reference initial-state law ``nu`` as weighted support points."""

    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_sample(cls, sample) -> ReferenceLaw:
        sample = np.asarray(sample, dtype=float).ravel()
        if sample.size == 0:
            raise ValueError("reference sample is empty")
        return cls(sample, np.full(sample.size, 1.0 / sample.size))

    def mean(self, values: np.ndarray) -> float:
        return float(self.weights @ values)


def as_reference(nu) -> ReferenceLaw:
    if isinstance(nu, ReferenceLaw):
        return nu
    return ReferenceLaw.from_sample(nu)


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one category per row of a row-stochastic matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def _block_rngs(seed: int, n: int):
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        yield start, min(start + BLOCK_SIZE, n), np.random.default_rng([seed, b])


def _check_stochastic(name: str, arr: np.ndarray) -> None:
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise EnvError(f"{name} has negative or non-finite entries")
    if np.max(np.abs(arr.sum(axis=-1) - 1.0)) > STOCHASTIC_TOL:
        raise EnvError(f"{name} rows do not sum to one")


# --------------------------------------------------------------------------- tabular


@dataclass
class TabularConfoundedMDP:
    """Finite confounded MDP with reward ``r(s, u, a)``.

    Tensor layouts: ``p_u[s, u]``, ``theta[s, z]``, ``behavior[s, u, z, a]``,
    ``trans[s, u, a, s']``, ``reward[s, u, a]``.
    ``u_stickiness > 0`` makes the confounder persist across steps, which
    breaks memorylessness; such instances are negative controls only and the
    exact oracles refuse them.
    """

    p_u: np.ndarray
    theta: np.ndarray
    behavior: np.ndarray
    trans: np.ndarray
    reward: np.ndarray
    zeta: np.ndarray
    nu: np.ndarray
    gamma: float
    state_values: np.ndarray | None = None
    theta_floor: float = 1e-3
    u_stickiness: float = 0.0

    def __post_init__(self):
        for name in ("p_u", "theta", "behavior", "trans", "reward", "zeta", "nu"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n_s, n_u = self.p_u.shape
        k = self.theta.shape[1]
        if k < 2:
            raise EnvError("need at least two actions/instruments")
        shapes = {
            "theta": (n_s, k), "behavior": (n_s, n_u, k, k), "trans": (n_s, n_u, k, n_s),
            "reward": (n_s, n_u, k), "zeta": (n_s,), "nu": (n_s,),
        }
        for name, shp in shapes.items():
            if getattr(self, name).shape != shp:
                raise EnvError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        for name in ("p_u", "theta", "behavior", "trans", "zeta", "nu"):
            _check_stochastic(name, getattr(self, name))
        if not 0.0 < self.gamma < 1.0:
            raise EnvError("gamma must lie in (0, 1)")
        if np.min(self.theta) < self.theta_floor:
            raise EnvError(f"instrument law falls below the floor {self.theta_floor}")
        if self.state_values is None:
            self.state_values = np.arange(n_s, dtype=float)
        self.state_values = np.asarray(self.state_values, dtype=float)
        if self.state_values.shape != (n_s,) or np.any(np.diff(self.state_values) <= 0):
            raise EnvError("state_values must be strictly increasing with one entry per state")
        if not 0.0 <= self.u_stickiness < 1.0:
            raise EnvError("u_stickiness must lie in [0, 1)")
        deltas = self.compliance_by_u()
        if np.max(np.abs(deltas - deltas[:, :1, :])) > COMPLIANCE_TOL:
            raise EnvError("behaviour policy violates independent compliance")

    @property
    def n_s(self) -> int:
        return self.p_u.shape[0]

    @property
    def n_u(self) -> int:
        return self.p_u.shape[1]

    @property
    def k(self) -> int:
        return self.theta.shape[1]

    def index_of(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.searchsorted(self.state_values, s)
        idx = np.clip(idx, 0, self.n_s - 1)
        if np.any(self.state_values[idx] != s):
            raise ValueError("value is not a state of this environment")
        return idx

    def compliance_by_u(self) -> np.ndarray:
        """``Delta(s, u, a)`` from the u-conditional behaviour tables."""
        k = self.k
        b_diag = np.einsum("suaa->sua", self.behavior)
        b_tot = self.behavior.sum(axis=2)
        return b_diag - (b_tot - b_diag) / (k - 1)

    def compliance(self) -> np.ndarray:
        """``Delta*(s, a)``."""
        return self.compliance_by_u()[:, 0, :]

    def propensity(self) -> np.ndarray:
        """``P(A=a | S=s)`` under the behaviour policy."""
        return np.einsum("su,sz,suza->sa", self.p_u, self.theta, self.behavior)

    def behavior_kernel(self) -> np.ndarray:
        return np.einsum("su,sz,suza,suat->st", self.p_u, self.theta, self.behavior, self.trans)

    def marginal_reward(self) -> np.ndarray:
        return np.einsum("su,sua->sa", self.p_u, self.reward)

    def marginal_trans(self) -> np.ndarray:
        return np.einsum("su,suat->sat", self.p_u, self.trans)

    def policy_table(self, policy) -> np.ndarray:
        if isinstance(policy, np.ndarray):
            table = np.asarray(policy, dtype=float)
        else:
            table = policy.probs(self.state_values)
        if table.shape != (self.n_s, self.k):
            raise ValueError(f"policy table has shape {table.shape}")
        return table

    def reference(self) -> ReferenceLaw:
        return ReferenceLaw(self.state_values.copy(), self.nu.copy())

    def _require_memoryless(self):
        if self.u_stickiness:
            raise EnvError("exact oracles require a memoryless confounder")

    def to_dict(self) -> dict:
        keys = ("p_u", "theta", "behavior", "trans", "reward", "zeta", "nu", "state_values")
        out = {k: getattr(self, k).tolist() for k in keys}
        out.update(gamma=self.gamma, theta_floor=self.theta_floor, u_stickiness=self.u_stickiness)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TabularConfoundedMDP:
        return cls(**d)


def make_tabular(n_s: int = 5, n_u: int = 2, k: int = 3, seed: int = 0, gamma: float = 0.9,
                 compliance: float = 0.6, theta_min: float = 0.1, u_stickiness: float = 0.0,
                 state_values=None, confounded: bool = True) -> TabularConfoundedMDP:
    """Random tabular confounded MDP satisfying the IV assumptions.

    The behaviour policy follows the instrument with probability
    ``compliance`` and otherwise draws from a u-dependent law, which gives
    ``Delta*(s, a) = compliance`` for every ``(s, u, a)``.
    With ``confounded=False`` the reward and transition ignore ``u``.
    """
    rng = np.random.default_rng(seed)
    p_u = rng.dirichlet(np.ones(n_u) * 2.0, size=n_s)
    raw = rng.dirichlet(np.ones(k) * 2.0, size=n_s)
    theta = theta_min + (1 - k * theta_min) * raw
    q = rng.dirichlet(np.ones(k), size=(n_s, n_u))
    behavior = (1 - compliance) * q[:, :, None, :] + compliance * np.eye(k)[None, None, :, :]
    trans = rng.dirichlet(np.ones(n_s), size=(n_s, n_u, k))
    reward = rng.uniform(-1, 1, size=(n_s, n_u, k))
    if not confounded:
        trans = np.broadcast_to(trans[:, :1], trans.shape).copy()
        reward = np.broadcast_to(reward[:, :1], reward.shape).copy()
    zeta = rng.dirichlet(np.ones(n_s) * 3.0)
    nu = rng.dirichlet(np.ones(n_s) * 3.0)
    if state_values is None:
        state_values = np.linspace(-1.0, 1.0, n_s)
    return TabularConfoundedMDP(p_u, theta, behavior, trans, reward, zeta, nu, gamma,
                                state_values=state_values, u_stickiness=u_stickiness)


def _generate_tabular(env: TabularConfoundedMDP, n: int, t_len: int, seed: int):
    shape = (n, t_len)
    s_idx = np.empty(shape, dtype=int)
    z = np.empty(shape, dtype=int)
    a = np.empty(shape, dtype=int)
    u = np.empty(shape, dtype=int)
    sn_idx = np.empty(shape, dtype=int)
    for lo, hi, rng in _block_rngs(seed, n):
        m = hi - lo
        cur = _sample_rows(rng, np.broadcast_to(env.zeta, (m, env.n_s)))
        prev_u = None
        for t in range(t_len):
            uu = _sample_rows(rng, env.p_u[cur])
            if env.u_stickiness and prev_u is not None:
                keep = rng.random(m) < env.u_stickiness
                uu = np.where(keep, prev_u, uu)
            zz = _sample_rows(rng, env.theta[cur])
            aa = _sample_rows(rng, env.behavior[cur, uu, zz])
            nxt = _sample_rows(rng, env.trans[cur, uu, aa])
            s_idx[lo:hi, t], u[lo:hi, t], z[lo:hi, t], a[lo:hi, t], sn_idx[lo:hi, t] = cur, uu, zz, aa, nxt
            cur, prev_u = nxt, uu
    r = env.reward[s_idx, u, a]
    sv = env.state_values
    return sv[s_idx], z, a, r, sv[sn_idx], u.astype(float)


# --------------------------------------------------------------------------- kidney


@dataclass
class KidneyEnv:
    """Kidney transplantation simulator.

    State ``S`` is a creatinine level, ``Z`` the assigned dosage tier, ``A`` the
    effective tier and ``U`` an unobserved quality-of-care confounder::

        R = -S^2 + (U - 2)(A - 1)
        S' = S + 0.5 (A - 1) + 3 * 1{S > 0} (U - 2)
    """

    gamma: float = 0.9
    u_mean: float = 2.0
    u_sd: float = 0.1
    s0_mean: float = 5.0
    s0_sd: float = 0.1
    iv_table: np.ndarray = field(default_factory=lambda: np.array([
        [0.1, 0.1, 0.8],   # s < -0.3
        [0.8, 0.1, 0.1],   # s > 0.3
        [0.1, 0.8, 0.1],   # otherwise
    ]))
    behavior_table: np.ndarray = field(default_factory=lambda: np.array([
        [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],          # u > 2, rows z
        [[0.78, 0.11, 0.11], [0.05, 0.78, 0.17], [0.11, 0.05, 0.84]],  # u <= 2
    ]))
    nu_size: int = 10_000
    nu_seed: int = 0
    k: int = 3

    def __post_init__(self):
        self.iv_table = np.asarray(self.iv_table, dtype=float)
        self.behavior_table = np.asarray(self.behavior_table, dtype=float)
        if self.iv_table.shape != (3, 3) or self.behavior_table.shape != (2, 3, 3):
            raise EnvError("kidney tables have the wrong shape")
        _check_stochastic("iv_table", self.iv_table)
        _check_stochastic("behavior_table", self.behavior_table)
        if not 0.0 < self.gamma < 1.0:
            raise EnvError("gamma must lie in (0, 1)")
        if self.u_sd < 0 or self.s0_sd < 0:
            raise EnvError("standard deviations must be non-negative")

    @staticmethod
    def region(s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.where(s < -0.3, 0, np.where(s > 0.3, 1, 2))

    def theta_probs(self, s) -> np.ndarray:
        return self.iv_table[self.region(s)]

    def u_branch_probs(self) -> np.ndarray:
        """``(P(U > mean), P(U <= mean))``; the confounder is symmetric about its mean."""
        return np.array([0.5, 0.5]) if self.u_sd > 0 else np.array([0.0, 1.0])

    def compliance_by_branch(self) -> np.ndarray:
        b = self.behavior_table
        diag = np.einsum("baa->ba", b)
        tot = b.sum(axis=1)
        return diag - (tot - diag) / (self.k - 1)

    def propensity(self, s) -> np.ndarray:
        """``P(A=a | S=s)`` after marginalising the confounder and instrument."""
        p_ua = np.einsum("b,bza->za", self.u_branch_probs(), self.behavior_table)
        return self.theta_probs(s) @ p_ua

    def step(self, s, u, a):
        r = -s**2 + (u - 2.0) * (a - 1)
        s_next = s + 0.5 * (a - 1) + 3.0 * (s > 0) * (u - 2.0)
        return r, s_next

    def behavior_probs(self, u, z) -> np.ndarray:
        branch = np.where(u > self.u_mean, 0, 1)
        return self.behavior_table[branch, z]

    def sample_s0(self, rng, m) -> np.ndarray:
        return rng.normal(self.s0_mean, self.s0_sd, size=m)

    def nu_sample(self) -> np.ndarray:
        rng = np.random.default_rng([self.nu_seed, 0x5E])
        return self.sample_s0(rng, self.nu_size)

    def reference(self) -> ReferenceLaw:
        return ReferenceLaw.from_sample(self.nu_sample())


def _generate_kidney(env: KidneyEnv, n: int, t_len: int, seed: int):
    shape = (n, t_len)
    out = {k: np.empty(shape) for k in ("s", "u", "r", "s_next")}
    z = np.empty(shape, dtype=int)
    a = np.empty(shape, dtype=int)
    for lo, hi, rng in _block_rngs(seed, n):
        m = hi - lo
        cur = env.sample_s0(rng, m)
        for t in range(t_len):
            uu = rng.normal(env.u_mean, env.u_sd, size=m)
            zz = _sample_rows(rng, env.theta_probs(cur))
            aa = _sample_rows(rng, env.behavior_probs(uu, zz))
            rr, nxt = env.step(cur, uu, aa)
            out["s"][lo:hi, t], out["u"][lo:hi, t], out["r"][lo:hi, t], out["s_next"][lo:hi, t] = cur, uu, rr, nxt
            z[lo:hi, t], a[lo:hi, t] = zz, aa
            cur = nxt
    return out["s"], z, a, out["r"], out["s_next"], out["u"]


def generate(env, n: int, t_len: int, seed: int, blinded: bool = True) -> Dataset:
    """Simulate ``n`` behaviour trajectories of length ``t_len``.

    Per step the draw order is U, Z, A, S'.  Trajectories are produced in
    blocks of 1024, each block with its own generator derived from
    ``(seed, block)``, so the output does not depend on how work is split.
    """
    if n < 1 or t_len < 1:
        raise ValueError("n and t_len must be positive")
    if isinstance(env, TabularConfoundedMDP):
        s, z, a, r, sn, u = _generate_tabular(env, n, t_len, seed)
    elif isinstance(env, KidneyEnv):
        s, z, a, r, sn, u = _generate_kidney(env, n, t_len, seed)
    else:
        raise TypeError(f"unsupported environment {type(env).__name__}")
    return Dataset(s, z, a, r, sn, seed, None if blinded else u)


# --------------------------------------------------------------------------- exact oracles


def exact_value(env: TabularConfoundedMDP, policy) -> np.ndarray:
    """Solve ``V = r_pi + gamma P_pi V`` on the confounder-marginalised MDP."""
    env._require_memoryless()
    pi = env.policy_table(policy)
    r_pi = np.einsum("sa,sa->s", pi, env.marginal_reward())
    p_pi = np.einsum("sa,sat->st", pi, env.marginal_trans())
    lhs = np.eye(env.n_s) - env.gamma * p_pi
    try:
        v = np.linalg.solve(lhs, r_pi)
    except np.linalg.LinAlgError as exc:
        raise EnvError("Bellman system is singular") from exc
    if np.max(np.abs(lhs @ v - r_pi)) > 1e-10:
        raise EnvError("Bellman solve residual too large")
    return v


def behavior_value(env: TabularConfoundedMDP) -> np.ndarray:
    """Value of the logging policy, which acts on ``(s, u, z)``."""
    env._require_memoryless()
    r_b = np.einsum("su,sz,suza,sua->s", env.p_u, env.theta, env.behavior, env.reward)
    return np.linalg.solve(np.eye(env.n_s) - env.gamma * env.behavior_kernel(), r_b)


def behavior_visitation(env: TabularConfoundedMDP, t_len: int) -> np.ndarray:
    """``d^b = (1/T) sum_{t<T} p_t^b`` started from ``zeta``."""
    kernel = env.behavior_kernel()
    p = env.zeta.copy()
    acc = np.zeros(env.n_s)
    for _ in range(t_len):
        acc += p
        p = p @ kernel
    return acc / t_len


def policy_visitation(env: TabularConfoundedMDP, policy) -> np.ndarray:
    """Discounted visitation ``d^pi = (1-gamma) sum_t gamma^t p_t^pi`` from ``nu``."""
    pi = env.policy_table(policy)
    p_pi = np.einsum("sa,sat->st", pi, env.marginal_trans())
    d = np.linalg.solve((np.eye(env.n_s) - env.gamma * p_pi).T, env.nu)
    return (1 - env.gamma) * d


def exact_ratio(env: TabularConfoundedMDP, policy, t_len: int) -> np.ndarray:
    """``w^pi(s) = d^pi(s) / d^b(s)`` over the states of ``env``."""
    env._require_memoryless()
    d_pi = policy_visitation(env, policy)
    d_b = behavior_visitation(env, t_len)
    w = np.zeros(env.n_s)
    for s in range(env.n_s):
        if d_b[s] > 0:
            w[s] = d_pi[s] / d_b[s]
        elif d_pi[s] > 1e-15:
            raise CoverageViolation(s)
    return w


def exact_step_marginals(env: TabularConfoundedMDP, t_len: int) -> np.ndarray:
    """Averaged law of ``(S_t, Z_t, U_t, A_t, S_{t+1})`` over ``t < T``, indexed ``[s, z, u, a, s']``."""
    env._require_memoryless()
    d_b = behavior_visitation(env, t_len)
    return np.einsum("s,sz,su,suza,suat->szuat", d_b, env.theta, env.p_u, env.behavior, env.trans)


def true_j(env, policy, *, n_rollouts: int = 20_000, seed: int = 0, rel_tail: float = 0.01,
           max_horizon: int = 2000):
    """Policy value ``J(pi)``.

    Tabular environments return ``(J, 0.0)`` exactly.  For the kidney
    environment ``J`` is the mean of ``(1-gamma) sum_{t<H} gamma^t R_t`` over
    rollouts started from the reference sample, with ``H`` the first horizon
    such that ``gamma^H / (1-gamma) < rel_tail * |J|``; returns ``(J, se)``.
    Pass ``policy="behavior"`` to evaluate the logging policy.
    """
    if isinstance(env, TabularConfoundedMDP):
        v = behavior_value(env) if isinstance(policy, str) and policy == "behavior" else exact_value(env, policy)
        return float((1 - env.gamma) * env.nu @ v), 0.0
    if not isinstance(env, KidneyEnv):
        raise TypeError(f"unsupported environment {type(env).__name__}")
    g = env.gamma
    horizon = 100
    while True:
        j, se = _kidney_rollouts(env, policy, n_rollouts, horizon, seed)
        if g**horizon / (1 - g) < rel_tail * abs(j) or horizon >= max_horizon:
            return j, se
        needed = math.log(max(rel_tail * abs(j), 1e-300) * (1 - g)) / math.log(g)
        horizon = min(max_horizon, max(2 * horizon, int(math.ceil(needed)) + 1))


def _kidney_rollouts(env: KidneyEnv, policy, m: int, horizon: int, seed: int):
    g = env.gamma
    returns = np.empty(m)
    nu = env.nu_sample()
    for lo, hi, rng in _block_rngs(seed, m):
        size = hi - lo
        s = nu[rng.integers(0, nu.size, size=size)]
        total = np.zeros(size)
        disc = 1.0
        for _ in range(horizon):
            u = rng.normal(env.u_mean, env.u_sd, size=size)
            if isinstance(policy, str) and policy == "behavior":
                z = _sample_rows(rng, env.theta_probs(s))
                a = _sample_rows(rng, env.behavior_probs(u, z))
            else:
                a = _sample_rows(rng, policy.probs(s))
            r, s = env.step(s, u, a)
            total += disc * r
            disc *= g
        returns[lo:hi] = (1 - g) * total
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(m))


def best_in_class(env: TabularConfoundedMDP, max_states: int = 12, max_actions: int = 4):
    """Exhaustive search over deterministic observed-state policies.

    Returns ``(table, J*)``; ties go to the lexicographically smallest action
    assignment.
    """
    if env.n_s > max_states or env.k > max_actions:
        raise SizeLimitError(f"exhaustive search limited to {max_states} states and {max_actions} actions")
    eye = np.eye(env.k)
    best, best_j = None, -np.inf
    for choice in itertools.product(range(env.k), repeat=env.n_s):
        table = eye[list(choice)]
        j, _ = true_j(env, table)
        if j > best_j + 1e-12:
            best, best_j = table, j
    return best, best_j


def suboptimality(env: TabularConfoundedMDP, policy) -> float:
    _, j_star = best_in_class(env)
    return j_star - true_j(env, policy)[0]
