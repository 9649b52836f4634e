"""Polynomial features and the linear value, weight and softmax policy classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FeatureMap:
    """``psi(s) = (1, s~, s~^2, ..., s~^degree)`` with ``s~ = (s - mean) / sd``."""

    degree: int = 4
    standardize: tuple[float, float] | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.standardize is not None and not self.standardize[1] > 0:
            raise ValueError("standardisation sd must be positive")

    @property
    def dim(self) -> int:
        return self.degree + 1

    @classmethod
    def fitted(cls, states, degree: int = 4) -> FeatureMap:
        """Feature map standardised by the mean and sd of ``states``."""
        states = np.asarray(states, dtype=float)
        sd = float(states.std())
        return cls(degree, (float(states.mean()), sd if sd > 0 else 1.0))

    @classmethod
    def range_scaled(cls, states, degree: int = 4) -> FeatureMap:
        """Feature map sending the observed range of ``states`` onto ``[-1, 1]``."""
        states = np.asarray(states, dtype=float)
        lo, hi = float(states.min()), float(states.max())
        half = (hi - lo) / 2
        return cls(degree, ((hi + lo) / 2, half if half > 0 else 1.0))

    def __call__(self, s) -> np.ndarray:
        return eval_feature(self, s)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "standardize": list(self.standardize) if self.standardize else None}


def eval_feature(fmap: FeatureMap, s) -> np.ndarray:
    """Features of a scalar (shape ``(d,)``) or an array of states (shape ``(..., d)``)."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("states must be finite")
    if fmap.standardize is not None:
        mean, sd = fmap.standardize
        s = (s - mean) / sd
    out = np.empty(s.shape + (fmap.dim,))
    out[..., 0] = 1.0
    for j in range(1, fmap.dim):
        out[..., j] = out[..., j - 1] * s
    return out


@dataclass(frozen=True)
class LinearV:
    """``v(s) = psi(s)^T w_v``."""

    w_v: np.ndarray
    fmap: FeatureMap = field(default_factory=FeatureMap)

    def __post_init__(self):
        if not np.all(np.isfinite(self.w_v)):
            raise ValueError("coefficients must be finite")

    def __call__(self, s) -> np.ndarray:
        return self.fmap(s) @ self.w_v


@dataclass(frozen=True)
class BoxedLinearW:
    """``w(s) = psi(s)^T w_g`` with ``||w_g||_inf <= box``.

    The class is symmetric: ``-w`` belongs to it whenever ``w`` does.
    """

    w_g: np.ndarray
    box: float = 1.0
    fmap: FeatureMap = field(default_factory=FeatureMap)

    def __post_init__(self):
        if self.box <= 0:
            raise ValueError("box bound must be positive")
        if np.max(np.abs(self.w_g), initial=0.0) > self.box * (1 + 1e-12):
            raise ValueError("coefficients violate the box bound")

    def __call__(self, s) -> np.ndarray:
        return self.fmap(s) @ self.w_g

    def __neg__(self) -> BoxedLinearW:
        return BoxedLinearW(-self.w_g, self.box, self.fmap)


def project_box(w: np.ndarray, box: float) -> np.ndarray:
    return np.clip(w, -box, box)


@dataclass(frozen=True)
class SoftmaxPolicy:
    """``pi(a | s) proportional to exp(psi(s)^T w_pi[a])``; ``w_pi`` has shape ``(K, d)``."""

    w_pi: np.ndarray
    fmap: FeatureMap = field(default_factory=FeatureMap)

    @property
    def k(self) -> int:
        return self.w_pi.shape[0]

    @classmethod
    def uniform(cls, k: int, fmap: FeatureMap) -> SoftmaxPolicy:
        return cls(np.zeros((k, fmap.dim)), fmap)

    def probs(self, s) -> np.ndarray:
        return policy_probs(self, s)

    def with_params(self, flat: np.ndarray) -> SoftmaxPolicy:
        return SoftmaxPolicy(np.asarray(flat, dtype=float).reshape(self.w_pi.shape), self.fmap)


def policy_probs(p: SoftmaxPolicy, s) -> np.ndarray:
    logits = p.fmap(s) @ p.w_pi.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TabularPolicy:
    """Lookup-table policy over the states of a tabular environment."""

    table: np.ndarray
    state_values: np.ndarray

    @property
    def k(self) -> int:
        return self.table.shape[1]

    def probs(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.searchsorted(self.state_values, s)
        idx = np.clip(idx, 0, len(self.state_values) - 1)
        if np.any(self.state_values[idx] != s):
            raise ValueError("state not in the policy table")
        return self.table[idx]


@dataclass(frozen=True)
class PropensityPolicy:
    """Wraps a function ``s -> (n, K)`` action probabilities."""

    fn: object
    k: int

    def probs(self, s) -> np.ndarray:
        return self.fn(s)
