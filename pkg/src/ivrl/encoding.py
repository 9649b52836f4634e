"""Simplex encoding of finite action and instrument spaces.

Categories are 0-based in code. Category ``j`` here corresponds to the
(j+1)-th vector of the usual 1-based presentation of the encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidCategoryCount(ValueError):
    pass


@dataclass(frozen=True)
class SimplexCode:
    """K unit vectors in R^(K-1) with sum zero and pairwise inner product -1/(K-1)."""

    k: int
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors.setflags(write=False)

    def inner(self, i: int, j: int) -> float:
        return inner(self, i, j)

    def gram(self) -> np.ndarray:
        """Analytic K x K Gram matrix of the code."""
        g = np.full((self.k, self.k), -1.0 / (self.k - 1))
        np.fill_diagonal(g, 1.0)
        return g


def build_code(k: int) -> SimplexCode:
    """Construct the simplex code for ``k`` categories.

    The first vector is ``(K-1)^{-1/2} 1``; the others are
    ``-(1 + sqrt(K)) / (K-1)^{3/2} 1 + sqrt(K/(K-1)) e_{j-1}``.
    """
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise InvalidCategoryCount(f"category count must be an integer >= 2, got {k!r}")
    k = int(k)
    m = k - 1
    vectors = np.empty((k, m))
    vectors[0] = m ** -0.5
    shift = -(1.0 + np.sqrt(k)) / m**1.5
    # shift + sqrt(K/(K-1)) rearranged so that K = 2 gives exactly -1
    diag = (np.sqrt(k) * (m - 1) - 1.0) / m**1.5
    for j in range(1, k):
        vectors[j] = shift
        vectors[j, j - 1] = diag
    return SimplexCode(k=k, vectors=vectors)


def inner(code: SimplexCode, i: int, j: int) -> float:
    """Inner product of code vectors ``i`` and ``j``, computed analytically."""
    for idx in (i, j):
        if not 0 <= idx < code.k:
            raise IndexError(f"category index {idx} out of range [0, {code.k})")
    return 1.0 if i == j else -1.0 / (code.k - 1)


def inner_array(k: int, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Vectorised ``inner`` over paired integer arrays of categories."""
    z = np.asarray(z)
    a = np.asarray(a)
    return np.where(z == a, 1.0, -1.0 / (k - 1))
