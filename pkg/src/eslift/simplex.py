"""Exact Euclidean projection onto the unit probability simplex.

The projection of e onto {a >= 0, sum(a) = 1} is (e - tau)_+ where the
threshold tau = (sum of the J largest entries - 1) / J is determined by a
unique cut-off integer J, which also equals the number of strictly positive
entries of the result.  Sort-based O(n log n) implementation; deterministic
tie handling (stable sort by value descending, then original index ascending).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError

# Entries this small after thresholding are clamped to exact zero so that the
# support count ||.||_0 is well defined.
_ZERO_CLAMP = 1e-15


@dataclass(frozen=True, eq=False)
class SimplexProjection:
    """Projection result: dense weights, cut-off integer, sorted support."""

    weights: np.ndarray
    cutoff: int
    support: np.ndarray

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.support.setflags(write=False)


def cutoff_integer(e_sorted_desc: np.ndarray) -> int:
    """Unique J with e_(J) > (sum_{j<=J} e_(j) - 1)/J and the next entry not.

    Input must be sorted in descending order.
    """
    e = np.asarray(e_sorted_desc, dtype=np.float64)
    n = e.shape[0]
    if n == 0:
        raise ValueError("empty input")
    if np.any(np.diff(e) > 0):
        raise ValueError("input is not sorted in descending order")
    cssum = np.cumsum(e)
    j = np.arange(1, n + 1)
    tau = (cssum - 1.0) / j
    positive = e - tau > _ZERO_CLAMP
    # positive[j-1] says entry j would survive thresholding with cut-off j;
    # the cut-off integer is the largest j whose own entry survives.
    return int(np.nonzero(positive)[0][-1] + 1)


def project_simplex(e: np.ndarray) -> SimplexProjection:
    """argmin over the unit simplex of ||a - e||_2, with exposed cut-off.

    The support is taken from the sorted prefix of length J, so the cut-off
    integer and the number of strictly positive weights agree by construction
    even when entries sit exactly at the threshold.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] < 1:
        raise ValueError("expected a 1-D vector of length >= 1")
    if not np.all(np.isfinite(e)):
        raise NonFiniteError("projection input contains NaN or infinity")
    order = np.argsort(-e, kind="stable")
    e_sorted = e[order]
    j = cutoff_integer(e_sorted)
    tau = (np.sum(e_sorted[:j]) - 1.0) / j
    support = np.sort(order[:j])
    w = np.zeros_like(e)
    w[support] = e[support] - tau
    s = w.sum()
    w[support] /= s
    return SimplexProjection(weights=w, cutoff=j, support=support)
