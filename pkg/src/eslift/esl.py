"""Measure-lifted minimisation: weight solve, gamma estimation, barycentre.

Given losses sampled on a finite set X, the lifted weights are the simplex
projection of -N^eta/gamma times the loss vector.  The regularisation weight
gamma either comes from the caller or is estimated from the sorted losses so
that roughly J0 * N^((2-d*eta)/(d+2)) weights stay positive.  The returned
measure is pushed back to the manifold through its Riemannian barycentre
(fixed-point iteration of the weighted log-sum, step 1/2 absorbed).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    DegenerateLossesError,
    NonFiniteError,
    NonPositiveGammaError,
    SamplingTooSmallError,
    SupportTooSpreadError,
)
from .manifold import (
    BilinearForm,
    Rotation,
    so3_distance_batch,
    so3_exp_batch,
    so3_log_batch,
)
from .sampling import SamplingSet, theorem_radius


@dataclass(frozen=True, eq=False)
class LiftedWeights:
    """Sparse nonnegative weights on a sampling set, summing to one."""

    indices: np.ndarray
    values: np.ndarray
    n_total: int
    sampling: Optional[SamplingSet] = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be matching 1-D arrays")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("support indices must be strictly ascending")
        if np.any(val < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(val.sum() - 1.0) > 1e-10:
            raise ValueError("weights must sum to 1 within 1e-10")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def support_size(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.n_total)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class EslConfig:
    """Parameters of one lifted solve.

    eta must lie in (1/(d+1), 2/d) for the manifold dimension d and
    j0 >= 3^(-d/(d+2)); gamma, when given, overrides the estimate.
    """

    eta: float
    j0: float
    gamma: Optional[float] = None
    bary_max_iters: int = 20
    bary_tol: float = 1e-10

    def validate(self, dim: int) -> None:
        lo, hi = 1.0 / (dim + 1), 2.0 / dim
        if not lo < self.eta < hi:
            raise ValueError(f"eta={self.eta} outside ({lo:.4g}, {hi:.4g}) for dim {dim}")
        if self.j0 < 3.0 ** (-dim / (dim + 2.0)):
            raise ValueError(f"j0={self.j0} below 3^(-d/(d+2))")
        if self.gamma is not None and self.gamma <= 0.0:
            raise NonPositiveGammaError(f"gamma={self.gamma} must be positive")
        if self.bary_max_iters < 1 or self.bary_tol <= 0.0:
            raise ValueError("bary_max_iters >= 1 and bary_tol > 0 required")


@dataclass(frozen=True, eq=False)
class EslResult:
    """Outcome of one lifted solve."""

    weights: LiftedWeights
    barycentre: object
    init_point: object
    gamma_used: float
    bary_iters_run: int


# ---------------------------------------------------------------------------
# manifold dispatch for the averaging loop
# ---------------------------------------------------------------------------

class _So3Ops:
    dim = 3

    @staticmethod
    def to_raw(point):
        return point.q if isinstance(point, Rotation) else np.asarray(point, float)

    @staticmethod
    def to_point(raw):
        return Rotation(raw)

    @staticmethod
    def log_many(raw_base, pts):
        return so3_log_batch(raw_base, pts)

    @staticmethod
    def exp(raw_base, v):
        return so3_exp_batch(raw_base, v)

    @staticmethod
    def distance_many(raw_base, pts):
        return so3_distance_batch(raw_base, pts)


class _IntervalOps:
    dim = 1

    @staticmethod
    def to_raw(point):
        return float(point)

    @staticmethod
    def to_point(raw):
        return float(raw)

    @staticmethod
    def log_many(raw_base, pts):
        return (np.asarray(pts, float) - raw_base)[:, None]

    @staticmethod
    def exp(raw_base, v):
        return raw_base + float(v[0])

    @staticmethod
    def distance_many(raw_base, pts):
        return np.abs(np.asarray(pts, float) - raw_base)


def _ops_for(manifold: str):
    if manifold == "so3":
        return _So3Ops
    if manifold == "interval":
        return _IntervalOps
    raise ValueError(f"unknown manifold tag {manifold!r}")


def _points_and_ops(points):
    if isinstance(points, SamplingSet):
        return points.points, _ops_for(points.manifold)
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], Rotation):
        return np.stack([p.q for p in points]), _So3Ops
    arr = np.asarray(points, dtype=np.float64)
    return arr, (_So3Ops if arr.ndim == 2 else _IntervalOps)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def lifted_weights(f_values: np.ndarray, gamma: float, eta: float,
                   sampling: Optional[SamplingSet] = None) -> LiftedWeights:
    """Simplex projection of -N^eta/gamma * f, as a sparse weight vector."""
    from .simplex import project_simplex

    f = np.asarray(f_values, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("loss vector contains NaN or infinity")
    if gamma <= 0.0:
        raise NonPositiveGammaError(f"gamma={gamma} must be positive")
    n = f.shape[0]
    proj = project_simplex(-(float(n) ** eta / gamma) * f)
    return LiftedWeights(indices=proj.support, values=proj.weights[proj.support],
                         n_total=n, sampling=sampling)


def estimate_gamma(f_values: np.ndarray, j0: float, eta: float, dim: int) -> float:
    """Data-driven regularisation weight from the sorted losses.

    With J = floor(j0 * N^((2-d*eta)/(d+2))) and f_(1) <= ... <= f_(N), returns
    (1/2) j0 N^((2+2*eta)/(d+2)) (f_(J+1) - mean of the J smallest values);
    zero only if the smallest J+1 values coincide, which is reported as
    DegenerateLossesError (callers fall back to uniform weights on the argmin
    set).
    """
    f = np.asarray(f_values, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("loss vector contains NaN or infinity")
    n = f.shape[0]
    j = int(np.floor(j0 * float(n) ** ((2.0 - dim * eta) / (dim + 2.0))))
    if j < 1:
        raise SamplingTooSmallError(f"target support floor(j0 N^...) = {j} < 1")
    if n < j + 2:
        raise SamplingTooSmallError(f"need at least J+2 = {j + 2} samples, got {n}")
    # only the J+1 smallest values matter
    part = np.partition(f, j)[:j + 1]
    part.sort()
    gap = part[j] - part[:j].mean()
    gamma = 0.5 * j0 * float(n) ** ((2.0 + 2.0 * eta) / (dim + 2.0)) * gap
    if gamma <= 0.0:
        raise DegenerateLossesError(
            "smallest J+1 losses are identical; no support scale available")
    return float(gamma)


def sparsity_bounds(n: int, j0: float, eta: float, dim: int) -> tuple[float, float]:
    """Predicted (lower, upper) bounds on the number of positive weights."""
    upper = j0 * float(n) ** ((2.0 - dim * eta) / (dim + 2.0))
    lower = 3.0 ** (-dim / (dim + 2.0)) * upper
    return lower, upper


def support_ratio_prediction(n: int, eta_a: float, eta_b: float, dim: int = 3) -> float:
    """Predicted ratio of support sizes at eta_a vs eta_b on the same set."""
    expo = (2.0 - dim * eta_a) / (dim + 2.0) - (2.0 - dim * eta_b) / (dim + 2.0)
    return float(n) ** expo


def error_bound(hess: BilinearForm, n: int, j0: float, eta: float,
                vol_manifold: float, dim: int) -> float:
    """Bound 2 sqrt(det(H)^(1/d)/lambda_min(H)) * rho on the barycentre bias."""
    hess.require_positive_definite()
    rho = theorem_radius(n, j0, eta, vol_manifold, dim)
    return 2.0 * np.sqrt(hess.det() ** (1.0 / dim) / hess.lambda_min()) * rho


def _barycentre_raw(pts, weights_values, raw_init, ops, max_iters, tol,
                    check_spread=True):
    """Weighted Riemannian averaging; returns (raw point, iterations run)."""
    if check_spread and ops is _So3Ops:
        d = ops.distance_many(raw_init, pts)
        if np.any(d >= np.pi / 2.0):
            raise SupportTooSpreadError(
                f"support reaches {d.max():.3f} rad from the initial point")
    x = raw_init
    iters = 0
    for _ in range(max_iters):
        v = weights_values @ ops.log_many(x, pts)
        if np.linalg.norm(v) <= tol:
            break
        x = ops.exp(x, v)
        iters += 1
    return x, iters


def barycentre(points, weights: LiftedWeights, init, max_iters: int = 20,
               tol: float = 1e-10):
    """Riemannian barycentre of the weighted support points.

    Fixed-point iteration x <- exp_x(sum_i w_i log_x(p_i)); support must lie
    within pi/2 of the initial point so the averaging problem is convex.
    """
    pts, ops = _points_and_ops(points)
    support_pts = pts[weights.indices]
    raw, _ = _barycentre_raw(support_pts, weights.values, ops.to_raw(init),
                             ops, max_iters, tol)
    return ops.to_point(raw)


def _uniform_argmin_weights(f: np.ndarray, sampling: Optional[SamplingSet]) -> LiftedWeights:
    idx = np.nonzero(f == f.min())[0]
    vals = np.full(idx.size, 1.0 / idx.size)
    return LiftedWeights(indices=idx, values=vals, n_total=f.shape[0],
                         sampling=sampling)


def esl_minimise(losses: Union[np.ndarray, Callable[[SamplingSet], np.ndarray]],
                 sampling: SamplingSet, config: EslConfig,
                 strict_support: bool = True) -> EslResult:
    """Full lifted solve over a sampling set.

    `losses` is the dense loss vector over the set (or a callable producing
    it); the solve never evaluates losses pointwise.  With strict_support the
    averaging refuses supports outside the convexity ball of the initial
    point; batch drivers disable the check and run the plain fixed-point
    iteration from the argmax instead (very noisy losses can legitimately
    spread the measure wide, and aborting a whole batch for one image is
    worse than returning its local weighted mean).
    """
    ops = _ops_for(sampling.manifold)
    config.validate(ops.dim)
    f = losses(sampling) if callable(losses) else losses
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (len(sampling),):
        raise ValueError("loss vector length must match the sampling set")
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("loss vector contains NaN or infinity")

    if config.gamma is not None:
        gamma_used = float(config.gamma)
        w = lifted_weights(f, gamma_used, config.eta, sampling=sampling)
    else:
        try:
            gamma_used = estimate_gamma(f, config.j0, config.eta, ops.dim)
            w = lifted_weights(f, gamma_used, config.eta, sampling=sampling)
        except DegenerateLossesError:
            gamma_used = 0.0
            w = _uniform_argmin_weights(f, sampling)

    # ties resolved to the lowest sampling index by argmax
    init_idx = int(w.indices[np.argmax(w.values)])
    raw_init = sampling.points[init_idx]
    support_pts = sampling.points[w.indices]
    raw_bary, iters = _barycentre_raw(support_pts, w.values,
                                      np.asarray(raw_init, dtype=np.float64)
                                      if sampling.manifold == "so3" else float(raw_init),
                                      ops, config.bary_max_iters, config.bary_tol,
                                      check_spread=strict_support)
    return EslResult(weights=w, barycentre=ops.to_point(raw_bary),
                     init_point=ops.to_point(raw_init), gamma_used=gamma_used,
                     bary_iters_run=iters)
