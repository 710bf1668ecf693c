"""Evaluation utilities: global alignment, error statistics, soft-weight baseline.

Estimated rotations are compared to ground truth only after removing the
global orthogonal gauge (the joint reconstruction problem determines
rotations at best up to one).  When the optimal gauge is a reflection, the
estimates are conjugated by diag(1, 1, -1) and re-aligned with a proper
rotation so geodesic distances stay defined.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import degrees

import numpy as np

from .errors import DegenerateAlignmentError, EmptyRunError
from .esl import LiftedWeights
from .manifold import (
    Rotation,
    quat_from_matrix,
    quat_to_matrix,
    so3_distance_batch,
)

_REFLECT = np.diag([1.0, 1.0, -1.0])


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """Optimal orthogonal gauge and the per-image errors after applying it."""

    transform: np.ndarray       # 3x3 orthogonal, det +/- 1
    reflected: bool
    aligned_errors: np.ndarray  # radians, in [0, pi]
    mean: float
    std: float


def _as_quat_array(rotations) -> np.ndarray:
    if isinstance(rotations, np.ndarray):
        arr = rotations
    else:
        arr = np.stack([r.q if isinstance(r, Rotation) else np.asarray(r)
                        for r in rotations])
    return np.asarray(arr, dtype=np.float64).reshape(-1, 4)


def align_rotations(est, gt) -> AlignmentResult:
    """Least-squares orthogonal alignment of estimates onto ground truth.

    Minimises sum ||O R_est,i - R_gt,i||_F^2 over O in O(3) (closed form via
    the SVD of the cross-covariance).
    """
    est_q = _as_quat_array(est)
    gt_q = _as_quat_array(gt)
    if est_q.shape != gt_q.shape or est_q.shape[0] == 0:
        raise ValueError("estimate and ground-truth lists must match and be nonempty")
    est_m = quat_to_matrix(est_q)
    gt_m = quat_to_matrix(gt_q)
    cross = np.einsum("nij,nkj->ik", gt_m, est_m)  # sum_i R_gt R_est^T
    u, s, vt = np.linalg.svd(cross)
    if s[-1] < 1e-12 * max(s[0], 1.0):
        raise DegenerateAlignmentError("alignment cross-covariance is rank deficient")
    transform = u @ vt
    reflected = bool(np.linalg.det(transform) < 0)

    if reflected:
        est_m = _REFLECT[None] @ est_m @ _REFLECT[None]
        cross = np.einsum("nij,nkj->ik", gt_m, est_m)
        u, s, vt = np.linalg.svd(cross)
        gauge = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    else:
        gauge = transform

    aligned = gauge[None] @ est_m
    aligned_q = np.stack([quat_from_matrix(m) for m in aligned])
    errors = so3_distance_batch(aligned_q, gt_q)
    return AlignmentResult(transform=transform, reflected=reflected,
                           aligned_errors=errors, mean=float(errors.mean()),
                           std=float(errors.std()))


def w2_to_dirac(mu: LiftedWeights, p: Rotation) -> float:
    """Wasserstein-2 distance of a discrete measure to a point mass.

    Every coupling with a Dirac marginal is the product coupling, so the
    distance is sqrt(sum_i w_i d(x_i, p)^2).
    """
    if mu.sampling is None:
        raise ValueError("weights carry no sampling set reference")
    pts = mu.sampling.points[mu.indices]
    if mu.sampling.manifold == "so3":
        d = so3_distance_batch(p.q, pts)
    else:
        d = np.abs(pts - float(p))
    return float(np.sqrt(np.sum(mu.values * d * d)))


def euler_zyz(r: Rotation) -> tuple[float, float, float]:
    """Intrinsic ZYZ Euler angles (phi, theta, psi): r = Rz(phi) Ry(theta) Rz(psi).

    theta in [0, pi]; phi, psi in (-pi, pi]; at gimbal lock psi is set to 0.
    """
    m = r.matrix
    c = float(np.clip(m[2, 2], -1.0, 1.0))
    theta = float(np.arccos(c))
    if theta < 1e-9:
        phi = float(np.arctan2(m[1, 0], m[0, 0]))
        psi = 0.0
    elif np.pi - theta < 1e-9:
        phi = float(np.arctan2(-m[1, 0], -m[0, 0]))
        psi = 0.0
    else:
        phi = float(np.arctan2(m[1, 2], m[0, 2]))
        psi = float(np.arctan2(m[2, 1], -m[2, 0]))
    if phi <= -np.pi:
        phi = np.pi
    if psi <= -np.pi:
        psi = np.pi
    return phi, theta, psi


def rotation_from_euler_zyz(phi: float, theta: float, psi: float) -> Rotation:
    def rz(a):
        return Rotation.from_axis_angle([0.0, 0.0, 1.0], a)

    ry = Rotation.from_axis_angle([0.0, 1.0, 0.0], theta)
    return rz(phi).compose(ry).compose(rz(psi))


def relion_like_weights(losses: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax weights exp(-loss/(2 T)) normalised over the set, max-subtracted."""
    f = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("losses must be finite")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = -f / (2.0 * temperature)
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class ErrorTableRow:
    """One aggregated row: sampling size, eta, error stats (degrees), support, W2."""

    n_samples: int
    eta: float
    mean_err_deg: float
    std_err_deg: float
    mean_l0: float
    mean_w2_deg: float


def summarize(n_samples: int, eta: float, errors_rad, l0s, w2s_rad) -> ErrorTableRow:
    """Aggregate per-image results into a table row (angles in degrees)."""
    errors = np.asarray(errors_rad, dtype=np.float64)
    if errors.size == 0:
        raise EmptyRunError("no per-image results to aggregate")
    l0s = np.asarray(l0s, dtype=np.float64)
    w2s = np.asarray(w2s_rad, dtype=np.float64)
    return ErrorTableRow(
        n_samples=n_samples,
        eta=eta,
        mean_err_deg=degrees(float(errors.mean())),
        std_err_deg=degrees(float(errors.std())),
        mean_l0=float(l0s.mean()) if l0s.size else float("nan"),
        mean_w2_deg=degrees(float(w2s.mean())) if w2s.size else float("nan"),
    )
