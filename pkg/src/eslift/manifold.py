"""Riemannian primitives for SO(3) (unit quaternions) and the open interval (0,1).

Rotations are stored as unit quaternions (w, x, y, z) with a canonical sign
(w >= 0, ties broken by the first nonzero component) so each element of SO(3)
has a unique representative despite the double cover.  Tangent vectors use
axis-angle coordinates at the base point (left trivialisation); with the
bi-invariant metric the geodesic distance equals the rotation angle and lies
in [0, pi].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AntipodalPointError, NotPositiveDefiniteError, OutOfDomainError

# Below this angle exp/log switch to series expansions to avoid 0/0.
_SMALL_ANGLE = 1e-6
# Distances within this margin of pi are treated as antipodal (log undefined).
_ANTIPODAL_MARGIN = 1e-9


# ---------------------------------------------------------------------------
# quaternion array layer (shared by the batched code paths)
# ---------------------------------------------------------------------------

def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip signs so w >= 0, ties resolved by the first nonzero component."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.sign(q[..., 0])
    for k in (1, 2, 3):
        sign = np.where(sign == 0.0, np.sign(q[..., k]), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack of matrices) from unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (canonical sign) from a rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_canonical(quat_normalize(q))


def so3_distance_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic (rotation-angle) distance, robust near 0 and pi.

    Uses 4*atan2(|a-b'|, |a+b'|) with b' the sign-aligned representative,
    which keeps full precision where arccos of the dot product would not.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.sum(a * b, axis=-1)
    b_aligned = b * np.where(dot < 0.0, -1.0, 1.0)[..., None]
    num = np.linalg.norm(a - b_aligned, axis=-1)
    den = np.linalg.norm(a + b_aligned, axis=-1)
    return 4.0 * np.arctan2(num, den)


def so3_log_batch(base_q: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Axis-angle tangent coordinates of targets at base (targets shape (n, 4))."""
    rel = quat_mul(quat_conj(base_q), targets)
    rel *= np.where(rel[..., 0] < 0.0, -1.0, 1.0)[..., None]
    w = rel[..., 0]
    vec = rel[..., 1:]
    n = np.linalg.norm(vec, axis=-1)
    theta = 2.0 * np.arctan2(n, w)
    if np.any(theta > np.pi - _ANTIPODAL_MARGIN):
        raise AntipodalPointError("log map evaluated within 1e-9 of the cut locus")
    small = n < _SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    scale = np.where(small,
                     2.0 / np.where(w == 0.0, 1.0, w) * (1.0 - n * n / (3.0 * w * w)),
                     theta / safe_n)
    return vec * scale[..., None]


def so3_exp_batch(base_q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exponential map at base for tangent rows v (shape (n, 3) or (3,))."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half_sinc = np.where(small, 0.5 * (1.0 - theta * theta / 24.0),
                         np.sin(theta / 2.0) / safe)
    step = np.concatenate([np.cos(theta / 2.0)[..., None],
                           v * half_sinc[..., None]], axis=-1)
    return quat_canonical(quat_mul(base_q, step))


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """n quaternions uniform on SO(3) (normalised 4D Gaussians, canonical sign)."""
    q = rng.standard_normal((n, 4))
    return quat_canonical(quat_normalize(q))


# ---------------------------------------------------------------------------
# scalar domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rotation:
    """An element of SO(3) as a canonical-sign unit quaternion (w, x, y, z)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        q = quat_canonical(q)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return Rotation(np.concatenate([[np.cos(angle / 2.0)],
                                        np.sin(angle / 2.0) * axis]))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(quat_from_matrix(m))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> "Rotation":
        return Rotation(quat_conj(self.q))

    def compose(self, other: "Rotation") -> "Rotation":
        """self applied after other (matrix product self.matrix @ other.matrix)."""
        return Rotation(quat_mul(self.q, other.q))

    def isclose(self, other: "Rotation", tol: float = 1e-12) -> bool:
        return so3_distance(self, other) <= tol

    def __repr__(self):
        w, x, y, z = self.q
        return f"Rotation({w:.6f}, {x:.6f}, {y:.6f}, {z:.6f})"


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Tangent vector at `base`, axis-angle coordinates, entries in radians."""

    base: Rotation
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.v))


@dataclass(frozen=True, eq=False)
class BilinearForm:
    """Symmetric bilinear form on the tangent space at `base`.

    The determinant is defined as the product of the eigenvalues and the
    matrix must be symmetric to 1e-12.
    """

    base: object
    matrix: np.ndarray
    _eigs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("bilinear form matrix must be square")
        if not np.all(np.isfinite(m)):
            raise ValueError("bilinear form matrix must be finite")
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > 1e-12 * scale:
            raise ValueError("bilinear form matrix must be symmetric to 1e-12")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        eigs = np.linalg.eigvalsh(m)
        eigs.setflags(write=False)
        object.__setattr__(self, "_eigs", eigs)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return self._eigs

    def det(self) -> float:
        """Product of the eigenvalues."""
        return float(np.prod(self._eigs))

    def lambda_min(self) -> float:
        return float(self._eigs[0])

    def is_positive_definite(self) -> bool:
        return bool(self._eigs[0] > 0.0)

    def require_positive_definite(self):
        if not self.is_positive_definite():
            raise NotPositiveDefiniteError(
                f"form has minimal eigenvalue {self.lambda_min():.3e}")

    def __call__(self, u: np.ndarray, v: np.ndarray) -> float:
        u = np.asarray(u, dtype=np.float64).reshape(self.dim)
        v = np.asarray(v, dtype=np.float64).reshape(self.dim)
        return float(u @ self.matrix @ v)


@dataclass(frozen=True, eq=False)
class EllipsoidSpec:
    """Open ellipsoid around `center`: Q(log_c y, log_c y) < det(Q)^(1/d) rho^2."""

    center: object
    form: BilinearForm
    radius: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("ellipsoid radius must be positive")
        self.form.require_positive_definite()

    @property
    def threshold(self) -> float:
        d = self.form.dim
        return self.form.det() ** (1.0 / d) * self.radius ** 2


# ---------------------------------------------------------------------------
# SO(3) operations
# ---------------------------------------------------------------------------

def so3_exp(base: Rotation, v: TangentVector) -> Rotation:
    """Geodesic endpoint from `base` with initial velocity `v` (v.base == base)."""
    if not v.base.isclose(base, tol=1e-12):
        raise ValueError("tangent vector is anchored at a different base point")
    return Rotation(so3_exp_batch(base.q, v.v))


def so3_log(base: Rotation, target: Rotation) -> TangentVector:
    """Inverse of the exponential map; undefined within 1e-9 of the cut locus."""
    v = so3_log_batch(base.q, target.q[None, :])[0]
    return TangentVector(base, v)


def so3_distance(a: Rotation, b: Rotation) -> float:
    """Geodesic distance in radians, values in [0, pi]."""
    return float(so3_distance_batch(a.q, b.q))


# ---------------------------------------------------------------------------
# open interval (0, 1)
# ---------------------------------------------------------------------------

def _check_interval(x: float, name: str = "point") -> float:
    x = float(x)
    if not 0.0 < x < 1.0:
        raise OutOfDomainError(f"{name} {x} outside (0, 1)")
    return x


def interval_exp(base: float, v: float) -> float:
    """Euclidean exponential restricted to (0,1); errors if the result leaves it."""
    _check_interval(base, "base")
    out = base + float(v)
    if not 0.0 < out < 1.0:
        raise OutOfDomainError(f"exp result {out} outside (0, 1)")
    return out


def interval_log(base: float, target: float) -> float:
    _check_interval(base, "base")
    _check_interval(target, "target")
    return target - base


def interval_distance(a: float, b: float) -> float:
    _check_interval(a, "a")
    _check_interval(b, "b")
    return abs(a - b)


# ---------------------------------------------------------------------------
# ellipsoid membership
# ---------------------------------------------------------------------------

def _log_coords(center, point) -> np.ndarray:
    if isinstance(center, Rotation):
        return so3_log(center, point).v
    return np.array([interval_log(center, point)])


def ellipsoid_contains(ellipsoid: EllipsoidSpec, point) -> bool:
    """Membership test for the open ellipsoid (strict inequality)."""
    v = _log_coords(ellipsoid.center, point)
    return bool(ellipsoid.form(v, v) < ellipsoid.threshold)


def ellipsoid_contains_batch(ellipsoid: EllipsoidSpec, points: np.ndarray) -> np.ndarray:
    """Vectorised membership for an array of points ((n,4) quats or (n,) floats)."""
    center = ellipsoid.center
    if isinstance(center, Rotation):
        logs = so3_log_batch(center.q, np.asarray(points, dtype=np.float64))
    else:
        logs = (np.asarray(points, dtype=np.float64) - float(center))[:, None]
    vals = np.einsum("ni,ij,nj->n", logs, ellipsoid.form.matrix, logs)
    return vals < ellipsoid.threshold
