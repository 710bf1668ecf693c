"""Sampling-set construction and local-discrepancy diagnostics.

SO(3) sets come from a bundled antipodally-symmetric S^3 node design (3642
nodes, 1821 rotations after identifying the double cover) refined by edge
midpoints on its convex-hull triangulation.  Interval sets are the equispaced
grids of the floor-crossing construction in `_lds`.

Volume conventions, used consistently by every consumer in this package so
ratio-style diagnostics are normalisation independent: with geodesic distance
equal to the rotation angle, SO(3) is the radius-2 three-sphere modulo sign,
so vol(SO(3)) = (1/2) * 2 pi^2 * 2^3 = 8 pi^2 (confirmed empirically by mesh
point densities in geodesic balls); vol((0,1)) = 1; unit-ball volumes are
omega_1 = 2, omega_2 = pi, omega_3 = 4 pi / 3.
"""
from __future__ import annotations

import importlib.resources as resources
from dataclasses import dataclass
from fractions import Fraction
from math import gamma, pi

import numpy as np
from scipy.spatial import cKDTree

from . import _lds
from .errors import MissingAssetError
from .manifold import (
    EllipsoidSpec,
    Rotation,
    ellipsoid_contains_batch,
    quat_canonical,
    quat_mul,
    quat_normalize,
    so3_log_batch,
)

VOL_SO3 = 8.0 * pi ** 2
VOL_INTERVAL = 1.0

_BASE_PAIRS = 1821
_BASE_NODES = 2 * _BASE_PAIRS


def unit_ball_volume(dim: int) -> float:
    """omega_d, the volume of the d-dimensional unit ball."""
    return pi ** (dim / 2.0) / gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True, eq=False)
class SamplingSet:
    """Ordered finite set of manifold points.

    `points` is an (n, 4) quaternion array for manifold "so3" or an (n,)
    float array for manifold "interval".  `level` records the mesh level or
    sequence index the set came from.
    """

    points: np.ndarray
    level: int
    manifold: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if self.manifold == "so3":
            if pts.ndim != 2 or pts.shape[1] != 4:
                raise ValueError("so3 sampling set needs an (n, 4) array")
        elif self.manifold == "interval":
            if pts.ndim != 1:
                raise ValueError("interval sampling set needs an (n,) array")
        else:
            raise ValueError(f"unknown manifold tag {self.manifold!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return 3 if self.manifold == "so3" else 1

    def point(self, i: int):
        """The i-th point as a Rotation (so3) or float (interval)."""
        if self.manifold == "so3":
            return Rotation(self.points[i])
        return float(self.points[i])


@dataclass(frozen=True, eq=False)
class DiscrepancyReport:
    """Local integration-accuracy report for one ellipsoid and one set."""

    count_gap: float
    quad_gap: float
    radius: float
    level: int
    size: int


# ---------------------------------------------------------------------------
# SO(3): bundled base design + midpoint refinement
# ---------------------------------------------------------------------------

# level -> (s3 nodes (n,4), tetrahedra (t,4) int32, canonical reps (m,4))
_SO3_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

# Octahedron diagonals and matching equator cycles, in the fixed midpoint
# order m01, m02, m03, m12, m13, m23; adjacent cycle entries share a parent.
_OCT_SPLITS = (
    (0, 5, (1, 2, 4, 3)),
    (1, 4, (0, 2, 5, 3)),
    (2, 3, (0, 1, 5, 4)),
)


def _load_base_assets() -> tuple[np.ndarray, np.ndarray]:
    pkg = resources.files("eslift")
    nodes_path = pkg / "data" / "s3_nodes_3642.npy"
    tris_path = pkg / "data" / "s3_tets_3642.npy"
    try:
        with resources.as_file(nodes_path) as p:
            nodes = np.load(p)
        with resources.as_file(tris_path) as p:
            tets = np.load(p)
    except FileNotFoundError as exc:
        raise MissingAssetError(
            "bundled S^3 node design missing; regenerate with "
            "tools/generate_base_mesh.py") from exc
    if nodes.shape != (_BASE_NODES, 4):
        raise MissingAssetError(f"unexpected node asset shape {nodes.shape}")
    return np.ascontiguousarray(nodes, dtype=np.float64), \
        np.ascontiguousarray(tets, dtype=np.int32)


def fibonacci_s3_nodes(n_pairs: int) -> np.ndarray:
    """Spiral-style fallback design of n_pairs antipodal pairs on S^3.

    Noticeably less uniform than the optimised bundled asset; only used if
    the asset has to be rebuilt from scratch.
    """
    k = np.arange(n_pairs, dtype=np.float64)
    s = (k + 0.5) / n_pairs
    r = np.sqrt(s)
    big_r = np.sqrt(1.0 - s)
    alpha = 2.0 * pi * k / np.sqrt(2.0)
    beta = 2.0 * pi * k / 1.533751168755204288118041
    q = np.stack([r * np.sin(alpha), r * np.cos(alpha),
                  big_r * np.sin(beta), big_r * np.cos(beta)], axis=1)
    q = quat_canonical(quat_normalize(q))
    return np.concatenate([q, -q], axis=0)


def _canonical_unique(points: np.ndarray) -> np.ndarray:
    """Canonical-sign representatives, one per antipodal pair, in first-seen order."""
    canon = quat_canonical(points)
    keys = np.ascontiguousarray(canon).view([("", np.float64)] * 4).ravel()
    _, first = np.unique(keys, return_index=True)
    return canon[np.sort(first)]


def _refine_complex(nodes: np.ndarray, tets: np.ndarray):
    """One edge-midpoint refinement step, octahedra split on the shortest diagonal."""
    tets = tets.astype(np.int64)
    edges = np.concatenate([tets[:, [a, b]] for a in range(4) for b in range(a + 1, 4)])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    mids = nodes[edges[:, 0]] + nodes[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    n_old = len(nodes)
    new_nodes = np.concatenate([nodes, mids], axis=0)

    key = edges[:, 0] * n_old + edges[:, 1]
    order = np.argsort(key, kind="stable")
    sorted_keys = key[order]

    def mid_id(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        pos = np.searchsorted(sorted_keys, lo * n_old + hi)
        return n_old + order[pos]

    a, b, c, d = tets[:, 0], tets[:, 1], tets[:, 2], tets[:, 3]
    m = np.stack([mid_id(a, b), mid_id(a, c), mid_id(a, d),
                  mid_id(b, c), mid_id(b, d), mid_id(c, d)], axis=1)
    children = [
        np.stack([a, m[:, 0], m[:, 1], m[:, 2]], axis=1),
        np.stack([b, m[:, 0], m[:, 3], m[:, 4]], axis=1),
        np.stack([c, m[:, 1], m[:, 3], m[:, 5]], axis=1),
        np.stack([d, m[:, 2], m[:, 4], m[:, 5]], axis=1),
    ]
    p = new_nodes[m]
    diag = np.stack([np.sum((p[:, i] - p[:, j]) ** 2, axis=1)
                     for i, j, _ in _OCT_SPLITS], axis=1)
    choice = np.argmin(diag, axis=1)
    for ci, (d1i, d2i, square) in enumerate(_OCT_SPLITS):
        sel = choice == ci
        if not np.any(sel):
            continue
        d1, d2 = m[sel, d1i], m[sel, d2i]
        sq = [m[sel, s] for s in square]
        for k in range(4):
            children.append(np.stack([d1, d2, sq[k], sq[(k + 1) % 4]], axis=1))
    return new_nodes, np.concatenate(children, axis=0).astype(np.int32)


def _so3_level(level: int):
    if level < 0:
        raise ValueError("mesh level must be >= 0")
    if level in _SO3_CACHE:
        return _SO3_CACHE[level]
    if level == 0:
        nodes, tets = _load_base_assets()
        reps = _canonical_unique(nodes)
    else:
        nodes, tets, _ = _so3_level(level - 1)
        nodes, tets = _refine_complex(nodes, tets)
        reps = _canonical_unique(nodes)
    _SO3_CACHE[level] = (nodes, tets, reps)
    return _SO3_CACHE[level]


def so3_base_mesh() -> SamplingSet:
    """The 1821-rotation base set (one representative per antipodal S^3 pair)."""
    _, _, reps = _so3_level(0)
    return SamplingSet(points=reps, level=0, manifold="so3")


def refine_so3_mesh(levels: int) -> SamplingSet:
    """Mesh after `levels` midpoint refinements of the base triangulation.

    Parent points stay as a prefix of the refined point list, so successive
    levels are nested by construction.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1; use so3_base_mesh() for level 0")
    _, _, reps = _so3_level(levels)
    return SamplingSet(points=reps, level=levels, manifold="so3")


def so3_mesh(level: int) -> SamplingSet:
    """Convenience dispatcher: level 0 base mesh or refined mesh."""
    return so3_base_mesh() if level == 0 else refine_so3_mesh(level)


def nn_spacing_stats(sampling: SamplingSet) -> tuple[float, float, float]:
    """(mean, coefficient of variation, min) of nearest-neighbour distances."""
    if sampling.manifold == "so3":
        # query the doubled set so the projective nearest neighbour is found
        pts = sampling.points
        doubled = np.concatenate([pts, -pts], axis=0)
        tree = cKDTree(doubled)
        dd, _ = tree.query(pts, k=2)
        chord = dd[:, 1]
        # chord = 2 sin(theta/2) on S^3, rotation angle = 2 theta
        dist = 4.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    else:
        x = np.sort(sampling.points)
        dist = np.minimum(np.diff(x, prepend=np.inf), np.diff(x, append=np.inf))
    mean = float(dist.mean())
    return mean, float(dist.std() / mean), float(dist.min())


# ---------------------------------------------------------------------------
# interval low-discrepancy sequence
# ---------------------------------------------------------------------------

def interval_lds_sizes(eta: float, b: float, levels: int) -> list[int]:
    """Level sizes M_1 < ... < M_levels of the equispaced construction."""
    return _lds.level_sizes(_lds.snap_eta(eta), Fraction(b).limit_denominator(10_000), levels)


def interval_lds(eta: float, b: float, m: int) -> SamplingSet:
    """The m-th sampling set {i/(M_m+1) : i = 1..M_m} on (0,1), materialised."""
    sizes = interval_lds_sizes(eta, b, m)
    size = sizes[-1]
    if size > 50_000_000:
        raise ValueError(
            f"level {m} has {size} points; use interval_decay_report for "
            "diagnostics at this scale")
    pts = np.arange(1, size + 1, dtype=np.float64) / (size + 1)
    return SamplingSet(points=pts, level=m, manifold="interval")


def interval_decay_report(eta: float, b: float, levels: int,
                          n_offsets: int = 64) -> list[DiscrepancyReport]:
    """Worst-case local integration gaps per sequence level.

    Reports the supremum over window placements of the count and quadratic
    gaps (classical-discrepancy style), computed exactly from the grid
    structure; sizes never need to be materialised.
    """
    eta_f = _lds.snap_eta(eta)
    b_f = Fraction(b).limit_denominator(10_000)
    out = []
    for lvl, size in enumerate(_lds.level_sizes(eta_f, b_f, levels), start=1):
        cgap, qgap = _lds.worst_case_gaps(size, eta_f, b_f, n_offsets=n_offsets)
        r = _lds.radius_float(size, b_f, _lds.alpha_of(eta_f))
        out.append(DiscrepancyReport(count_gap=cgap, quad_gap=qgap,
                                     radius=r, level=lvl, size=size))
    return out


# ---------------------------------------------------------------------------
# ellipsoid diagnostics
# ---------------------------------------------------------------------------

def ellipsoid_volume_estimate(ellipsoid: EllipsoidSpec, dim: int) -> float:
    """Leading-order volume omega_d rho^d (radius small against injectivity)."""
    return unit_ball_volume(dim) * ellipsoid.radius ** dim


def _quad_reference_leading(ellipsoid: EllipsoidSpec, dim: int) -> float:
    """Leading-order integral of Q(log x, log x) over the ellipsoid."""
    det_root = ellipsoid.form.det() ** (1.0 / dim)
    return det_root * unit_ball_volume(dim) * dim / (dim + 2.0) \
        * ellipsoid.radius ** (dim + 2)


def _so3_mc_reference(ellipsoid: EllipsoidSpec, n_samples: int, seed: int):
    """Monte-Carlo (vol(E), integral of Q over E) on SO(3), seeded."""
    rng = np.random.default_rng(seed)
    center_q = ellipsoid.center.q
    mat = ellipsoid.form.matrix
    thr = ellipsoid.threshold
    inside = 0
    total_q = 0.0
    chunk = 500_000
    remaining = n_samples
    while remaining > 0:
        k = min(chunk, remaining)
        remaining -= k
        qs = quat_canonical(quat_normalize(rng.standard_normal((k, 4))))
        # ignore the measure-zero antipodal sliver: mask distances near pi
        rel = quat_mul(np.array([center_q[0], -center_q[1], -center_q[2], -center_q[3]]), qs)
        rel *= np.where(rel[..., 0] < 0.0, -1.0, 1.0)[..., None]
        w = rel[..., 0]
        vec = rel[..., 1:]
        nv = np.linalg.norm(vec, axis=-1)
        theta = 2.0 * np.arctan2(nv, w)
        ok = theta < np.pi - 1e-9
        safe = np.where(nv < 1e-6, 1.0, nv)
        scale = np.where(nv < 1e-6, 2.0, theta / safe)
        logs = vec * scale[..., None]
        vals = np.einsum("ni,ij,nj->n", logs, mat, logs)
        member = ok & (vals < thr)
        inside += int(member.sum())
        total_q += float(vals[member].sum())
    frac = inside / n_samples
    return VOL_SO3 * frac, VOL_SO3 * total_q / n_samples


def local_discrepancy(sampling: SamplingSet, ellipsoid: EllipsoidSpec,
                      vol_manifold: float, quad_method: str = "leading",
                      mc_samples: int = 10_000_000, seed: int = 0) -> DiscrepancyReport:
    """Count and quadratic-form integration gaps of a set inside one ellipsoid.

    quad_method "leading" uses the flat closed forms (exact on the interval up
    to boundary clipping); "mc" replaces both references with a seeded
    Monte-Carlo estimate (SO(3) only).
    """
    member = ellipsoid_contains_batch(ellipsoid, sampling.points)
    n = len(sampling)
    count = int(member.sum())
    if sampling.manifold == "so3":
        logs = so3_log_batch(ellipsoid.center.q, sampling.points[member])
    else:
        logs = (sampling.points[member] - float(ellipsoid.center))[:, None]
    quad_sum = float(np.einsum("ni,ij,nj->", logs, ellipsoid.form.matrix, logs))

    if quad_method == "mc":
        if sampling.manifold != "so3":
            raise ValueError("mc reference only applies to SO(3)")
        vol_e, integral = _so3_mc_reference(ellipsoid, mc_samples, seed)
    elif quad_method == "leading":
        dim = sampling.dim
        vol_e = ellipsoid_volume_estimate(ellipsoid, dim)
        integral = _quad_reference_leading(ellipsoid, dim)
    else:
        raise ValueError(f"unknown quad_method {quad_method!r}")

    count_gap = abs(count / n - vol_e / vol_manifold)
    quad_gap = abs(quad_sum / n - integral / vol_manifold)
    return DiscrepancyReport(count_gap=count_gap, quad_gap=quad_gap,
                             radius=ellipsoid.radius, level=sampling.level,
                             size=n)


def theorem_radius(n_points: int, j0: float, eta: float, vol_manifold: float,
                   dim: int) -> float:
    """Support-ellipsoid radius rho = (J0 vol(M)/omega_d)^(1/d) N^(-(1+eta)/(d+2))."""
    return (j0 * vol_manifold / unit_ball_volume(dim)) ** (1.0 / dim) \
        * n_points ** (-(1.0 + eta) / (dim + 2.0))
