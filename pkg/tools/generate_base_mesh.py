"""Regenerate the bundled S^3 node design and its triangulation.

Builds 1821 antipodal point pairs on S^3 by minimising a smooth projective
Riesz energy, gauge-fixes the pair closest to the identity onto the identity,
and stores the doubled node set together with its convex-hull triangulation.
Deterministic for a fixed seed/iteration budget.

Usage: python tools/generate_base_mesh.py [--iters 2500] [--seed 20240817]
"""
import argparse
import pathlib

import numpy as np
from scipy.spatial import ConvexHull

PAIRS = 1821


def canonical_sign(q):
    sign = np.sign(q[..., 0])
    for k in (1, 2, 3):
        sign = np.where(sign == 0.0, np.sign(q[..., k]), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def optimise(n_pairs, seed, iters, s=3.0):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_pairs, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    step = 0.05
    prev_e = np.inf
    for it in range(iters):
        t = q @ q.T
        u = 1.0 - t * t
        np.fill_diagonal(u, np.inf)
        e = np.sum(u ** (-s / 2.0))
        w = s * t * u ** (-s / 2.0 - 1.0)
        g = w @ q
        g -= np.sum(g * q, axis=1, keepdims=True) * q
        q -= step * g / max(np.linalg.norm(g, axis=1).max(), 1e-30)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        step = step * 0.7 if e > prev_e else min(step * 1.02, 0.2)
        prev_e = e
        if it % 250 == 0:
            print(f"  iter {it:5d}  energy {e:.6e}")
    return q


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=2500)
    ap.add_argument("--seed", type=int, default=20240817)
    ap.add_argument("--out", type=pathlib.Path,
                    default=pathlib.Path(__file__).resolve().parents[1]
                    / "src" / "eslift" / "data")
    args = ap.parse_args()

    print(f"optimising {PAIRS} pairs (seed {args.seed}, {args.iters} iters)")
    q = optimise(PAIRS, args.seed, args.iters)

    # gauge fix: rotate the whole design so its point nearest to the identity
    # lands exactly on the identity (preserves all pairwise distances)
    w = np.abs(q[:, 0])
    k = int(np.argmax(w))
    anchor = canonical_sign(q[k])
    conj = anchor * np.array([1.0, -1.0, -1.0, -1.0])
    q = quat_mul(conj[None, :], q)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q = canonical_sign(q)
    q[k] = np.array([1.0, 0.0, 0.0, 0.0])

    nodes = np.concatenate([q, -q], axis=0)
    hull = ConvexHull(nodes)
    tets = np.asarray(hull.simplices, dtype=np.int32)
    print(f"hull: {len(tets)} tetrahedra, "
          f"{len(np.unique(np.sort(np.concatenate([tets[:, [a, b]] for a in range(4) for b in range(a + 1, 4)]), axis=1), axis=0))} edges")

    args.out.mkdir(parents=True, exist_ok=True)
    np.save(args.out / "s3_nodes_3642.npy", nodes)
    np.save(args.out / "s3_tets_3642.npy", tets)
    print(f"wrote assets to {args.out}")


if __name__ == "__main__":
    main()
