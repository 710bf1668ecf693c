import numpy as np
import pytest
from scipy import integrate
from scipy.spatial import cKDTree

from eslift.manifold import BilinearForm, EllipsoidSpec, Rotation
from eslift.sampling import (
    SamplingSet,
    VOL_SO3,
    ellipsoid_volume_estimate,
    interval_decay_report,
    interval_lds,
    interval_lds_sizes,
    local_discrepancy,
    nn_spacing_stats,
    refine_so3_mesh,
    so3_base_mesh,
    unit_ball_volume,
)

# sizes realised by the bundled node design (the published sizes for the
# original external design are 14761 and 114564; ours land within ~2.5%)
LEVEL_SIZES = {0: 1821, 1: 14451, 2: 115374}


class TestConstants:
    def test_unit_ball_volumes(self):
        assert unit_ball_volume(1) == pytest.approx(2.0, rel=1e-15)
        assert unit_ball_volume(2) == pytest.approx(np.pi, rel=1e-15)
        assert unit_ball_volume(3) == pytest.approx(4 * np.pi / 3, rel=1e-15)

    def test_so3_volume_convention(self):
        assert VOL_SO3 == pytest.approx(8 * np.pi ** 2, rel=1e-15)


class TestBaseMesh:
    def test_size_is_1821(self):
        assert len(so3_base_mesh()) == 1821

    def test_points_are_canonical_unit_quaternions(self):
        pts = so3_base_mesh().points
        assert np.abs(np.linalg.norm(pts, axis=1) - 1.0).max() < 1e-12
        assert np.all(pts[:, 0] >= 0.0)

    def test_identity_adjacent(self):
        base = so3_base_mesh()
        mean, _, _ = nn_spacing_stats(base)
        d_id = 2 * np.arccos(np.clip(np.abs(base.points @ np.array([1.0, 0, 0, 0])),
                                     -1, 1)).min()
        assert d_id < mean

    def test_spacing_regression(self):
        mean, cov, _ = nn_spacing_stats(so3_base_mesh())
        assert mean == pytest.approx(0.36507615, abs=1e-6)
        assert cov == pytest.approx(0.019629, abs=1e-4)

    def test_no_duplicates(self):
        pts = so3_base_mesh().points
        doubled = np.concatenate([pts, -pts])
        dd, _ = cKDTree(doubled).query(pts, k=2)
        assert np.all(dd[:, 1] > 1e-9)


class TestRefinement:
    def test_level_sizes(self):
        assert len(refine_so3_mesh(1)) == LEVEL_SIZES[1]
        assert len(refine_so3_mesh(2)) == LEVEL_SIZES[2]

    def test_sizes_near_published(self):
        # the original asset realises 14761 / 114564; ours must stay close
        assert abs(len(refine_so3_mesh(1)) - 14761) / 14761 < 0.025
        assert abs(len(refine_so3_mesh(2)) - 114564) / 114564 < 0.025

    def test_refinement_ratio(self):
        sizes = [1821, len(refine_so3_mesh(1)), len(refine_so3_mesh(2))]
        for a, b in zip(sizes, sizes[1:]):
            assert 6.0 <= b / a <= 9.0

    def test_nested_prefix(self):
        base = so3_base_mesh().points
        lvl1 = refine_so3_mesh(1).points
        assert np.array_equal(lvl1[: len(base)], base)
        lvl2 = refine_so3_mesh(2).points
        assert np.array_equal(lvl2[: len(lvl1)], lvl1)

    def test_uniformity_proxy(self):
        for level in (0, 1, 2):
            s = so3_base_mesh() if level == 0 else refine_so3_mesh(level)
            _, cov, _ = nn_spacing_stats(s)
            assert cov < 0.25

    def test_growing_sizes(self):
        sizes = [1821, len(refine_so3_mesh(1)), len(refine_so3_mesh(2))]
        assert sizes == sorted(sizes) and len(set(sizes)) == 3


class TestIntervalLds:
    def test_first_level_is_midpoint(self):
        s = interval_lds(0.5, 1.0, 1)
        assert np.allclose(s.points, [0.5])

    def test_grid_property(self):
        s = interval_lds(0.5, 1.0, 4)
        m = len(s)
        assert np.allclose(s.points, np.arange(1, m + 1) / (m + 1))

    def test_second_level_fixture(self):
        # independent direct scan of the defining inequalities
        def scan(eta, b):
            def r(m):
                return b / 2.0 * m ** (-(1 + eta) / 3.0)

            m = 2
            while True:
                if 2 * r(m - 1) * m <= np.floor(2 * r(m) * (m + 1)) < 2 * r(m) * (m + 1):
                    return m
                m += 1

        assert interval_lds_sizes(0.5, 1.0, 2)[-1] == scan(0.5, 1.0) == 2

    def test_sizes_strictly_increase(self):
        for eta in (0.3, 0.5, 1.0):
            sizes = interval_lds_sizes(eta, 1.0, 6)
            assert all(a < b for a, b in zip(sizes, sizes[1:]))

    def test_exact_sizes_match_float_scan(self):
        def scan_all(eta, b, levels):
            def r(m):
                return b / 2.0 * m ** (-(1 + eta) / 3.0)

            out = [1]
            m = 2
            while len(out) < levels:
                if 2 * r(m - 1) * m <= np.floor(2 * r(m) * (m + 1)) < 2 * r(m) * (m + 1):
                    out.append(m)
                m += 1
            return out

        for eta in (0.3, 0.5, 1.0):
            assert interval_lds_sizes(eta, 1.0, 6) == scan_all(eta, 1.0, 6)


class TestDiscrepancy:
    def test_interval_quadratic_reference(self):
        # leading closed form equals the exact 1-D integral 2 a r^3 / 3
        a, r = 2.0, 0.11
        form = BilinearForm(base=0.5, matrix=np.array([[a]]))
        e = EllipsoidSpec(center=0.5, form=form, radius=r)
        exact, _ = integrate.quad(lambda y: a * (y - 0.5) ** 2, 0.5 - r, 0.5 + r)
        s = interval_lds(0.5, 1.0, 8)
        rep = local_discrepancy(s, e, 1.0)
        # reference used internally must equal the analytic integral
        from eslift.sampling import _quad_reference_leading

        assert _quad_reference_leading(e, 1) == pytest.approx(exact, rel=1e-12)
        assert rep.quad_gap >= 0.0 and rep.count_gap >= 0.0

    def test_interval_decay_normalised_gaps(self):
        for eta in (0.5, 1.0):
            reps = interval_decay_report(eta, 1.0, 7)
            cn = [r.count_gap * r.size ** ((1 + eta) / 3.0) for r in reps[2:]]
            qn = [r.quad_gap * r.size ** (1.0 + eta) for r in reps[2:]]
            assert all(a > b for a, b in zip(cn, cn[1:]))
            assert all(a > b for a, b in zip(qn, qn[1:]))

    def test_so3_normalised_gaps_decrease_at_low_eta(self):
        # centre-averaged decay across mesh levels 0-2 with the theorem
        # radius; whether the refinement admits the decay at eta near 2/3 is
        # open, so the direct gap check is asserted in the easy regime only
        # (the eta = 0.66 evidence lives in the support-ratio diagnostics)
        from eslift.manifold import random_rotations
        from eslift.sampling import theorem_radius

        rng = np.random.default_rng(17)
        centers = random_rotations(12, rng)
        q_mat = np.diag([2.0, 1.0, 0.7])
        eta, j0 = 0.3, 15.0
        quad_norm, count_norm = [], []
        for level in (0, 1, 2):
            s = so3_base_mesh() if level == 0 else refine_so3_mesh(level)
            rho = theorem_radius(len(s), j0, eta, VOL_SO3, 3)
            qs, cs = [], []
            for c in centers:
                cr = Rotation(c)
                e = EllipsoidSpec(center=cr, form=BilinearForm(cr, q_mat),
                                  radius=rho)
                rep = local_discrepancy(s, e, VOL_SO3)
                qs.append(rep.quad_gap)
                cs.append(rep.count_gap)
            n = len(s)
            quad_norm.append(np.mean(qs) * n ** (1.0 + eta))
            count_norm.append(np.mean(cs) * n ** (3 * (1.0 + eta) / 5.0))
        assert quad_norm[0] > quad_norm[1] > quad_norm[2]
        assert count_norm[0] > count_norm[1] > count_norm[2]

    def test_ellipsoid_volume_estimates(self):
        p = Rotation.identity()
        e1 = EllipsoidSpec(center=0.5, form=BilinearForm(0.5, np.array([[3.0]])),
                           radius=0.1)
        assert ellipsoid_volume_estimate(e1, 1) == pytest.approx(0.2, rel=1e-14)
        e3 = EllipsoidSpec(center=p, form=BilinearForm(p, np.eye(3)), radius=0.1)
        assert ellipsoid_volume_estimate(e3, 3) == pytest.approx(4 * np.pi / 3 * 1e-3,
                                                                 rel=1e-14)

    def test_so3_mc_volume_close_to_leading(self):
        # sample counts sized so the Monte-Carlo noise sits well under the
        # 5% band being asserted
        p = Rotation(np.array([0.8, 0.4, 0.2, -0.1]))
        for rho, n_samples in ((0.15, 20_000_000), (0.2, 10_000_000)):
            e = EllipsoidSpec(center=p, form=BilinearForm(p, np.diag([1.5, 1.0, 0.8])),
                              radius=rho)
            from eslift.sampling import _so3_mc_reference

            vol_mc, _ = _so3_mc_reference(e, n_samples, seed=11)
            vol_leading = ellipsoid_volume_estimate(e, 3)
            assert abs(vol_mc - vol_leading) / vol_leading < 0.05


class TestSamplingSetType:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            SamplingSet(points=np.zeros((5, 3)), level=0, manifold="so3")
        with pytest.raises(ValueError):
            SamplingSet(points=np.zeros((5, 4)), level=0, manifold="interval")
        with pytest.raises(ValueError):
            SamplingSet(points=np.zeros(5), level=0, manifold="sphere")

    def test_point_accessor(self):
        s = interval_lds(0.5, 1.0, 2)
        assert isinstance(s.point(0), float)
        base = so3_base_mesh()
        assert isinstance(base.point(0), Rotation)
