"""Free-space expansion operators checked against brute-force summation.

The O(N*M) direct sum is the oracle throughout. It shares no code with the
harmonic machinery, so agreement pins the coefficient formulas, the
normalization, and every translation matrix at once.
"""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import eval_legendre

import layeredfmm.freespace_expansions as fs

SQRT_4PI = math.sqrt(4.0 * math.pi)


def direct_sum(positions, strengths, targets):
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    d = np.linalg.norm(t[:, None, :] - positions[None, :, :], axis=2)
    return (np.asarray(strengths)[None, :] / d).sum(axis=1)


def cloud(seed, n=10, half_width=0.5, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-half_width, half_width, (n, 3)) + np.asarray(center)
    q = rng.uniform(-1.0, 1.0, n)
    return pos, q


class TestCoefficientTables:
    def test_unit_charge_at_center(self):
        e = fs.p2m(np.zeros((1, 3)), [1.0], np.zeros(3), 1.0, 6)
        assert e.coefficient(0, 0) == pytest.approx(SQRT_4PI, rel=1e-15)
        rest = e.coeffs.copy()
        rest[0] = 0.0
        assert np.max(np.abs(rest)) == 0.0
        t = np.array([0.3, -0.9, 1.7])
        assert fs.eval_multipole(e, t) == pytest.approx(
            1.0 / np.linalg.norm(t), rel=1e-14)

    def test_mirror_pair_has_no_monopole(self):
        v = np.array([0.21, -0.07, 0.4])
        e = fs.p2m(np.stack([v, -v]), [1.0, -1.0], np.zeros(3), 1.0, 4)
        assert e.coefficient(0, 0) == 0.0
        assert abs(e.coefficient(1, 0)) > 0.0  # dipole leads

    def test_p0_monopole_is_exact_coulomb(self):
        e = fs.p2m(np.zeros((1, 3)), [1.0], np.zeros(3), 2.0, 0)
        t = np.array([[1.0, 2.0, -2.0], [-0.1, 0.0, 0.4]])
        r = np.linalg.norm(t, axis=1)
        np.testing.assert_allclose(fs.eval_multipole(e, t), 1.0 / r, rtol=1e-15)

    def test_local_value_at_center_from_l00(self):
        src = np.array([[1.0, -2.0, 2.0]])
        e = fs.p2l(src, [1.0], np.zeros(3), 1.0, 0)
        assert fs.eval_local(e, np.zeros(3)) == pytest.approx(1.0 / 3.0, rel=1e-14)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_conjugate_symmetry_for_real_strengths(self, seed):
        pos, q = cloud(seed)
        me = fs.p2m(pos, q, np.zeros(3), 1.0, 7)
        le = fs.p2l(pos + np.array([0.0, 0.0, 4.0]), q, np.zeros(3), 1.0, 7)
        for e in (me, le):
            for n in range(e.p + 1):
                for m in range(1, n + 1):
                    want = (-1) ** m * e.coefficient(n, m).conjugate()
                    assert e.coefficient(n, -m) == want

    def test_validation(self):
        with pytest.raises(ValueError, match="kind"):
            fs.Expansion("taylor", np.zeros(3), 1.0, 2, np.zeros(9, complex))
        with pytest.raises(ValueError, match="entries"):
            fs.Expansion("multipole", np.zeros(3), 1.0, 2, np.zeros(8, complex))
        with pytest.raises(ValueError):
            fs.Expansion("multipole", np.zeros(3), 0.0, 2, np.zeros(9, complex))
        with pytest.raises(ValueError):
            fs.Expansion("multipole", np.zeros(3), 1.0, -1, np.zeros(0, complex))
        with pytest.raises(ValueError, match="pair"):
            fs.p2m(np.zeros((2, 3)), [1.0], np.zeros(3), 1.0, 3)
        with pytest.raises(ValueError, match="center"):
            fs.p2l(np.zeros((1, 3)), [1.0], np.zeros(3), 1.0, 3)
        e = fs.p2m(np.zeros((1, 3)), [1.0], np.zeros(3), 1.0, 3)
        with pytest.raises(ValueError):
            e.coefficient(4, 0)
        with pytest.raises(ValueError):
            e.coefficient(2, 3)
        with pytest.raises((ValueError, RuntimeError)):
            e.coeffs[0] = 0.0
        with pytest.raises((ValueError, RuntimeError)):
            e.center[0] = 1.0
        with pytest.raises(ValueError, match="multipole"):
            fs.eval_multipole(
                fs.Expansion("local", np.zeros(3), 1.0, 0, np.zeros(1, complex)),
                np.ones(3))
        with pytest.raises(ValueError, match="local"):
            fs.eval_local(e, np.ones(3))


class TestEvaluation:
    def test_multipole_far_field_within_printed_bound(self):
        pos, q = cloud(3)
        radius = float(np.linalg.norm(pos, axis=1).max())
        rng = np.random.default_rng(11)
        dirs = rng.normal(size=(20, 3))
        targets = 3.0 * radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        ref = direct_sum(pos, q, targets)
        amp = np.abs(q).sum()
        for p in (4, 8, 12, 16):
            got = fs.eval_multipole(fs.p2m(pos, q, np.zeros(3), 1.0, p), targets)
            bound = amp / (3.0 * radius - radius) * (1.0 / 3.0) ** (p + 1)
            assert np.max(np.abs(got - ref)) <= bound + 1e-13 * amp

    def test_multipole_error_slope_tracks_ratio(self):
        pos, q = cloud(5)
        radius = float(np.linalg.norm(pos, axis=1).max())
        target = np.array([0.0, 2.0 * radius, 0.0])  # ratio 1/2
        ref = direct_sum(pos, q, target)[0]
        errs = []
        for p in range(2, 15, 2):
            e = fs.p2m(pos, q, np.zeros(3), 1.0, p)
            errs.append(abs(fs.eval_multipole(e, target) - ref))
        # each +2 in p must gain close to the predicted factor 4
        for lo, hi in zip(errs, errs[2:]):
            assert hi <= lo * 0.25 * 8.0

    def test_local_bound_single_far_charge(self):
        src = np.array([[0.0, 0.0, 5.0]])
        e = fs.p2l(src, [1.0], np.zeros(3), 1.0, 10)
        rng = np.random.default_rng(2)
        dirs = rng.normal(size=(15, 3))
        targets = 1.5 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        got = fs.eval_local(e, targets)
        ref = direct_sum(src, [1.0], targets)
        bound = 1.0 / (5.0 - 1.5) * 0.3 ** 11
        assert np.max(np.abs(got - ref)) <= bound

    def test_divergence_warnings(self):
        pos, q = cloud(9)
        me = fs.p2m(pos, q, np.zeros(3), 1.0, 5)
        with pytest.warns(RuntimeWarning, match="source radius"):
            fs.eval_multipole(me, np.array([0.01, 0.0, 0.0]))
        le = fs.p2l(pos + np.array([0.0, 0.0, 3.0]), q, np.zeros(3), 1.0, 5)
        with pytest.warns(RuntimeWarning, match="locality"):
            fs.eval_local(le, np.array([0.0, 0.0, 2.9]))

    def test_batch_equals_single_target(self):
        pos, q = cloud(13)
        e = fs.p2m(pos, q, np.zeros(3), 1.0, 8)
        targets = np.array([[2.0, 0.1, -0.3], [0.0, -2.5, 1.0], [1.4, 1.4, 1.4]])
        batch = fs.eval_multipole(e, targets)
        singles = [fs.eval_multipole(e, t) for t in targets]
        assert list(batch) == singles


class TestTaylorIdentity:
    """Truncated Legendre series for 1/|r - r'| against the closed kernel."""

    @given(
        mu=st.floats(0.05, 0.7),
        rbig=st.floats(0.1, 10.0),
        cosg=st.floats(-1.0, 1.0),
        p=st.integers(2, 20),
    )
    @settings(max_examples=80, deadline=None)
    def test_partial_sum_within_tail_bound(self, mu, rbig, cosg, p):
        rsmall = mu * rbig
        dist = math.sqrt(rbig**2 + rsmall**2 - 2.0 * rbig * rsmall * cosg)
        n = np.arange(p + 1)
        partial = np.sum(mu**n * eval_legendre(n, cosg)) / rbig
        tail = mu ** (p + 1) / (rbig - rsmall)
        floor = 1e-13 / (rbig * (1.0 - mu))
        assert abs(partial - 1.0 / dist) <= tail + floor


class TestShifts:
    def setup_method(self):
        self.pos, self.q = cloud(21)
        self.me = fs.p2m(self.pos, self.q, np.zeros(3), 1.0, 12)

    def test_m2m_zero_shift_is_identity(self):
        out = fs.m2m(self.me, np.zeros(3), 1.0)
        np.testing.assert_allclose(out.coeffs, self.me.coeffs, rtol=0, atol=1e-14)

    def test_m2m_matches_rebuilt_expansion(self):
        new_center = np.array([0.3, -0.2, 0.45])
        out = fs.m2m(self.me, new_center, 2.0)
        ref = fs.p2m(self.pos, self.q, new_center, 2.0, 12)
        assert np.max(np.abs(out.coeffs - ref.coeffs)) <= 1e-13

    def test_m2m_preserves_far_evaluation(self):
        # far enough that the two truncation residuals drop below the gate
        out = fs.m2m(self.me, np.array([0.5, 0.0, -0.25]), 1.0)
        t = np.array([[40.0, 8.0, 15.0], [-30.0, 22.0, 4.0]])
        np.testing.assert_allclose(
            fs.eval_multipole(out, t), fs.eval_multipole(self.me, t),
            rtol=0, atol=1e-12)

    def test_m2m_half_shifts_compose(self):
        full = np.array([0.4, -0.6, 0.2])
        one = fs.m2m(self.me, full, 1.0)
        two = fs.m2m(fs.m2m(self.me, full / 2, 1.0), full, 1.0)
        assert np.max(np.abs(one.coeffs - two.coeffs)) <= 1e-12

    def test_l2l_zero_shift_is_identity(self):
        le = fs.p2l(self.pos + np.array([0.0, 4.0, 0.0]), self.q,
                    np.zeros(3), 1.0, 12)
        out = fs.l2l(le, np.zeros(3), 1.0)
        np.testing.assert_allclose(out.coeffs, le.coeffs, rtol=0, atol=1e-14)

    def test_l2l_is_exact_on_truncated_table(self):
        # re-centering a degree-p polynomial loses nothing
        le = fs.p2l(self.pos + np.array([0.0, 4.0, 0.0]), self.q,
                    np.zeros(3), 1.0, 12)
        child = np.array([0.2, 0.3, -0.1])
        out = fs.l2l(le, child, 0.5)
        t = child + np.array([[0.1, 0.0, 0.05], [-0.15, 0.1, 0.0]])
        np.testing.assert_allclose(
            fs.eval_local(out, t), fs.eval_local(le, t), rtol=0, atol=1e-12)

    def test_l2l_shifts_compose(self):
        le = fs.p2l(self.pos + np.array([0.0, 4.0, 0.0]), self.q,
                    np.zeros(3), 1.0, 10)
        full = np.array([-0.3, 0.1, 0.25])
        one = fs.l2l(le, full, 1.0)
        two = fs.l2l(fs.l2l(le, full / 2, 1.0), full, 1.0)
        assert np.max(np.abs(one.coeffs - two.coeffs)) <= 1e-12

    def test_matrix_wrappers_agree(self):
        new_center = np.array([0.25, 0.25, -0.25])
        mat = fs.m2m_matrix(self.me.center - new_center, 1.0, 2.0, 12)
        assert np.array_equal(mat @ self.me.coeffs,
                              fs.m2m(self.me, new_center, 2.0).coeffs)


class TestScalingInvariance:
    def test_stored_tables_differ_but_potentials_match(self):
        pos, q = cloud(30)
        t = np.array([[3.0, 1.0, -2.0], [0.5, -4.0, 0.2]])
        a = fs.p2m(pos, q, np.zeros(3), 0.7, 10)
        b = fs.p2m(pos, q, np.zeros(3), 2.3, 10)
        assert np.max(np.abs(a.coeffs - b.coeffs)) > 1e-3
        va, vb = fs.eval_multipole(a, t), fs.eval_multipole(b, t)
        np.testing.assert_allclose(va, vb, rtol=1e-13)

    def test_chain_insensitive_to_scale_choice(self):
        pos, q = cloud(31, center=(4.0, 0.0, 0.0))
        t = np.array([[0.2, 0.1, -0.3], [-0.4, 0.0, 0.2]])
        ref = None
        for s_src, s_tgt in ((1.0, 1.0), (0.5, 1.7), (3.0, 0.4)):
            me = fs.p2m(pos, q, np.array([4.0, 0.0, 0.0]), s_src, 9)
            loc = fs.m2l(me, np.zeros(3), s_tgt)
            val = fs.eval_local(loc, t)
            if ref is None:
                ref = val
            else:
                np.testing.assert_allclose(val, ref, rtol=0, atol=1e-13)


class TestM2LChain:
    def test_monopole_translation_reduces_to_p2l(self):
        src = np.array([[4.0, 1.0, -2.0]])
        me = fs.p2m(src, [1.0], src[0], 1.0, 10)
        got = fs.m2l(me, np.zeros(3), 1.0)
        ref = fs.p2l(src, [1.0], np.zeros(3), 1.0, 10)
        assert np.max(np.abs(got.coeffs - ref.coeffs)) <= 1e-12

    def test_zero_expansion_stays_zero(self):
        z = fs.Expansion("multipole", np.array([3.0, 0.0, 0.0]), 1.0, 6,
                         np.zeros(49, complex))
        out = fs.m2l(z, np.zeros(3), 1.0)
        assert np.max(np.abs(out.coeffs)) == 0.0
        assert out.kind == "local"

    def test_m2l_rejects_coincident_centers(self):
        me = fs.p2m(np.zeros((1, 3)), [1.0], np.zeros(3), 1.0, 3)
        with pytest.raises(ValueError, match="coincident"):
            fs.m2l(me, np.zeros(3), 1.0)

    @staticmethod
    def _chain_setup(p, d):
        src_pos, q = cloud(40, center=(d, 0.0, 0.0))
        src_ctr = np.array([d, 0.0, 0.0])
        me = fs.p2m(src_pos, q, src_ctr, 1.0, p)
        loc = fs.m2l(me, np.zeros(3), 1.0)
        rng = np.random.default_rng(41)
        targets = rng.uniform(-0.5, 0.5, (25, 3))
        got = fs.eval_local(loc, targets)
        ref = direct_sum(src_pos, q, targets)
        a = float(np.linalg.norm(src_pos - src_ctr, axis=1).max())
        b = float(np.linalg.norm(targets, axis=1).max())
        return got, ref, q, a, b

    def test_chain_error_at_ratio_one_third_p10(self):
        d = 4.0 * math.sqrt(3.0) * 0.5  # eta = max radius / (d - radius) = 1/3
        got, ref, q, a, b = self._chain_setup(10, d)
        eta = max(a / (d - b), b / (d - a))
        bound = 4.0 * np.abs(q).sum() / (d - a - b) * eta**11
        assert np.max(np.abs(got - ref)) <= bound

    def test_chain_decay_over_truncation_orders(self):
        d = 4.0 * math.sqrt(3.0) * 0.5
        errs = {}
        for p in (4, 8, 12):
            got, ref, q, a, b = self._chain_setup(p, d)
            eta = max(a / (d - b), b / (d - a))
            errs[p] = np.max(np.abs(got - ref))
            bound = 4.0 * np.abs(q).sum() / (d - a - b) * eta ** (p + 1)
            assert errs[p] <= bound
        assert errs[12] < errs[8] < errs[4]
