"""Layer stack model, density recursion vs closed forms, asymptotics.

The three-layer closed forms double as the analytic oracle for the general
recursion; the interface-condition residual test checks the assembled
one-dimensional profiles directly against the boundary-value problem, which
is independent of both code paths.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layeredfmm.layers import (
    TAGS,
    ConstantDensity,
    DensityEvaluator,
    InterfaceChargeError,
    LayerStack,
    density_asymptotics,
    reaction_densities,
    three_layer_explicit,
    transmission_matrices,
)

EPS_PAPER = [21.2, 47.5, 62.8]
D_PAPER = [0.0, -1.2]

NONZERO_THREE_LAYER = [
    (0, 0, "11"), (1, 0, "11"), (1, 0, "21"), (2, 0, "21"),
    (0, 1, "11"), (0, 1, "12"), (1, 1, "11"), (1, 1, "21"),
    (1, 1, "12"), (1, 1, "22"), (2, 1, "21"), (2, 1, "22"),
    (0, 2, "12"), (1, 2, "12"), (1, 2, "22"), (2, 2, "22"),
]


def paper_stack():
    return LayerStack(interfaces=D_PAPER, eps=EPS_PAPER)


class TestLayerStack:
    def test_locate(self):
        s = paper_stack()
        assert s.locate(5.0) == 0
        assert s.locate(-0.3) == 1
        assert s.locate(-2.0) == 2

    def test_locate_rejects_interface(self):
        s = paper_stack()
        with pytest.raises(InterfaceChargeError):
            s.locate(0.0)
        with pytest.raises(InterfaceChargeError):
            s.locate(-1.2)

    def test_validation(self):
        with pytest.raises(ValueError):
            LayerStack(interfaces=[0.0, 1.0], eps=[1, 1, 1])  # increasing
        with pytest.raises(ValueError):
            LayerStack(interfaces=[0.0], eps=[1.0, -2.0])
        with pytest.raises(ValueError):
            LayerStack(interfaces=[0.0], eps=[1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            LayerStack(interfaces=[], eps=[1.0])

    def test_defaults_and_thickness(self):
        s = paper_stack()
        assert np.all(s.a == 1.0)
        assert np.all(s.b == s.eps)
        assert s.thickness(0) == 0.0
        assert s.thickness(1) == pytest.approx(1.2)
        assert s.thickness(2) == 0.0
        assert s.min_thickness() == pytest.approx(1.2)
        assert LayerStack(interfaces=[0.0], eps=[1, 2]).min_thickness() == 1.0

    def test_structural_zero_map(self):
        s = paper_stack()
        assert s.is_structural_zero(2, 0, "11")  # no downward term in bottom
        assert s.is_structural_zero(0, 1, "21")  # no upward term in top
        assert s.is_structural_zero(1, 0, "12")  # top source has no upper face
        assert s.is_structural_zero(1, 2, "21")  # bottom source has no lower face
        assert not s.is_structural_zero(1, 1, "22")


class TestTransmissionMatrices:
    def test_homogeneous_diagonal(self):
        s = LayerStack(interfaces=[0.0, -1.0], eps=[4.0, 4.0, 4.0])
        ttilde, _ = transmission_matrices(s, 1, 0.7)
        assert ttilde[0, 1] == pytest.approx(0.0)
        assert ttilde[1, 0] == pytest.approx(0.0)

    def test_zero_spectral_argument(self):
        # all layer exponentials are 1, so the rescaled matrix equals the
        # bare coefficient combination
        s = paper_stack()
        ttilde, _ = transmission_matrices(s, 1, 0.0)
        sr = s.a[1] / s.a[0]
        tr = s.b[1] / s.b[0]
        np.testing.assert_allclose(
            ttilde, [[sr + tr, sr - tr], [sr - tr, sr + tr]], rtol=1e-14
        )

    def test_against_direct_inverse(self):
        s = paper_stack()
        k = 1.0
        for layer in (1, 2):
            ttilde, scheck = transmission_matrices(s, layer, k)
            D = [0.0, 1.2, 0.0]
            e = np.exp(-k * np.array(D))
            el, em = e[layer], e[layer - 1]
            al, bl = s.a[layer], s.b[layer]
            am, bm = s.a[layer - 1], s.b[layer - 1]
            shat_m = np.array([[am, am * em], [bm, -bm * em]])
            stil_l = np.array([[al * el, al], [bl * el, -bl]])
            T = np.linalg.inv(shat_m) @ stil_l
            np.testing.assert_allclose(ttilde, 2 * em * T, rtol=1e-13)
            shat_l = np.array([[al, al * el], [bl, -bl * el]])
            np.testing.assert_allclose(scheck, np.linalg.inv(shat_l), rtol=1e-13)


class TestRecursionVsClosedForm:
    def test_all_sixteen_components(self):
        s = paper_stack()
        ks = np.logspace(-3, 3, 50)
        for src in range(3):
            sig = reaction_densities(s, src, ks)
            for l in range(3):
                for j, tag in enumerate(TAGS):
                    explicit = np.asarray(three_layer_explicit(s, l, src, tag, ks))
                    got = sig[l, j]
                    tol = 1e-12 * np.maximum(np.abs(explicit), 1e-290)
                    assert np.all(np.abs(got - explicit) <= tol), (l, src, tag)

    def test_scalar_table_interface(self):
        s = paper_stack()
        table = reaction_densities(s, 1, 2.0)
        assert table[(1, "11")] == pytest.approx(
            three_layer_explicit(s, 1, 1, "11", 2.0), rel=1e-13
        )
        assert table[(2, "21")] == pytest.approx(
            three_layer_explicit(s, 2, 1, "21", 2.0), rel=1e-13
        )

    def test_transmission_limit_value(self):
        # sigma_10^21 closed form eps0(eps1+eps2)/kappa; homogeneous -> 1
        h = LayerStack(interfaces=[0.0, -1.2], eps=[3.3, 3.3, 3.3])
        assert three_layer_explicit(h, 1, 0, "21", 5.0) == pytest.approx(1.0, rel=1e-14)

    def test_explicit_requires_three_layers(self):
        s = LayerStack(interfaces=[0.0], eps=[1.0, 2.0])
        with pytest.raises(ValueError):
            three_layer_explicit(s, 0, 0, "11", 1.0)

    def test_contour_argument_agreement(self):
        s = paper_stack()
        etas = np.array([0.3, 2.0, 11.0])
        for src in range(3):
            sig_up = reaction_densities(s, src, 1j * etas)
            sig_dn = reaction_densities(s, src, -1j * etas)
            # Schwarz reflection: sigma(conj k) = conj sigma(k)
            np.testing.assert_allclose(sig_dn, np.conj(sig_up), rtol=1e-13, atol=1e-300)
            for l in range(3):
                for j, tag in enumerate(TAGS):
                    explicit = three_layer_explicit(s, l, src, tag, 1j * etas)
                    np.testing.assert_allclose(
                        sig_up[l, j], explicit, rtol=1e-12, atol=1e-290
                    )


class TestHomogeneousLimit:
    def test_reflection_components_vanish(self):
        ks = np.logspace(-2, 2, 21)
        h = LayerStack(interfaces=[0.7, 0.0, -1.2], eps=[5.0] * 4)
        for src in range(4):
            sig = reaction_densities(h, src, ks)
            for l in range(4):
                for j, tag in enumerate(TAGS):
                    reflective = (
                        tag in ("11", "22")
                        or (tag == "21" and l <= src)
                        or (tag == "12" and l >= src)
                    )
                    if reflective:
                        assert np.max(np.abs(sig[l, j])) <= 1e-14, (l, src, tag)

    def test_transmission_reproduces_free_kernel(self):
        # assemble u_hat at a deep target from transmitted densities and
        # compare against exp(-k |z - z'|)
        h = LayerStack(interfaces=[0.7, 0.0, -1.2], eps=[5.0] * 4)
        ks = np.linspace(0.1, 8.0, 12)
        src, tgt = 1, 3
        zsrc, ztgt = 0.3, -2.0
        sig = reaction_densities(h, src, ks)
        d = h.interfaces
        g1 = np.exp(-ks * (zsrc - d[src]))
        # target layer 3 carries only the upward-referenced (a=2) terms
        u = sig[tgt, 2] * g1 * np.exp(-ks * (d[tgt - 1] - ztgt))
        u += sig[tgt, 3] * np.exp(-ks * (d[src - 1] - zsrc)) * np.exp(
            -ks * (d[tgt - 1] - ztgt)
        )
        np.testing.assert_allclose(u, np.exp(-ks * (zsrc - ztgt)), rtol=1e-13)


def _assemble_profile(stack, src, zsrc, k, sig, layer, z):
    """u_hat in `layer` at height z, common source factor normalized out."""
    d = stack.interfaces
    L = stack.num_interfaces
    g = [
        np.exp(-k * (zsrc - d[src])) if src < L else 0.0,
        np.exp(-k * (d[src - 1] - zsrc)) if src > 0 else 0.0,
    ]
    val = 0.0
    dval = 0.0
    if layer < L:
        s1 = sig[layer, 0] * g[0] + sig[layer, 1] * g[1]
        val += s1 * np.exp(-k * (z - d[layer]))
        dval += -k * s1 * np.exp(-k * (z - d[layer]))
    if layer > 0:
        s2 = sig[layer, 2] * g[0] + sig[layer, 3] * g[1]
        val += s2 * np.exp(-k * (d[layer - 1] - z))
        dval += k * s2 * np.exp(-k * (d[layer - 1] - z))
    if layer == src:
        val += np.exp(-k * abs(z - zsrc))
        dval += -k * np.sign(z - zsrc) * np.exp(-k * abs(z - zsrc))
    return val, dval


@given(
    st.integers(1, 4),
    st.floats(0.01, 2.0),
    st.integers(0, 10 ** 6),
)
@settings(max_examples=40, deadline=None)
def test_interface_condition_residual(num_if, krel, seed):
    rng = np.random.default_rng(seed)
    d = np.sort(rng.uniform(-3, 3, size=num_if))[::-1]
    if num_if > 1 and np.min(-np.diff(d)) < 0.05:
        d = np.arange(num_if)[::-1] * 1.0
    eps = rng.uniform(0.5, 80.0, size=num_if + 1)
    stack = LayerStack(interfaces=d, eps=eps)
    k = krel / stack.min_thickness()
    src = int(rng.integers(0, num_if + 1))
    lo = d[src] if src < num_if else d[-1] - 1.0
    hi = d[src - 1] if src > 0 else d[0] + 1.0
    zsrc = float(rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo)))

    sig = reaction_densities(stack, src, np.array([k]))[:, :, 0]
    for j in range(num_if):
        va, da = _assemble_profile(stack, src, zsrc, k, sig, j, d[j])
        vb, db = _assemble_profile(stack, src, zsrc, k, sig, j + 1, d[j])
        scale = max(abs(va), abs(vb), 1e-30)
        dscale = max(abs(da), abs(db), 1e-30)
        assert abs(stack.a[j] * va - stack.a[j + 1] * vb) <= 1e-11 * scale * max(stack.a)
        assert abs(stack.b[j] * da - stack.b[j + 1] * db) <= 1e-11 * dscale * max(stack.b)


class TestAsymptotics:
    def test_middle_layer_self_reflection(self):
        ev = DensityEvaluator(paper_stack(), target=1, source=1, tag="11")
        assert ev.zeta == 0.0
        e0, e1, e2 = EPS_PAPER
        assert ev.C == pytest.approx((e1 - e2) / (e1 + e2), rel=1e-10)
        assert ev.C == pytest.approx(-0.138713, abs=5e-7)

    def test_cross_interface_transmission(self):
        e0, e1, e2 = EPS_PAPER
        ev = DensityEvaluator(paper_stack(), target=0, source=2, tag="12")
        assert ev.zeta == pytest.approx(1.2)
        assert ev.C == pytest.approx(4 * e1 * e2 / ((e0 + e1) * (e1 + e2)), rel=1e-10)
        ev = DensityEvaluator(paper_stack(), target=2, source=0, tag="21")
        assert ev.zeta == pytest.approx(1.2)
        assert ev.C == pytest.approx(4 * e0 * e1 / ((e0 + e1) * (e1 + e2)), rel=1e-10)

    def test_structural_zero_pair(self):
        ev = DensityEvaluator(paper_stack(), target=2, source=0, tag="11")
        assert (ev.C, ev.zeta) == (0.0, 0.0)
        assert np.all(ev(np.array([0.5, 5.0])) == 0.0)

    def test_homogeneous_reflection_constant(self):
        h = LayerStack(interfaces=[0.0, -1.2], eps=[7.0] * 3)
        for tag, tgt, src in (("11", 1, 1), ("22", 1, 1), ("11", 0, 0)):
            C, zeta = density_asymptotics(DensityEvaluator(h, tgt, src, tag))
            assert C == 0.0

    def test_boundedness_envelope(self):
        s = paper_stack()
        kmin = 10.0 / s.min_thickness()
        ks = np.linspace(kmin, 20 * kmin, 200)
        for tgt, src, tag in NONZERO_THREE_LAYER:
            ev = DensityEvaluator(s, tgt, src, tag)
            vals = np.abs(ev(ks) * np.exp(ks * ev.zeta))
            assert np.max(vals) <= 2 * abs(ev.C) + 1.0, (tgt, src, tag)

    def test_unit_density(self):
        u = ConstantDensity()
        assert u.C == 1.0 and u.zeta == 0.0
        assert np.all(u(np.array([0.1, 3.0])) == 1.0)


class TestPurity:
    def test_identical_bits(self):
        s = paper_stack()
        ks = np.logspace(-2, 2, 7)
        first = reaction_densities(s, 1, ks)
        second = reaction_densities(s, 1, ks)
        assert np.array_equal(first, second)
