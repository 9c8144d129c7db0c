"""Special-function values, symmetries, and the harmonic addition identities.

Frozen reference numbers were computed independently with mpmath/sympy
(Rodrigues form for the normalized Legendre functions, power series for J,
the cosh integral representation for K) before the implementation existed.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layeredfmm.specfun import (
    ConstantTables,
    HarmonicIndex,
    assoc_legendre_normalized,
    bessel_j,
    bessel_k,
    build_constant_tables,
    flat_index,
    legendre,
    normalized_legendre_table,
    spherical_harmonic,
    tri_index,
)

SQ4PI = math.sqrt(4 * math.pi)


class TestLegendre:
    def test_endpoint_and_zero(self):
        assert legendre(5, 1.0) == pytest.approx(1.0, abs=1e-15)
        assert legendre(2, 0.0) == pytest.approx(-0.5, abs=1e-15)

    def test_degree_ten_frozen(self):
        # Rodrigues/mpmath value, 40-digit arithmetic
        assert legendre(10, 0.3) == pytest.approx(0.251476349516015625, rel=1e-14)

    def test_vectorized_matches_scalar(self):
        xs = np.linspace(-1, 1, 7)
        vals = legendre(6, xs)
        for x, v in zip(xs, vals):
            assert v == pytest.approx(legendre(6, float(x)), abs=1e-15)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            legendre(3, 1.0 + 1e-9)

    @given(st.integers(0, 40), st.floats(-1.0, 1.0))
    @settings(max_examples=80, deadline=None)
    def test_bounded_by_one(self, n, x):
        assert abs(legendre(n, x)) <= 1.0 + 1e-13


class TestNormalizedLegendre:
    def test_constant_term(self):
        assert assoc_legendre_normalized(0, 0, 0.7) == pytest.approx(1 / SQ4PI, rel=1e-15)

    def test_degree_one_at_pole(self):
        assert assoc_legendre_normalized(1, 0, 1.0) == pytest.approx(
            math.sqrt(3 / (4 * math.pi)), rel=1e-15
        )

    def test_frozen_rodrigues_values(self):
        assert assoc_legendre_normalized(7, 4, -0.25) == pytest.approx(
            0.352729944584893506, rel=1e-13
        )
        assert assoc_legendre_normalized(5, 0, 0.3) == pytest.approx(
            0.323144266467830205, rel=1e-13
        )

    def test_negative_order_parity(self):
        x = 0.42
        for n in range(6):
            for m in range(n + 1):
                assert assoc_legendre_normalized(n, -m, x) == pytest.approx(
                    (-1) ** m * assoc_legendre_normalized(n, m, x), rel=1e-14
                )

    def test_no_condon_shortley_phase(self):
        # positive near the north pole for every order
        x = 0.999
        for n in range(1, 8):
            for m in range(n + 1):
                assert assoc_legendre_normalized(n, m, x) > 0

    def test_table_layout(self):
        nmax = 9
        x = np.array([-0.8, 0.1, 0.66])
        table = normalized_legendre_table(nmax, x)
        assert table.shape == (tri_index(nmax, nmax) + 1, 3)
        for n in range(nmax + 1):
            for m in range(n + 1):
                np.testing.assert_allclose(
                    table[tri_index(n, m)],
                    [assoc_legendre_normalized(n, m, float(v)) for v in x],
                    rtol=1e-13,
                    atol=1e-15,
                )

    def test_domain_error(self):
        with pytest.raises(ValueError):
            assoc_legendre_normalized(2, 1, -1.1)


class TestSphericalHarmonic:
    def test_monopole(self):
        assert spherical_harmonic(0, 0, 1.234, 5.0) == pytest.approx(1 / SQ4PI)

    def test_frozen_value(self):
        got = spherical_harmonic(3, 2, 1.1, 0.4)
        assert got.real == pytest.approx(0.25652020493318783, rel=1e-13)
        assert got.imag == pytest.approx(0.26412309366167118, rel=1e-13)

    @given(
        st.integers(0, 12),
        st.floats(0.01, 3.13),
        st.floats(0.0, 6.28),
    )
    @settings(max_examples=60, deadline=None)
    def test_conjugate_parity(self, n, theta, phi):
        for m in range(n + 1):
            plus = spherical_harmonic(n, m, theta, phi)
            minus = spherical_harmonic(n, -m, theta, phi)
            assert abs(minus - (-1) ** m * np.conj(plus)) < 1e-14 * max(1.0, abs(plus))

    def test_orthonormality_quadrature(self):
        # Gauss-Legendre x trapezoid quadrature over the sphere
        nq = 24
        xs, ws = np.polynomial.legendre.leggauss(nq)
        phis = 2 * np.pi * np.arange(2 * nq) / (2 * nq)
        theta = np.arccos(xs)
        pairs = [((3, 2), (3, 2)), ((3, 2), (3, 1)), ((4, -2), (3, -2)), ((5, 0), (5, 0))]
        for (n1, m1), (n2, m2) in pairs:
            acc = 0.0
            for t, w in zip(theta, ws):
                y1 = spherical_harmonic(n1, m1, t, phis)
                y2 = spherical_harmonic(n2, m2, t, phis)
                acc += w * np.sum(y1 * np.conj(y2)) * (2 * np.pi / len(phis))
            expect = 1.0 if (n1, m1) == (n2, m2) else 0.0
            assert abs(acc - expect) < 1e-12


class TestBessel:
    def test_j_at_origin(self):
        assert bessel_j(0, 0.0) == pytest.approx(1.0)
        assert bessel_j(2, 0.0) == 0.0

    def test_j_frozen_series_value(self):
        assert bessel_j(3, 5.0) == pytest.approx(0.36483123061366699, rel=1e-14)

    def test_k_frozen_integral_value(self):
        # integral of exp(-cosh t) over [0, inf)
        assert bessel_k(0, 1.0) == pytest.approx(0.42102443824070833, rel=1e-14)

    def test_k_small_argument_limit(self):
        for xv in (1e-6, 1e-8):
            assert bessel_k(1, xv) * xv == pytest.approx(1.0, rel=1e-5)

    def test_k_asymptotic(self):
        ratio = bessel_k(0, 20.0) / (math.sqrt(math.pi / 40.0) * math.exp(-20.0))
        assert abs(ratio - 1.0) < 0.01

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            bessel_k(0, 0.0)
        with pytest.raises(ValueError):
            bessel_k(0, -1.0)
        with pytest.raises(ValueError):
            bessel_j(-1, 1.0)
        with pytest.raises(ValueError):
            bessel_j(2, -0.5)


class TestConstants:
    def test_basic_entries(self):
        t = build_constant_tables(6)
        assert t.c[0] == pytest.approx(1 / SQ4PI)
        assert t.c[2] == pytest.approx(math.sqrt(5 / (4 * math.pi)))
        assert t.a[3] == pytest.approx(math.sqrt(12.0))
        assert t.A_nm(0, 0) == pytest.approx(1 / SQ4PI)
        assert t.A_nm(1, 1) == pytest.approx(-t.c[1] / math.sqrt(2.0))
        assert t.A_nm(1, -1) == t.A_nm(1, 1)
        # i^(2n-m) with n=1, m=0 gives -1
        assert t.C_nm(1, 0) == pytest.approx(-math.sqrt(4 * math.pi / 3))
        assert t.C_nm(1, -1) == pytest.approx(-t.C_nm(1, 1))

    def test_finite_to_order_thirty(self):
        t = build_constant_tables(30)
        assert t.nmax == 122
        assert np.isfinite(t.A).all()
        assert np.isfinite(t.C.real).all() and np.isfinite(t.C.imag).all()
        assert np.isfinite(t.lognfact).all()

    def test_against_direct_factorials(self):
        t = build_constant_tables(4)
        for n in range(10):
            for m in range(n + 1):
                direct = (-1) ** n * t.c[n] / math.sqrt(
                    math.factorial(n - m) * math.factorial(n + m)
                )
                assert t.A_nm(n, m) == pytest.approx(direct, rel=1e-13)


class TestIndexing:
    def test_flat_layout(self):
        # n-major, m from -n to n, (p+1)^2 entries total
        seen = []
        for n in range(5):
            for m in range(-n, n + 1):
                seen.append(flat_index(n, m))
        assert seen == list(range(25))

    def test_harmonic_index_validation(self):
        assert HarmonicIndex(3, -2).flat == flat_index(3, -2)
        with pytest.raises(ValueError):
            HarmonicIndex(2, 3)
        with pytest.raises(ValueError):
            HarmonicIndex(-1, 0)


class TestAdditionIdentities:
    @given(
        st.integers(1, 20),
        st.floats(0.05, 3.09),
        st.floats(0.0, 6.28),
        st.floats(0.05, 3.09),
        st.floats(0.0, 6.28),
    )
    @settings(max_examples=60, deadline=None)
    def test_legendre_addition_theorem(self, n, t1, p1, t2, p2):
        u = np.array([math.sin(t1) * math.cos(p1), math.sin(t1) * math.sin(p1), math.cos(t1)])
        v = np.array([math.sin(t2) * math.cos(p2), math.sin(t2) * math.sin(p2), math.cos(t2)])
        cosg = float(np.clip(np.dot(u, v), -1, 1))
        lhs = legendre(n, cosg)
        rhs = 0.0 + 0.0j
        for m in range(-n, n + 1):
            rhs += np.conj(spherical_harmonic(n, m, t2, p2)) * spherical_harmonic(n, m, t1, p1)
        rhs *= 4 * math.pi / (2 * n + 1)
        assert abs(lhs - rhs) < 1e-12

    @given(
        st.integers(0, 15),
        st.floats(0.0, 6.28),
        st.floats(0.05, 3.09),
        st.floats(0.0, 6.28),
    )
    @settings(max_examples=60, deadline=None)
    def test_complex_pole_direction_expansion(self, n, alpha, theta, phi):
        # (i k0.rhat)^n / n! as a single-degree harmonic sum, k0 = (cos a, sin a, i)
        tables = build_constant_tables(8)
        k0_dot = math.sin(theta) * math.cos(phi - alpha) + 1j * math.cos(theta)
        lhs = (1j * k0_dot) ** n / math.factorial(n)
        rhs = 0.0 + 0.0j
        for m in range(-n, n + 1):
            rhs += (
                tables.C_nm(n, m)
                * assoc_legendre_normalized(n, abs(m), math.cos(theta))
                * (1.0 if m >= 0 else (-1.0) ** m)
                * np.exp(1j * m * (alpha - phi))
            )
        scale = max(1.0, abs(lhs))
        assert abs(lhs - rhs) < 1e-12 * scale

    def test_plane_wave_truncation_bound(self):
        # partial sums converge to exp(i k_rho k0 . r) within the tail bound
        rng = np.random.default_rng(7)
        tables = build_constant_tables(12)
        for _ in range(6):
            alpha = rng.uniform(0, 2 * np.pi)
            theta = rng.uniform(0.1, 3.0)
            phi = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.2, 1.0)
            krho = rng.uniform(0.05, 1.0) / r  # keep krho * r <= 1
            k0_dot_r = r * (math.sin(theta) * math.cos(phi - alpha) + 1j * math.cos(theta))
            target = np.exp(1j * krho * k0_dot_r)
            for p in (6, 10, 14):
                total = 0.0 + 0.0j
                for n in range(p + 1):
                    for m in range(-n, n + 1):
                        total += (
                            tables.C_nm(n, m)
                            * r ** n
                            * spherical_harmonic(n, m, theta, phi)
                            * krho ** n
                            * np.exp(-1j * m * alpha)
                        )
                tail = sum(
                    (krho * r * math.sqrt(2)) ** n / math.factorial(n) for n in range(p + 1, 40)
                )
                assert abs(total - target) <= tail + 1e-13
