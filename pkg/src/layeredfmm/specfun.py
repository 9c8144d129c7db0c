"""Real-argument special functions and constant tables for harmonic expansions.

Spherical harmonics are built on a phase-free normalized associated Legendre
function: the Condon-Shortley phase of the classical P_n^m is cancelled by an
explicit (-1)^m in the normalization, so

    phat(n, m, x) = sqrt((2n+1)(n-m)! / (4 pi (n+m)!)) * (1-x^2)^(m/2)
                    * d^m/dx^m P_n(x) >= 0 near x = 1,

and Y_n^m(theta, phi) = phat(n, m, cos theta) e^{i m phi}.  Consequences used
all over the package: phat(n, -m) = (-1)^m phat(n, m) and
Y_n^{-m} = (-1)^m conj(Y_n^m).

All factorial-bearing constants are assembled from cached log-factorials and
exponentiated once, which keeps every table entry finite up to truncation
order p = 30 (plain factorials overflow doubles near 171!).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

# Slack on |x| <= 1 checks; rounding in cos(theta) can land a hair outside.
_DOMAIN_SLACK = 1e-12

_SQRT4PI = math.sqrt(4.0 * math.pi)

# i^k for k mod 4, used by the C_n^m table.
_IPOW = np.array([1.0 + 0.0j, 1.0j, -1.0 + 0.0j, -1.0j])


def flat_index(n: int, m: int) -> int:
    """Position of (n, m) in the n-major, m from -n..n coefficient layout."""
    return n * n + n + m


def tri_index(n: int, m: int) -> int:
    """Position of (n, m >= 0) in packed triangular tables."""
    return n * (n + 1) // 2 + m


@dataclass(frozen=True)
class HarmonicIndex:
    """Degree/order pair of one spherical-harmonic coefficient."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise ValueError(f"invalid harmonic index (n={self.n}, m={self.m})")

    @property
    def flat(self) -> int:
        return flat_index(self.n, self.m)


def _check_x(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + _DOMAIN_SLACK):
        raise ValueError("argument outside [-1, 1]")
    return np.clip(x, -1.0, 1.0)


def legendre(n: int, x):
    """Legendre polynomial P_n(x) by the stable three-term recurrence.

    Accepts scalars or arrays; raises for |x| > 1 + 1e-12.
    """
    if n < 0:
        raise ValueError("degree must be >= 0")
    x = _check_x(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    pkm1 = np.ones_like(x)
    if n == 0:
        return float(pkm1[0]) if scalar else pkm1
    pk = x.copy()
    for k in range(2, n + 1):
        pk, pkm1 = ((2 * k - 1) * x * pk - (k - 1) * pkm1) / k, pk
    return float(pk[0]) if scalar else pk


def normalized_legendre_table(nmax: int, x):
    """All phat(n, m, x) for 0 <= m <= n <= nmax, stacked by tri_index.

    Returns an array of shape (tri_index(nmax, nmax) + 1,) + x.shape.  The
    recurrences run along fixed order m, which is stable for |x| <= 1.
    """
    x = _check_x(x)
    shape = x.shape
    x = np.atleast_1d(x)
    s = np.sqrt(np.maximum(0.0, (1.0 - x) * (1.0 + x)))
    out = np.zeros((tri_index(nmax, nmax) + 1,) + x.shape)

    out[0] = 1.0 / _SQRT4PI
    for m in range(1, nmax + 1):
        out[tri_index(m, m)] = (
            math.sqrt((2 * m + 1) / (2.0 * m)) * s * out[tri_index(m - 1, m - 1)]
        )
    for m in range(nmax):
        out[tri_index(m + 1, m)] = math.sqrt(2 * m + 3) * x * out[tri_index(m, m)]
    for m in range(nmax + 1):
        for n in range(m + 2, nmax + 1):
            a = math.sqrt((2 * n + 1) * (2 * n - 1) / ((n - m) * (n + m)))
            b = math.sqrt(
                (2 * n + 1)
                * (n - 1 - m)
                * (n - 1 + m)
                / ((2 * n - 3.0) * (n - m) * (n + m))
            )
            out[tri_index(n, m)] = (
                a * x * out[tri_index(n - 1, m)] - b * out[tri_index(n - 2, m)]
            )
    return out.reshape((out.shape[0],) + shape)


def assoc_legendre_normalized(n: int, m: int, x):
    """Normalized associated Legendre phat(n, m, x), phase-free convention.

    Negative orders follow phat(n, -m) = (-1)^m phat(n, m).
    """
    if n < 0 or abs(m) > n:
        raise ValueError(f"invalid (n={n}, m={m})")
    sign = 1.0 if m >= 0 or m % 2 == 0 else -1.0
    table = normalized_legendre_table(n, x)
    val = sign * table[tri_index(n, abs(m))]
    return float(val) if np.ndim(x) == 0 else val


def spherical_harmonic(n: int, m: int, theta, phi):
    """Y_n^m(theta, phi) = phat(n, m, cos theta) e^{i m phi}."""
    if n < 0 or abs(m) > n:
        raise ValueError(f"invalid (n={n}, m={m})")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    val = assoc_legendre_normalized(n, m, np.cos(theta)) * np.exp(1j * m * phi)
    return complex(val) if val.ndim == 0 else val


def bessel_j(m: int, x):
    """Cylindrical Bessel J_m(x) for m >= 0, x >= 0."""
    if m < 0:
        raise ValueError("order must be >= 0")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("argument must be >= 0")
    val = _sp.jv(m, x)
    return float(val) if val.ndim == 0 else val


def bessel_k(m: int, x):
    """Modified Bessel K_m(x) for m >= 0, x > 0."""
    if m < 0:
        raise ValueError("order must be >= 0")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("argument must be > 0")
    val = _sp.kv(m, x)
    return float(val) if val.ndim == 0 else val


@dataclass
class ConstantTables:
    """Shared constant families, built once per truncation order and reused.

    Triangular tables are stored dense over 0 <= m <= n <= nmax with zeros
    above the diagonal; accessors fold in the +-m symmetries.  nmax = 4p + 2
    covers every composed index that shows up in translation operators and in
    the order-doubling recurrence tables.
    """

    p: int
    nmax: int
    c: np.ndarray  # c_n = sqrt((2n+1)/4pi)
    a: np.ndarray  # a_n = sqrt(n(n+1))
    lognfact: np.ndarray  # log(k!) for k = 0..nmax
    A: np.ndarray  # A_n^m for m >= 0, zero-padded above diagonal
    C: np.ndarray  # C_n^m for m >= 0, complex

    def A_nm(self, n: int, m: int) -> float:
        return self.A[n, abs(m)]

    def C_nm(self, n: int, m: int) -> complex:
        val = self.C[n, abs(m)]
        return val if m >= 0 or m % 2 == 0 else -val

    def sqrt_factorial_pair(self, i, j):
        """sqrt(i! j!) as exp of log sums; i, j may be arrays."""
        return np.exp(0.5 * (self.lognfact[i] + self.lognfact[j]))


def build_constant_tables(p: int) -> ConstantTables:
    """Build every constant family needed at truncation order p."""
    if p < 0:
        raise ValueError("truncation order must be >= 0")
    nmax = 4 * p + 2
    k = np.arange(nmax + 1)
    # (n+m)! reaches 2*nmax on the table diagonal, so cache past it.
    lognfact = _sp.gammaln(np.arange(2 * nmax + 2) + 1.0)
    c = np.sqrt((2 * k + 1) / (4.0 * math.pi))
    a = np.sqrt(k * (k + 1.0))

    n = k[:, None]
    m = k[None, :]
    lower = m <= n
    logpair = np.where(lower, lognfact[np.maximum(n - m, 0)] + lognfact[n + m], 0.0)
    A = np.where(lower, (-1.0) ** n * c[:, None] * np.exp(-0.5 * logpair), 0.0)
    # sqrt(4pi/((2n+1)(n+m)!(n-m)!)) = exp(-logpair/2) / c_n.
    C = np.where(lower, _IPOW[(2 * n - m) % 4] / c[:, None] * np.exp(-0.5 * logpair), 0.0)
    return ConstantTables(p=p, nmax=nmax, c=c, a=a, lognfact=lognfact, A=A, C=C)
