"""Multipole and local expansions of the bare Coulomb kernel 1/|r - r'|.

Coefficients are stored scaled by the box size S (multipole tables hold
M_nm / S^n, local tables hold L_nm * S^n) so that every entry stays O(1)
on deep trees; the radial factors (S/r)^n and (r/S)^n are folded back in
at evaluation and translation time.  Physical prefactors such as 1/(4 pi
eps) belong to the callers assembling potentials.
"""

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .specfun import (
    build_constant_tables,
    flat_index,
    normalized_legendre_table,
    tri_index,
)

_FOUR_PI = 4.0 * math.pi


def _spherical(vec):
    """(r, cos theta, phi) of one offset vector; the origin maps to the pole."""
    x, y, z = float(vec[0]), float(vec[1]), float(vec[2])
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        return 0.0, 1.0, 0.0
    return r, z / r, math.atan2(y, x)


def harmonic_row(nmax, vec):
    """Y_n^m of one direction for all n <= nmax, in flat (n^2+n+m) layout."""
    r, ct, phi = _spherical(vec)
    tab = normalized_legendre_table(nmax, np.array([ct]))[:, 0]
    row = np.zeros((nmax + 1) ** 2, dtype=complex)
    for n in range(nmax + 1):
        row[flat_index(n, 0)] = tab[tri_index(n, 0)]
        for m in range(1, n + 1):
            val = tab[tri_index(n, m)] * np.exp(1j * m * phi)
            row[flat_index(n, m)] = val
            row[flat_index(n, -m)] = (-1) ** m * val.conjugate()
    return row


@dataclass(frozen=True)
class Expansion:
    """One truncated spherical-harmonic expansion about a center.

    radius carries the geometric validity bound when known (largest source
    offset for a multipole, nearest singularity for a local expansion);
    zero disables the divergence warning.
    """

    kind: str
    center: np.ndarray
    scale: float
    p: int
    coeffs: np.ndarray
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("multipole", "local"):
            raise ValueError(f"unknown expansion kind {self.kind!r}")
        if self.p < 0 or self.scale <= 0.0:
            raise ValueError("need p >= 0 and scale > 0")
        c = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "center", c)
        k = np.asarray(self.coeffs, dtype=complex)
        if k.shape != ((self.p + 1) ** 2,):
            raise ValueError(f"coefficient table must have {(self.p + 1) ** 2} "
                             f"entries, got {k.shape}")
        object.__setattr__(self, "coeffs", k)
        c.flags.writeable = False
        k.flags.writeable = False

    def coefficient(self, n, m):
        if n < 0 or n > self.p or abs(m) > n:
            raise ValueError(f"index (n={n}, m={m}) outside table")
        return complex(self.coeffs[flat_index(n, m)])


def _relative_frame(points, center):
    """Per-point (r, cos theta, phi) arrays relative to the center."""
    rel = np.asarray(points, dtype=float).reshape(-1, 3) - center
    r = np.sqrt(np.sum(rel * rel, axis=1))
    safe = np.maximum(r, np.finfo(float).tiny)
    ct = np.clip(rel[:, 2] / safe, -1.0, 1.0)
    ct = np.where(r == 0.0, 1.0, ct)
    phi = np.arctan2(rel[:, 1], rel[:, 0])
    return r, ct, phi


def _cluster_coeffs(r, ct, phi, weights, radial, p):
    """Sum_j w_j * radial(n, j) * conj(Y_n^m)_j for m >= 0, mirrored to -m."""
    tab = normalized_legendre_table(p, ct)
    emph = np.exp(-1j * np.outer(np.arange(p + 1), phi))
    coeffs = np.zeros((p + 1) ** 2, dtype=complex)
    for n in range(p + 1):
        pref = _FOUR_PI / (2 * n + 1)
        base = weights * radial[n]
        for m in range(n + 1):
            val = pref * np.sum(base * tab[tri_index(n, m)] * emph[m])
            coeffs[flat_index(n, m)] = val
            if m:
                coeffs[flat_index(n, -m)] = (-1) ** m * val.conjugate()
    return coeffs


def p2m(positions, strengths, center, scale, p):
    """Multipole expansion of point charges about a center."""
    center = np.asarray(center, dtype=float).reshape(3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    r, ct, phi = _relative_frame(positions, center)
    if q.shape != r.shape:
        raise ValueError("positions and strengths must pair up")
    radial = np.power((r / scale)[None, :], np.arange(p + 1)[:, None])
    coeffs = _cluster_coeffs(r, ct, phi, q, radial, p)
    return Expansion("multipole", center, scale, p, coeffs,
                     radius=float(r.max(initial=0.0)))


def p2l(positions, strengths, center, scale, p):
    """Local expansion, about a center, of the field of distant charges."""
    center = np.asarray(center, dtype=float).reshape(3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    r, ct, phi = _relative_frame(positions, center)
    if q.shape != r.shape:
        raise ValueError("positions and strengths must pair up")
    if np.any(r == 0.0):
        raise ValueError("a source sits on the expansion center")
    radial = np.power((scale / r)[None, :], np.arange(p + 1)[:, None]) / r
    coeffs = _cluster_coeffs(r, ct, phi, q, radial, p)
    return Expansion("local", center, scale, p, coeffs,
                     radius=float(r.min(initial=math.inf)))


def _eval(expansion, targets, outward):
    pts = np.asarray(targets, dtype=float)
    single = pts.ndim == 1
    r, ct, phi = _relative_frame(pts, expansion.center)
    p = expansion.p
    if outward:
        safe = np.maximum(r, np.finfo(float).tiny)
        radial = np.power((expansion.scale / safe)[None, :],
                          np.arange(p + 1)[:, None]) / safe
    else:
        radial = np.power((r / expansion.scale)[None, :],
                          np.arange(p + 1)[:, None])
    tab = normalized_legendre_table(p, ct)
    emph = np.exp(1j * np.outer(np.arange(p + 1), phi))
    acc = np.zeros(r.shape, dtype=complex)
    for n in range(p + 1):
        term = expansion.coeffs[flat_index(n, 0)] * tab[tri_index(n, 0)]
        for m in range(1, n + 1):
            cp = expansion.coeffs[flat_index(n, m)]
            cm = expansion.coeffs[flat_index(n, -m)]
            y = tab[tri_index(n, m)] * emph[m]
            term = term + cp * y + (-1) ** m * cm * y.conjugate()
        acc += term * radial[n]
    out = acc.real
    return float(out[0]) if single else out


def eval_multipole(expansion, targets):
    """Potential of a multipole expansion at targets outside the source ball."""
    if expansion.kind != "multipole":
        raise ValueError("expected a multipole expansion")
    if expansion.radius > 0.0:
        r, _, _ = _relative_frame(targets, expansion.center)
        if np.any(r <= expansion.radius):
            warnings.warn("target inside the source radius; the multipole "
                          "series need not converge there", RuntimeWarning,
                          stacklevel=2)
    return _eval(expansion, targets, outward=True)


def eval_local(expansion, targets):
    """Potential of a local expansion at targets inside its locality ball."""
    if expansion.kind != "local":
        raise ValueError("expected a local expansion")
    if math.isfinite(expansion.radius) and expansion.radius > 0.0:
        r, _, _ = _relative_frame(targets, expansion.center)
        if np.any(r >= expansion.radius):
            warnings.warn("target outside the locality radius; the local "
                          "series need not converge there", RuntimeWarning,
                          stacklevel=2)
    return _eval(expansion, targets, outward=False)


# ---------------------------------------------------------------------------
# dense translation operators
#
# Entries follow the addition theorems for solid harmonics; every operator
# is assembled as a matrix over the flat coefficient layout so the engine
# can cache it per geometric offset class and apply it as a matmul.  The
# index patterns and combinatorial factors depend only on p, so each
# builder keeps a per-p plan and a call costs one harmonic row plus
# vectorized gathers.


def _flat_orders(p):
    n = np.repeat(np.arange(p + 1), 2 * np.arange(p + 1) + 1)
    return n, np.arange((p + 1) ** 2) - n * n - n


@lru_cache(maxsize=8)
def _m2m_plan(p):
    tabs = build_constant_tables(p)
    n, m = _flat_orders(p)
    k = n[:, None] - n[None, :]
    mk = m[:, None] - m[None, :]
    ok = (k >= 0) & (np.abs(mk) <= k)
    k = np.where(ok, k, 0)
    mk = np.where(ok, mk, 0)
    gather = k * k + k - mk
    sign = np.where((np.abs(m)[:, None] - np.abs(m)[None, :]) % 2 == 0,
                    1.0, -1.0)
    a_row = tabs.A[n, np.abs(m)]
    factor = (sign * tabs.A[k, np.abs(mk)] * a_row[None, :]
              / a_row[:, None] * (_FOUR_PI / (2 * k + 1)))
    return n, k, gather, np.where(ok, factor, 0.0)


@lru_cache(maxsize=8)
def _m2l_plan(p):
    tabs = build_constant_tables(p)
    n, m = _flat_orders(p)
    ns = n[:, None] + n[None, :]
    dm = m[None, :] - m[:, None]
    gather = ns * ns + ns + dm
    sign = np.where((n[None, :] + np.abs(m)[:, None]) % 2 == 0, 1.0, -1.0)
    a_row = tabs.A[n, np.abs(m)]
    factor = (sign * a_row[:, None] * a_row[None, :]
              / tabs.A[ns, np.abs(dm)]
              * (_FOUR_PI / (2 * n + 1))[:, None])
    return n, gather, factor


@lru_cache(maxsize=8)
def _l2l_plan(p):
    tabs = build_constant_tables(p)
    n, m = _flat_orders(p)
    d = n[None, :] - n[:, None]
    dm = m[None, :] - m[:, None]
    ok = (d >= 0) & (np.abs(dm) <= d)
    d = np.where(ok, d, 0)
    dm = np.where(ok, dm, 0)
    gather = d * d + d + dm
    sign = np.where((d - np.abs(dm) + np.abs(m)[None, :]
                     - np.abs(m)[:, None]) % 2 == 0, 1.0, -1.0)
    a_row = tabs.A[n, np.abs(m)]
    factor = (sign * (2 * n[None, :] + 1) * tabs.A[d, np.abs(dm)]
              * a_row[:, None]
              / ((2 * d + 1) * (2 * n[:, None] + 1) * a_row[None, :])
              * _FOUR_PI)
    return n, d, gather, np.where(ok, factor, 0.0)


def m2m_matrix(offset, scale_child, scale_parent, p):
    """Operator mapping child multipole coefficients to the parent center.

    offset = child_center - parent_center; scaled-storage convention on
    both sides.
    """
    n, k, gather, factor = _m2m_plan(p)
    row = harmonic_row(p, offset)
    rho = float(np.linalg.norm(np.asarray(offset, dtype=float)))
    shift = np.power(rho / scale_parent, k)
    keep = np.power(scale_child / scale_parent, n)
    return factor * row[gather] * shift * keep[None, :]


def m2l_matrix(offset, scale_source, scale_target, p):
    """Operator turning a multipole table into a local table across a gap.

    offset = source_center - target_center; must be nonzero and, for the
    truncation to make sense, well separated from both boxes.
    """
    off = np.asarray(offset, dtype=float)
    rho = float(np.linalg.norm(off))
    if rho == 0.0:
        raise ValueError("coincident centers")
    n, gather, factor = _m2l_plan(p)
    row = harmonic_row(2 * p, off)
    pow_t = np.power(scale_target / rho, n)
    pow_s = np.power(scale_source / rho, n)
    return factor * row[gather] * (pow_t / rho)[:, None] * pow_s[None, :]


def l2l_matrix(offset, scale_parent, scale_child, p):
    """Operator re-centering a local table; offset = parent - child center."""
    n, d, gather, factor = _l2l_plan(p)
    row = harmonic_row(p, offset)
    rho = float(np.linalg.norm(np.asarray(offset, dtype=float)))
    shift = np.power(rho / scale_parent, d)
    keep = np.power(scale_child / scale_parent, n)
    return factor * row[gather] * shift * keep[:, None]


def _apply(expansion, matrix, kind, center, scale, radius):
    coeffs = matrix @ expansion.coeffs
    return Expansion(kind, center, scale, expansion.p, coeffs, radius=radius)


def m2m(expansion, new_center, new_scale):
    """Re-center a multipole expansion (child box to parent box)."""
    if expansion.kind != "multipole":
        raise ValueError("expected a multipole expansion")
    new_center = np.asarray(new_center, dtype=float).reshape(3)
    offset = expansion.center - new_center
    mat = m2m_matrix(offset, expansion.scale, new_scale, expansion.p)
    radius = float(np.linalg.norm(offset)) + expansion.radius
    return _apply(expansion, mat, "multipole", new_center, new_scale, radius)


def m2l(expansion, target_center, target_scale):
    """Translate a multipole expansion into a local one about a far center."""
    if expansion.kind != "multipole":
        raise ValueError("expected a multipole expansion")
    target_center = np.asarray(target_center, dtype=float).reshape(3)
    offset = expansion.center - target_center
    mat = m2l_matrix(offset, expansion.scale, target_scale, expansion.p)
    gap = float(np.linalg.norm(offset))
    radius = gap - expansion.radius if expansion.radius > 0.0 else 0.0
    return _apply(expansion, mat, "local", target_center, target_scale, radius)


def l2l(expansion, new_center, new_scale):
    """Re-center a local expansion (parent box to child box)."""
    if expansion.kind != "local":
        raise ValueError("expected a local expansion")
    new_center = np.asarray(new_center, dtype=float).reshape(3)
    offset = expansion.center - new_center
    mat = l2l_matrix(offset, expansion.scale, new_scale, expansion.p)
    if math.isfinite(expansion.radius) and expansion.radius > 0.0:
        radius = expansion.radius - float(np.linalg.norm(offset))
    else:
        radius = expansion.radius
    return _apply(expansion, mat, "local", new_center, new_scale, radius)
