"""Layer-stack model and stable recursion for interface reaction densities.

A stack of L interfaces at heights d_0 > d_1 > ... > d_{L-1} separates L+1
dielectric layers, numbered 0 (top, unbounded above) through L (bottom).  A
point source in layer lp excites, in every layer l, up to four reaction
densities sigma[l, lp, ab] indexed by a target-side direction a (1: term
decaying upward from the layer's bottom interface, 2: decaying downward from
its top interface) and a source-side direction b (1: source-to-bottom
distance factor, 2: source-to-top).

The densities solve a chain of 2x2 interface systems.  Solving the chain
naively is exponentially ill-conditioned, so everything here works with
rescaled transmission matrices whose entries stay bounded as k grows: the
downward-decaying pieces are computed by a bottom-to-top sweep and the
upward ones by per-layer solves that only ever form decaying exponentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _spectral_array(k_rho):
    k = np.asarray(k_rho)
    return k.astype(complex) if np.iscomplexobj(k) else k.astype(float)

TAGS = ("11", "12", "21", "22")


class InterfaceChargeError(ValueError):
    """A particle sits exactly on an interface height."""


class SingularLayerSystemError(ArithmeticError):
    """The accumulated 2x2 system lost invertibility (alpha_22 vanished)."""


@dataclass
class LayerStack:
    """Interface heights, materials, and general interface coefficients.

    interfaces: d_0 > d_1 > ... > d_{L-1}
    eps:        permittivities of layers 0..L
    a, b:       interface condition weights per layer; potential jumps scale
                with a, normal-flux jumps with b.  Defaults a=1, b=eps.
    """

    interfaces: np.ndarray
    eps: np.ndarray
    a: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        self.interfaces = np.asarray(self.interfaces, dtype=float).ravel()
        self.eps = np.asarray(self.eps, dtype=float).ravel()
        L = self.interfaces.size
        if L < 1:
            raise ValueError("need at least one interface")
        if not np.all(np.diff(self.interfaces) < 0):
            raise ValueError("interface heights must be strictly decreasing")
        if self.eps.size != L + 1:
            raise ValueError(f"need {L + 1} permittivities for {L} interfaces")
        if np.any(self.eps <= 0):
            raise ValueError("permittivities must be positive")
        self.a = np.ones(L + 1) if self.a is None else np.asarray(self.a, float).ravel()
        self.b = self.eps.copy() if self.b is None else np.asarray(self.b, float).ravel()
        if self.a.size != L + 1 or self.b.size != L + 1:
            raise ValueError("a/b coefficient lists must have one entry per layer")
        if np.any(self.a == 0) or np.any(self.b == 0):
            raise ValueError("interface coefficients must be nonzero")

    @property
    def num_interfaces(self) -> int:
        return self.interfaces.size

    @property
    def num_layers(self) -> int:
        return self.interfaces.size + 1

    def locate(self, z: float) -> int:
        """Layer index containing height z; interfaces themselves rejected."""
        d = self.interfaces
        if np.any(z == d):
            raise InterfaceChargeError(f"height z={z} lies exactly on an interface")
        # layers are ordered top-down, so count interfaces above z
        return int(np.sum(z < d))

    def thickness(self, layer: int) -> float:
        """D_l = d_{l-1} - d_l, zero for the two unbounded layers."""
        L = self.num_interfaces
        if layer <= 0 or layer >= L:
            return 0.0
        return float(self.interfaces[layer - 1] - self.interfaces[layer])

    def min_thickness(self) -> float:
        """Smallest bounded-layer thickness; 1.0 when no layer is bounded."""
        L = self.num_interfaces
        if L < 2:
            return 1.0
        return float(np.min(-np.diff(self.interfaces)))

    def is_structural_zero(self, target: int, source: int, tag: str) -> bool:
        """True when the (target, source, tag) component cannot exist."""
        L = self.num_interfaces
        fa, fb = tag[0], tag[1]
        if fa == "1" and target == L:
            return True
        if fa == "2" and target == 0:
            return True
        if fb == "1" and source == L:
            return True
        if fb == "2" and source == 0:
            return True
        return False


def _layer_exponentials(stack: LayerStack, k):
    """e_l = exp(-k D_l) for l = 0..L; unbounded layers give exactly 1."""
    L = stack.num_interfaces
    D = np.zeros(L + 1)
    if L >= 2:
        D[1:L] = -np.diff(stack.interfaces)
    return np.exp(np.multiply.outer(-D, k))


def transmission_matrices(stack: LayerStack, layer: int, k_rho):
    """Rescaled interface matrices at layer index `layer` (1..L).

    Returns (Ttilde, Scheck): Ttilde is the bounded product 2 e_{l-1} T of the
    raw transfer matrix relating (sigma1, sigma2) across interface d_{l-1};
    Scheck is the inverse of the layer-(l) coefficient matrix.  Scheck's
    second row carries exp(+k D_l) growth, so stable sweeps only ever use it
    premultiplied by 2 e_l (see _source_rows).
    """
    L = stack.num_interfaces
    if not 1 <= layer <= L:
        raise ValueError(f"interface matrix index must be in 1..{L}")
    k = _spectral_array(k_rho)
    e = _layer_exponentials(stack, k)
    el, elm1 = e[layer], e[layer - 1]
    s = stack.a[layer] / stack.a[layer - 1]
    t = stack.b[layer] / stack.b[layer - 1]
    one = np.ones_like(k)
    ttilde = np.array(
        [
            [elm1 * (s + t) * el, elm1 * (s - t) * one],
            [(s - t) * el, (s + t) * one],
        ]
    )
    al, bl = stack.a[layer], stack.b[layer]
    scheck = 0.5 * np.array(
        [
            [one / al, one / bl],
            [1.0 / (el * al), -1.0 / (el * bl)],
        ]
    )
    return ttilde, scheck


def _sweep(stack: LayerStack, source: int, k):
    """All sigma[l, tag](k) for one source layer, vectorized over k.

    Returns a complex or float array of shape (L+1, 4, k.size) in TAGS
    order.  Bottom-to-top sweep: the downward-decaying pair (11, 12)
    propagates through bounded transfer rows, the upward pair (21, 22) is
    recovered per layer from the accumulated bounded products, never
    forming a growing exponential.
    """
    L = stack.num_interfaces
    k = np.atleast_1d(_spectral_array(k))
    dtype = complex if np.iscomplexobj(k) else float
    nk = k.size
    d = stack.interfaces
    a, b = stack.a, stack.b
    e = _layer_exponentials(stack, k).astype(dtype)

    has_b1 = source < L
    has_b2 = source > 0

    # interface j couples layers j-1 and j; bounded rows of T^{j-1,j}
    s = a[1:] / a[:-1]
    t = b[1:] / b[:-1]
    T11 = 0.5 * (s[:, None] + t[:, None]) * e[1:]
    T12 = np.broadcast_to(0.5 * (s - t)[:, None], (L, nk)).astype(dtype)

    # running products A^(l) = Ttilde^{01} ... Ttilde^{l-1,l}
    a11 = np.zeros((L + 1, nk), dtype)
    a12 = np.zeros((L + 1, nk), dtype)
    a21 = np.zeros((L + 1, nk), dtype)
    a22 = np.zeros((L + 1, nk), dtype)
    a11[0] = a22[0] = 1.0
    for l in range(1, L + 1):
        t11 = e[l - 1] * (s[l - 1] + t[l - 1]) * e[l]
        t12 = e[l - 1] * (s[l - 1] - t[l - 1])
        t21 = (s[l - 1] - t[l - 1]) * e[l]
        t22 = (s[l - 1] + t[l - 1]) * np.ones(nk, dtype)
        a11[l] = a11[l - 1] * t11 + a12[l - 1] * t21
        a12[l] = a11[l - 1] * t12 + a12[l - 1] * t22
        a21[l] = a21[l - 1] * t11 + a22[l - 1] * t21
        a22[l] = a21[l - 1] * t12 + a22[l - 1] * t22
    if np.any(a22 == 0):
        raise SingularLayerSystemError(
            "accumulated interface system is singular (alpha_22 = 0)"
        )

    # second rows of the rescaled source injections
    #   g1 = 2 e_lp  Scheck^(lp)   (-a_lp; b_lp) = (0, -2)
    #   g2 = 2 e_lp-1 Scheck^(lp-1) (a_lp; b_lp)
    if has_b1:
        g1_row2 = -2.0 * a22[source]
    if has_b2:
        ssrc = a[source] / a[source - 1]
        tsrc = b[source] / b[source - 1]
        g2_1 = e[source - 1] * (ssrc + tsrc)
        g2_2 = (ssrc - tsrc) * np.ones(nk, dtype)
        g2_row2 = a21[source - 1] * g2_1 + a22[source - 1] * g2_2

    def c_ratio(l1, l2):
        # C^(l1)/C^(l2) = 2^(l2-l1) exp(-k (d_{l1-1} - d_{l2-1})), l1 <= l2
        return 2.0 ** (l2 - l1) * np.exp(-k * (d[l1 - 1] - d[l2 - 1]))

    sig = np.zeros((L + 1, 4, nk), dtype)
    s11 = np.zeros(nk, dtype)
    s12 = np.zeros(nk, dtype)
    for l in range(L, -1, -1):
        if l < L:
            s11_next = sig[l + 1, 0]
            s21_next = sig[l + 1, 2]
            s12_next = sig[l + 1, 1]
            s22_next = sig[l + 1, 3]
            s11 = T11[l] * s11_next + T12[l] * s21_next
            s12 = T11[l] * s12_next + T12[l] * s22_next
            if has_b2 and l == source - 1:
                s12 = s12 + 0.5 * (ssrc + tsrc)
            # the b=1 injection at l == source cancels identically:
            # -Scheck_11 a + Scheck_12 b = 0
        else:
            s11 = np.zeros(nk, dtype)
            s12 = np.zeros(nk, dtype)

        if has_b1:
            if l > source:
                s21 = -(c_ratio(source + 1, l) * g1_row2 + a21[l] * s11) / a22[l]
            else:
                s21 = -(a21[l] / a22[l]) * s11
        else:
            s21 = np.zeros(nk, dtype)
        if has_b2:
            if l >= source:
                s22 = -(c_ratio(source, l) * g2_row2 + a21[l] * s12) / a22[l]
            else:
                s22 = -(a21[l] / a22[l]) * s12
        else:
            s22 = np.zeros(nk, dtype)

        sig[l, 0] = s11 if has_b1 else 0.0
        sig[l, 1] = s12 if has_b2 else 0.0
        sig[l, 2] = s21
        sig[l, 3] = s22

    # structural absences are exact zeros regardless of what the sweep
    # produced (top layer has no downward term, bottom no upward term)
    sig[L, 0] = 0.0
    sig[L, 1] = 0.0
    sig[0, 2] = 0.0
    sig[0, 3] = 0.0
    return sig


def reaction_densities(stack: LayerStack, source: int, k_rho):
    """Densities for every (target layer, tag) at spectral variable k_rho.

    Scalar k_rho gives a dict {(l, tag): value}; array input returns the raw
    (L+1, 4, nk) stack in TAGS order.
    """
    if not 0 <= source <= stack.num_interfaces:
        raise ValueError("source layer out of range")
    k = np.asarray(k_rho)
    sig = _sweep(stack, source, k)
    if k.ndim == 0:
        return {
            (l, tag): complex(sig[l, j, 0])
            for l in range(stack.num_layers)
            for j, tag in enumerate(TAGS)
        }
    return sig


def three_layer_explicit(stack: LayerStack, target: int, source: int, tag: str, k_rho):
    """Closed-form density for a three-layer dielectric stack.

    These are the textbook-style explicit solutions of the two-interface
    problem.  Note two sign conventions that matter: the cross term of kappa
    pairs (eps0-eps1) with (eps1-eps2), and the bottom-layer self term
    attaches the exponential to (eps1-eps0)(eps1+eps2).
    """
    if stack.num_interfaces != 2:
        raise ValueError("explicit forms require exactly two interfaces")
    if not (np.all(stack.a == 1.0) and np.allclose(stack.b, stack.eps, rtol=0, atol=0)):
        raise ValueError("explicit forms assume a=1, b=eps")
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    k = _spectral_array(k_rho)
    e0, e1, e2 = stack.eps
    d0, d1 = stack.interfaces
    e = np.exp(-k * (d0 - d1))
    kappa = 0.5 * ((e0 + e1) * (e1 + e2) + (e0 - e1) * (e1 - e2) * e * e)

    key = (target, source, tag)
    if key == (0, 0, "11"):
        val = ((e0 - e1) * (e1 + e2) + (e0 + e1) * (e1 - e2) * e * e) / (2 * kappa)
    elif key == (1, 0, "11"):
        val = e0 * (e1 - e2) * e / kappa
    elif key == (1, 0, "21"):
        val = e0 * (e1 + e2) / kappa
    elif key == (2, 0, "21"):
        val = 2 * e0 * e1 * e / kappa
    elif key == (0, 1, "11"):
        val = e1 * (e1 - e2) * e / kappa
    elif key == (0, 1, "12"):
        val = e1 * (e1 + e2) / kappa
    elif key == (1, 1, "11"):
        val = (e1 - e2) * (e1 + e0) / (2 * kappa)
    elif key in ((1, 1, "21"), (1, 1, "12")):
        val = (e1 - e2) * (e1 - e0) * e / (2 * kappa)
    elif key == (1, 1, "22"):
        val = (e1 + e2) * (e1 - e0) / (2 * kappa)
    elif key == (2, 1, "21"):
        val = e1 * (e0 + e1) / kappa
    elif key == (2, 1, "22"):
        val = e1 * (e1 - e0) * e / kappa
    elif key == (0, 2, "12"):
        val = 2 * e1 * e2 * e / kappa
    elif key == (1, 2, "12"):
        val = e2 * (e0 + e1) / kappa
    elif key == (1, 2, "22"):
        val = e2 * (e1 - e0) * e / kappa
    elif key == (2, 2, "22"):
        val = ((e2 - e1) * (e1 + e0) + (e1 - e0) * (e1 + e2) * e * e) / (2 * kappa)
    else:
        val = np.zeros_like(k, dtype=float)
    if np.ndim(k_rho) == 0:
        return complex(val)
    return val


@dataclass
class DensityEvaluator:
    """One reaction density sigma(k) with its large-k behavior attached.

    C and zeta satisfy sigma(k) ~ C exp(-k zeta); they feed quadrature
    window placement and the vertical offsets of the scaled integrals.
    Structurally absent components carry C = zeta = 0 and evaluate to 0.
    """

    stack: LayerStack
    target: int
    source: int
    tag: str
    C: float = None
    zeta: float = None

    def __post_init__(self):
        L = self.stack.num_interfaces
        if not (0 <= self.target <= L and 0 <= self.source <= L):
            raise ValueError("layer index out of range")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")
        if self.C is None or self.zeta is None:
            self.C, self.zeta = density_asymptotics(self)

    @property
    def structural_zero(self) -> bool:
        return self.stack.is_structural_zero(self.target, self.source, self.tag)

    @property
    def spectral_span(self) -> float:
        """Depth range of the stack; bounds sigma's oscillation on i*R."""
        d = self.stack.interfaces
        return float(d[0] - d[-1])

    def __call__(self, k_rho):
        k = np.atleast_1d(np.asarray(k_rho))
        if self.structural_zero:
            out = np.zeros(k.shape, dtype=complex if np.iscomplexobj(k) else float)
        else:
            sig = _sweep(self.stack, self.source, k)
            out = sig[self.target, TAGS.index(self.tag)]
        return out[0] if np.ndim(k_rho) == 0 else out


@dataclass
class ConstantDensity:
    """sigma(k) = value; stands in for the free-space kernel (value 1)."""

    value: float = 1.0

    @property
    def C(self):
        return self.value

    @property
    def zeta(self):
        return 0.0

    @property
    def structural_zero(self) -> bool:
        return self.value == 0.0

    @property
    def spectral_span(self) -> float:
        return 0.0

    def __call__(self, k_rho):
        k = np.asarray(k_rho)
        return np.full(k.shape, self.value, dtype=float) if k.ndim else float(self.value)


def _geometric_zeta(ev: DensityEvaluator) -> float:
    """Decay length from the interfaces referenced by the two directions."""
    d = ev.stack.interfaces
    ref_t = d[ev.target] if ev.tag[0] == "1" else d[ev.target - 1]
    ref_s = d[ev.source] if ev.tag[1] == "1" else d[ev.source - 1]
    return abs(float(ref_t - ref_s))


def density_asymptotics(ev: DensityEvaluator):
    """(C, zeta) with sigma(k) ~ C exp(-k zeta) for k -> infinity.

    zeta comes from the interface geometry; a two-point exponential fit at
    k = {50, 100}/min_thickness cross-checks it and wins when they disagree
    (degenerate material combinations can cancel the leading geometric
    term).  C is read off at the larger sample in log space so that small
    densities with large zeta do not underflow.
    """
    if ev.structural_zero:
        return 0.0, 0.0
    zeta = _geometric_zeta(ev)
    dmin = ev.stack.min_thickness()
    k1, k2 = 50.0 / dmin, 100.0 / dmin
    s1 = float(np.real(ev(np.array([k1]))[0]))
    s2 = float(np.real(ev(np.array([k2]))[0]))
    floor = 1e-280
    if abs(s1) < floor or abs(s2) < floor:
        return 0.0, zeta
    zfit = math.log(abs(s1) / abs(s2)) / (k2 - k1)
    zfit = max(zfit, 0.0)
    # prefer the exact geometric value unless the fit contradicts it enough
    # to matter at the sampling scale
    if abs(zfit - zeta) * k2 > 0.2:
        zeta = zfit
    C = math.copysign(math.exp(math.log(abs(s2)) + k2 * zeta), s2)
    return C, zeta
