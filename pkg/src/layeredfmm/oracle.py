"""Dense reference potentials for the acceptance comparisons.

Everything here is deliberately slow: straight pairwise sums for the
Coulomb part and per-pair tightened quadrature for the reaction parts.
To guard against a bug that lives in the shared quadrature machinery
and therefore cancels out of comparisons, every assembled reference
re-derives a sample of mirrored pairs through an unrelated route, a
plain azimuth-by-wavenumber double integral of the unreduced spectral
form, and refuses to hand out numbers if the two disagree.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from layeredfmm.layered_expansions import AbsentComponentError, polarized_height
from layeredfmm.layers import DensityEvaluator, LayerStack
from layeredfmm.sommerfeld import QuadratureRule, batch_i00

_FOUR_PI = 4.0 * math.pi


class CrossCheckError(RuntimeError):
    """Two independent kernel routes disagreed while building a reference."""


@dataclass(frozen=True)
class OracleReport:
    """Reference potentials with the tolerances they were computed at."""

    total: np.ndarray
    free: np.ndarray
    components: dict
    tolerance: float
    claim: float

    def __post_init__(self):
        if not self.tolerance <= self.claim / 100.0:
            raise ValueError(
                f"reference tolerance {self.tolerance:g} is not 100x tighter "
                f"than the claim {self.claim:g}")


def direct_free(positions, strengths):
    """Pairwise Coulomb sum over the given charges, excluding self terms.

    Callers pass one layer's worth of charges; coincident distinct charges
    make the sum meaningless and raise instead of returning inf.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    n = len(pos)
    out = np.zeros(n)
    for a in range(0, n, 512):
        b = min(a + 512, n)
        diff = pos[a:b, None, :] - pos[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        own = np.arange(a, b)
        dist[own - a, own] = np.inf
        if (dist == 0.0).any():
            i, j = np.argwhere(dist == 0.0)[0]
            raise ValueError(f"coincident charges {a + i} and {j}")
        out[a:b] = (q[None, :] / dist).sum(1)
    return out / _FOUR_PI


def _layer_of(stack, positions):
    return np.array([stack.locate(z) for z in positions[:, 2]])


def _mirror_geometry(positions, stack, tag, target_layer, source_layer,
                     layer_of):
    tmask = layer_of == target_layer
    smask = layer_of == source_layer
    img = positions[smask].copy()
    img[:, 2] = polarized_height(img[:, 2], source_layer, target_layer,
                                 tag, stack)
    return tmask, smask, img


def direct_reaction(positions, strengths, stack, tag, target_layer,
                    source_layer, tol=1e-13):
    """One reaction component by brute-force mirrored-pair quadrature.

    Full-length output, zero off the target layer; self terms included.
    Quadrature trouble propagates, an oracle must not paper over it.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    if stack.is_structural_zero(target_layer, source_layer, tag):
        raise AbsentComponentError(
            f"component ({tag}, {target_layer}, {source_layer}) cannot exist")
    layer_of = _layer_of(stack, pos)
    tmask, smask, img = _mirror_geometry(pos, stack, tag, target_layer,
                                         source_layer, layer_of)
    out = np.zeros(len(pos))
    if not (tmask.any() and smask.any()):
        return out
    density = DensityEvaluator(stack, target_layer, source_layer, tag)
    rule = QuadratureRule(tol=tol)
    tgt = pos[tmask]
    qs = q[smask]
    zsign = 1.0 if tag[0] == "1" else -1.0
    vals = np.zeros(len(tgt))
    step = max(1, 400_000 // max(1, len(img)))
    for a in range(0, len(tgt), step):
        b = min(a + step, len(tgt))
        dx = tgt[a:b, None, 0] - img[None, :, 0]
        dy = tgt[a:b, None, 1] - img[None, :, 1]
        rho = np.hypot(dx, dy)
        gap = zsign * (tgt[a:b, None, 2] - img[None, :, 2])
        ker = batch_i00(density, rho.ravel(), gap.ravel(), rule)
        vals[a:b] = (ker.reshape(b - a, -1) * qs[None, :]).sum(1)
    out[tmask] = vals / _FOUR_PI
    return out


def _pair_spectral(density, dxy, zgap):
    """Azimuth x wavenumber double integral for one mirrored pair.

    Independent of the production Sommerfeld path: composite Gauss panels
    on the wavenumber half-line against a periodic trapezoid in the
    azimuth, which is spectrally exact for the plane-wave factor.
    """
    zeff = zgap + density.zeta
    rho = math.hypot(*dxy)
    kcut = 45.0 / zeff
    h = min(zeff / 3.0, 12.0 / (rho + 1e-30), 1.0)
    npan = int(math.ceil(kcut / h))
    xg, wg = leggauss(40)
    edges = np.linspace(0.0, kcut, npan + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    k = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    sig = np.asarray(density(k), dtype=float)
    na = 128 + 8 * int(k[-1] * rho)
    al = np.linspace(0.0, 2.0 * math.pi, na, endpoint=False)
    path = dxy[0] * np.cos(al) + dxy[1] * np.sin(al)
    ring = np.exp(1j * np.outer(k, path)).sum(axis=1) * (2.0 * math.pi / na)
    val = np.sum(w * sig * np.exp(-k * zgap) * ring)
    return val.real / (8.0 * math.pi ** 2)


def crosscheck_component(positions, stack, tag, target_layer, source_layer,
                         pairs=4, rtol=1e-10, seed=0):
    """Compare the two kernel routes on sampled pairs of one component.

    Returns the number of pairs checked; raises CrossCheckError on the
    first disagreement beyond rtol (with a floor for near-zero kernels).
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    layer_of = _layer_of(stack, pos)
    tmask, smask, img = _mirror_geometry(pos, stack, tag, target_layer,
                                         source_layer, layer_of)
    tgt = pos[tmask]
    if len(tgt) == 0 or len(img) == 0:
        return 0
    density = DensityEvaluator(stack, target_layer, source_layer, tag)
    rule = QuadratureRule(tol=1e-13)
    rng = np.random.default_rng(seed)
    zsign = 1.0 if tag[0] == "1" else -1.0
    count = 0
    for _ in range(pairs):
        i = int(rng.integers(len(tgt)))
        j = int(rng.integers(len(img)))
        dxy = (tgt[i, 0] - img[j, 0], tgt[i, 1] - img[j, 1])
        zgap = zsign * (tgt[i, 2] - img[j, 2])
        one = float(batch_i00(density, np.array([math.hypot(*dxy)]),
                              np.array([zgap]), rule)[0]) / _FOUR_PI
        two = _pair_spectral(density, dxy, zgap)
        floor = 1e-14 * (abs(one) + 1.0 / (zgap + density.zeta))
        if abs(one - two) > rtol * abs(two) + floor:
            raise CrossCheckError(
                f"kernel routes disagree for ({tag}, {target_layer}, "
                f"{source_layer}) at rho={math.hypot(*dxy):.6g}, "
                f"gap={zgap:.6g}: {one!r} vs {two!r}")
        count += 1
    return count


def admissible_components(stack):
    """All (tag, target_layer, source_layer) keys the stack supports."""
    L = stack.num_interfaces
    keys = []
    for tag in ("11", "12", "21", "22"):
        tls = range(0, L) if tag[0] == "1" else range(1, L + 1)
        sls = range(0, L) if tag[1] == "1" else range(1, L + 1)
        keys.extend((tag, tl, sl) for tl in tls for sl in sls)
    return keys


def direct_total(positions, strengths, stack, claim=1e-8, crosscheck=20,
                 seed=0):
    """Full reference field: free part plus every admissible component.

    The reaction quadrature runs at min(1e-13, claim/100) so the report
    is always at least two orders tighter than the claim it backs; with
    crosscheck > 0 that many mirrored pairs, spread over the components,
    are re-derived through the independent spectral double integral.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    if len(pos) != len(q):
        raise ValueError("positions and strengths disagree in length")
    tol = min(1e-13, claim / 100.0)
    layer_of = _layer_of(stack, pos)
    free = np.zeros(len(pos))
    for layer in range(stack.num_layers):
        idx = np.flatnonzero(layer_of == layer)
        if idx.size > 1:
            free[idx] = direct_free(pos[idx], q[idx])
    keys = admissible_components(stack)
    components = {}
    total = free.copy()
    for key in keys:
        vals = direct_reaction(pos, q, stack, key[0], key[1], key[2], tol=tol)
        components[key] = vals
        total = total + vals
    if crosscheck > 0:
        per = max(1, crosscheck // len(keys))
        done = 0
        for n, key in enumerate(keys):
            if done >= crosscheck:
                break
            done += crosscheck_component(pos, stack, *key, pairs=per,
                                         seed=seed + n)
    return OracleReport(total=total, free=free, components=components,
                        tolerance=tol, claim=claim)
