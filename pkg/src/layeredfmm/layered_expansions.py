"""Reaction-field expansions over equivalent polarization sources.

Each reaction component of a layered stack is generated by a mirrored copy
of the source cloud placed across the interface nearest the targets.  The
multipole side is then plain free-space machinery; evaluation, point-to-
local, and multipole-to-local instead integrate against the component's
spectral density, which this module reduces to the scaled Sommerfeld
family S^n I_nm.  Physical potentials carry the 1/4pi of the Coulomb
kernel here, unlike the bare free-space operators.
"""

import math
from dataclasses import dataclass

import numpy as np

from .freespace_expansions import Expansion, p2m
from .layers import TAGS, LayerStack
from .sommerfeld import (
    DEFAULT_RULE,
    IntegralRequest,
    QuadratureRule,
    batch_i00,
    integral,
    translation_table,
)
from .specfun import build_constant_tables, flat_index, tri_index

_FOUR_PI = 4.0 * math.pi


class AbsentComponentError(ValueError):
    """Raised for reaction components the stack geometry rules out."""


@dataclass(frozen=True)
class PolarizedSource:
    """One charge mirrored for a given reaction component."""

    tag: str
    position: np.ndarray
    strength: float
    original: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "original",
                           np.asarray(self.original, dtype=float).reshape(3))


def _check_component(stack: LayerStack, target_layer: int, source_layer: int,
                     tag: str):
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    if stack.is_structural_zero(target_layer, source_layer, tag):
        raise AbsentComponentError(
            f"component {tag} does not exist for target layer {target_layer}, "
            f"source layer {source_layer}")


def polarized_height(z, source_layer: int, target_layer: int, tag: str,
                     stack: LayerStack):
    """Mirrored z-coordinate(s) for one reaction component.

    The mirror interface is the one bounding the target layer on the tag's
    𝔞-side; the distance being reflected is measured from the interface of
    the source layer selected by the 𝔟-side.
    """
    _check_component(stack, target_layer, source_layer, tag)
    z = np.asarray(z, dtype=float)
    d = stack.interfaces
    depth = z - d[source_layer] if tag[1] == "1" else d[source_layer - 1] - z
    if tag[0] == "1":
        return d[target_layer] - depth
    return d[target_layer - 1] + depth


def polarize(position, strength: float, source_layer: int, target_layer: int,
             tag: str, stack: LayerStack) -> PolarizedSource:
    """Equivalent polarization source of one charge for one component."""
    position = np.asarray(position, dtype=float).reshape(3)
    zp = float(polarized_height(position[2], source_layer, target_layer,
                                tag, stack))
    mirrored = np.array([position[0], position[1], zp])
    return PolarizedSource(tag, mirrored, float(strength), position)


def _unpack_sources(sources, strengths):
    if strengths is None:
        tags = {s.tag for s in sources}
        if len(tags) != 1:
            raise ValueError("polarized sources carry mixed component tags")
        pos = np.stack([s.position for s in sources])
        q = np.array([s.strength for s in sources])
        return pos, q, tags.pop()
    return np.asarray(sources, dtype=float).reshape(-1, 3), \
        np.asarray(strengths, dtype=float).reshape(-1), None


def _check_source_center(center, tag, stack, target_layer):
    if stack is None:
        return
    d = stack.interfaces
    if tag[0] == "1" and not center[2] < d[target_layer]:
        raise ValueError("multipole center must lie below the mirror "
                         f"interface z={d[target_layer]:g}")
    if tag[0] == "2" and not center[2] > d[target_layer - 1]:
        raise ValueError("multipole center must lie above the mirror "
                         f"interface z={d[target_layer - 1]:g}")


def _check_target_center(center, tag, stack, target_layer):
    if stack is None:
        return
    d = stack.interfaces
    if tag[0] == "1" and not center[2] > d[target_layer]:
        raise ValueError("local center must lie above the mirror "
                         f"interface z={d[target_layer]:g}")
    if tag[0] == "2" and not center[2] < d[target_layer - 1]:
        raise ValueError("local center must lie below the mirror "
                         f"interface z={d[target_layer - 1]:g}")


def reaction_p2m(sources, strengths, center, scale, p, tag=None,
                 stack: LayerStack = None, target_layer: int = None):
    """Multipole table of a polarized cloud; same formula as free space.

    sources may be an (N, 3) array of mirrored positions with explicit
    strengths, or a sequence of PolarizedSource (strengths=None).  When the
    stack and target layer are supplied the center is checked against the
    exponential-decay condition for the tag.
    """
    positions, q, inferred = _unpack_sources(sources, strengths)
    tag = tag if tag is not None else inferred
    if tag is not None and tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    center = np.asarray(center, dtype=float).reshape(3)
    if target_layer is not None:
        if tag is None:
            raise ValueError("center check requires a component tag")
        _check_source_center(center, tag, stack, target_layer)
    return p2m(positions, q, center, scale, p)


def reaction_me_basis(density, tag, offset, scale, p,
                      rule: QuadratureRule = DEFAULT_RULE):
    """Scaled evaluation row: entries pair with multipole coefficients.

    offset = target - multipole center.  Entry (n, m) holds S^n times the
    tag's Sommerfeld basis function, so that dot(coeffs, row) is the
    reaction potential of the expansion at the target.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    offset = np.asarray(offset, dtype=float).reshape(3)
    row = np.zeros((p + 1) ** 2, dtype=complex)
    if density.structural_zero:
        return row
    rho = math.hypot(offset[0], offset[1])
    phi = math.atan2(offset[1], offset[0])
    dz = offset[2] if tag[0] == "1" else -offset[2]
    tabs = build_constant_tables(max(p, 1))
    for n in range(p + 1):
        for m in range(n + 1):
            val = integral(IntegralRequest(n, m, rho, dz, scale, density), rule)
            pref = tabs.c[n] / _FOUR_PI
            if tag[0] == "2":
                pref *= (-1.0) ** (n + m)
            entry = pref * np.exp(1j * m * phi) * val
            row[flat_index(n, m)] = entry
            if m:
                row[flat_index(n, -m)] = (-1) ** m * entry.conjugate()
    return row


def reaction_eval_me(expansion: Expansion, target, tag, density,
                     rule: QuadratureRule = DEFAULT_RULE) -> float:
    """Reaction potential of a polarized multipole expansion at one target."""
    if expansion.kind != "multipole":
        raise ValueError("expected a multipole expansion")
    target = np.asarray(target, dtype=float).reshape(3)
    row = reaction_me_basis(density, tag, target - expansion.center,
                            expansion.scale, expansion.p, rule)
    return float(np.dot(expansion.coeffs, row).real)


def reaction_p2l(sources, strengths, center, scale, p, tag=None, density=None,
                 rule: QuadratureRule = DEFAULT_RULE,
                 stack: LayerStack = None, target_layer: int = None):
    """Local expansion of the reaction field of a polarized cloud.

    Source strengths must be real for the stored conjugate symmetry to
    hold; that is the only case the solver produces.
    """
    positions, q, inferred = _unpack_sources(sources, strengths)
    tag = tag if tag is not None else inferred
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    center = np.asarray(center, dtype=float).reshape(3)
    if target_layer is not None:
        _check_target_center(center, tag, stack, target_layer)
    coeffs = np.zeros((p + 1) ** 2, dtype=complex)
    rel = center - positions
    if density is None or density.structural_zero:
        return Expansion("local", center, scale, p, coeffs, radius=0.0)
    rho = np.hypot(rel[:, 0], rel[:, 1])
    phi = np.arctan2(rel[:, 1], rel[:, 0])
    gap = rel[:, 2] if tag[0] == "1" else -rel[:, 2]
    tabs = build_constant_tables(max(p, 1))
    for n in range(p + 1):
        for m in range(n + 1):
            acc = 0.0 + 0.0j
            for j in range(positions.shape[0]):
                val = integral(IntegralRequest(n, m, float(rho[j]),
                                               float(gap[j]), scale, density),
                               rule)
                acc += q[j] * np.exp(-1j * m * phi[j]) * val
            sign = (-1.0) ** n if tag[0] == "1" else (-1.0) ** m
            entry = sign / (tabs.c[n] * _FOUR_PI) * acc
            coeffs[flat_index(n, m)] = entry
            if m:
                coeffs[flat_index(n, -m)] = (-1) ** m * entry.conjugate()
    radius = float(np.min(np.linalg.norm(rel, axis=1), initial=math.inf))
    return Expansion("local", center, scale, p, coeffs, radius=radius)


@dataclass(frozen=True)
class TranslationBlock:
    """Dense reaction M2L operator between two box centers.

    table holds the scaled entries T_{nm,n'm'} S^{n+n'}; the extra
    (-1)^{n+m} of the downward-mirrored components is applied by apply(),
    not stored.
    """

    tag: str
    source_center: np.ndarray
    target_center: np.ndarray
    scale: float
    p: int
    table: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.table)):
            raise ArithmeticError("translation table has non-finite entries")

    def apply(self, coeffs):
        out = self.table @ np.asarray(coeffs, dtype=complex)
        if self.tag[0] == "2":
            n = np.floor(np.sqrt(np.arange(out.size))).astype(int)
            m = np.arange(out.size) - n * n - n
            out = out * (-1.0) ** (n + m)
        return out


def translation_block(density, tag, source_center, target_center, scale, p,
                      rule: QuadratureRule = DEFAULT_RULE, cache=None,
                      method="auto") -> TranslationBlock:
    """Build the dense M2L table for one source/target center pair.

    The vertical gap must open toward the tag's mirror side; the lateral
    offset must be zero or at least one box size, which keeps the m-order
    recurrence of the integral table stable.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    source_center = np.asarray(source_center, dtype=float).reshape(3)
    target_center = np.asarray(target_center, dtype=float).reshape(3)
    off = target_center - source_center
    rho = math.hypot(off[0], off[1])
    phi = math.atan2(off[1], off[0])
    dz = off[2] if tag[0] == "1" else -off[2]
    tri = translation_table(density, rho, dz, scale, p, rule, cache, method)

    size = (p + 1) ** 2
    ns = np.repeat(np.arange(p + 1), 2 * np.arange(p + 1) + 1)
    ms = np.arange(size) - ns * ns - ns
    N = ns[:, None] + ns[None, :]
    M = ms[None, :] - ms[:, None]
    vals = tri[tri_index(N, np.abs(M))] * np.where(M < 0, (-1.0) ** (-M), 1.0)

    tabs = build_constant_tables(max(p, 1))
    lf = tabs.lognfact
    logq = 0.5 * (np.log(2 * ns[None, :] + 1.0) - np.log(2 * ns[:, None] + 1.0)
                  + lf[N + M] + lf[N - M]
                  - (lf[ns + ms] + lf[ns - ms])[:, None]
                  - (lf[ns + ms] + lf[ns - ms])[None, :])
    sign = (-1.0) ** (ns + ms)[:, None] if tag[0] == "1" else \
        (-1.0) ** ((ns + ms)[:, None] + (ns + ms)[None, :])
    table = sign * np.exp(logq) * np.exp(1j * M * phi) * vals / _FOUR_PI
    return TranslationBlock(tag, source_center, target_center, scale, p, table)


def reaction_m2l(expansion: Expansion, target_center, tag, density,
                 rule: QuadratureRule = DEFAULT_RULE, cache=None,
                 method="auto", stack: LayerStack = None,
                 target_layer: int = None) -> Expansion:
    """Translate a polarized multipole expansion into a target-box local."""
    if expansion.kind != "multipole":
        raise ValueError("expected a multipole expansion")
    target_center = np.asarray(target_center, dtype=float).reshape(3)
    if target_layer is not None:
        _check_source_center(expansion.center, tag, stack, target_layer)
        _check_target_center(target_center, tag, stack, target_layer)
    block = translation_block(density, tag, expansion.center, target_center,
                              expansion.scale, expansion.p, rule, cache, method)
    coeffs = block.apply(expansion.coeffs)
    return Expansion("local", target_center, expansion.scale, expansion.p,
                     coeffs, radius=0.0)


def reaction_near(target, position, strength, tag, density,
                  rule: QuadratureRule = DEFAULT_RULE, cache=None) -> float:
    """Reaction potential of one polarized source at one target."""
    vals = reaction_near_sum(np.asarray(target, dtype=float).reshape(1, 3),
                             np.asarray(position, dtype=float).reshape(1, 3),
                             [strength], tag, density, rule, cache)
    return float(vals[0])


def reaction_near_sum(targets, positions, strengths, tag, density,
                      rule: QuadratureRule = DEFAULT_RULE, cache=None):
    """Direct reaction sums Σ_j (Q_j/4π) I_00 over all target/source pairs.

    This is the near-field kernel of the reaction FMM; all pairs share the
    batched I_00 quadrature.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    q = np.asarray(strengths, dtype=float).reshape(-1)
    if q.shape[0] != positions.shape[0]:
        raise ValueError("positions and strengths must pair up")
    if density.structural_zero or q.size == 0:
        return np.zeros(targets.shape[0])
    diff = targets[:, None, :] - positions[None, :, :]
    rho = np.hypot(diff[:, :, 0], diff[:, :, 1])
    gap = diff[:, :, 2] if tag[0] == "1" else -diff[:, :, 2]
    vals = batch_i00(density, rho, gap, rule, cache)
    return (vals * q[None, :]).sum(axis=1) / _FOUR_PI
