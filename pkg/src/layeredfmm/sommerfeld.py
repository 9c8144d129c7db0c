"""Sommerfeld-type integrals behind the reaction-field operators.

Everything here evaluates members of one family

    S^n I_nm(rho, z) = int_0^inf J_m(k rho) (kS)^n e^{-kz} sigma(k)
                       / sqrt((n+m)! (n-m)!) dk

with sigma a spectral reaction density (or the constant 1).  Two
formulations are used.  On the real axis the integrand decays like
e^{-k (z + zeta)} where zeta is sigma's own decay offset; that form is
well conditioned only while rho <= z + zeta.  Otherwise the contour is
rotated onto the imaginary axis, turning J_m into the decaying K_m and
removing the exponentially large cancellation.

Quadrature is an adaptive trapezoid under a variable change.  The real
axis uses k = exp(t - e^{-t}), double-exponential toward k = 0 with a
single-exponential tail.  On the rotated contour the density is a
bounded oscillation whose frequencies come from the interface depths,
so the tail map there is asymptotically linear, k = W t / (1 - e^{-t});
uniform steps in t then keep a fixed number of points per oscillation
while the K_m factor still cuts the window exponentially.  The node
window grows outward until the weighted integrand falls below a cutoff,
then the step is halved (reusing nodes) until two levels agree.  The
driver accepts vector integrands so that all initial-value integrals of
an M2L translation share one set of nodes.

On top of the plain formulations sits a split evaluation: the leading
exponential mode C e^{-k zeta} of the density integrates in closed form
(it is the constant-density integral at vertical offset z + zeta), so
only the faster-decaying remainder sigma - C e^{-k zeta} is quadratured,
with the pre-subtraction magnitudes kept as an honest error envelope.
The remainder usually tolerates the real axis far beyond the plain
rho <= z + zeta boundary, which is what makes deep-tree translations
affordable.  For a medium whose density is a single exponential the
remainder vanishes and the split is exact with zero nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.special import gammaln, jv, kv

from .specfun import normalized_legendre_table, tri_index

_EPS = float(np.finfo(float).eps)
_TINY = 1e-300
_LN2 = math.log(2.0)
_IPOW = np.array([1.0 + 0.0j, 1.0j, -1.0 + 0.0j, -1.0j])


class RegimeError(ArithmeticError):
    """The requested formulation cannot reach tolerance for this input."""


class RecurrenceStabilityError(ValueError):
    """Order recurrence requested outside its stability region (rho < S)."""


@dataclass(frozen=True)
class IntegralRequest:
    """One integral S^n I_nm(rho, z) against a given density."""

    n: int
    m: int
    rho: float
    z: float
    S: float
    density: object

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise ValueError(f"invalid order pair (n={self.n}, m={self.m})")
        if self.rho < 0.0:
            raise ValueError("rho must be nonnegative")
        if self.S <= 0.0:
            raise ValueError("scale S must be positive")
        if not self.density.structural_zero:
            zeff = self.z_effective
            if zeff < 0.0 or (zeff == 0.0 and self.rho <= 0.0):
                raise ValueError("need z + zeta > 0, or rho > 0 when it is 0")

    @property
    def z_effective(self) -> float:
        return self.z + self.density.zeta


@dataclass(frozen=True)
class QuadratureRule:
    """Policy for the adaptive trapezoid.

    Node/weight sequences are generated lazily around the integrand peak;
    the window cutoff is cut_factor * tol relative to the largest weighted
    sample, and the step is halved at most max_halvings times.
    """

    tol: float = 1e-12
    coarse_step: float = 0.5
    max_halvings: int = 5
    max_nodes: int = 24000
    cut_factor: float = 1e-2


DEFAULT_RULE = QuadratureRule()


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    nodes: int
    envelope: float
    path: str


# ---------------------------------------------------------------------------
# variable changes


def _map_k(t):
    return np.exp(t - np.exp(-t))


def _map_weight(t):
    return _map_k(t) * (1.0 + np.exp(-t))


def _node_center(log_k: float) -> float:
    """Solve t - e^{-t} = log_k so the grid starts on the integrand peak."""
    t = max(log_k, 0.0)
    for _ in range(64):
        e = math.exp(-t)
        g = t - e - log_k
        t = max(t - g / (1.0 + e), -30.0)
        if abs(g) < 1e-12:
            break
    return t


def _linear_map(W: float):
    """Map k = W log(1 + e^{t - e^{-t}}): linear right tail, so uniform
    t-steps keep a fixed number of nodes per oscillation period, and a
    doubly exponential left tail, so the approach to k = 0 costs only a
    handful of nodes."""

    def kmap(t):
        t = np.asarray(t, dtype=float)
        u = t - np.exp(np.minimum(-t, 690.0))
        return W * np.where(u > 36.0, u, np.log1p(np.exp(np.minimum(u, 36.0))))

    def wmap(t):
        t = np.asarray(t, dtype=float)
        et = np.exp(np.minimum(-t, 690.0))
        u = t - et
        # sigmoid(u), evaluated on the safe side of the exponential
        eu = np.exp(np.clip(u, -690.0, 0.0))
        sig = np.where(u >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(u))),
                       eu / (1.0 + eu))
        return W * (1.0 + et) * sig

    return kmap, wmap


def _solve_center(kmap, k_target: float) -> float:
    """Invert a monotone map: t with kmap(t) = k_target, by bisection."""
    lo, hi = -700.0, 1.0
    while float(kmap(np.array([hi]))[0]) < k_target and hi < 1e9:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if float(kmap(np.array([mid]))[0]) < k_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _contour_map(density, z: float, rho: float):
    """Linear-tail map sized so uniform steps resolve every reflected phase.

    The phase rate of the rotated integrand is at most |z| + zeta plus the
    internal oscillation of sigma(i eta), bounded by a few stack spans; W is
    chosen so the reference step 0.125 gives ~10 points per period, capped
    by the K_m decay scale 1/rho so featureless integrands stay cheap.
    """
    span = getattr(density, "spectral_span", 0.0)
    omega = abs(z) + density.zeta + 4.0 * span
    W = 8.0 / rho
    if omega > 0.0:
        W = min(W, 2.0 * math.pi / (10.0 * 0.125 * omega))
    return _linear_map(W)


# ---------------------------------------------------------------------------
# adaptive shared-node trapezoid


def _weighted_rows(fvec, ts, kmap, wmap):
    ts = np.atleast_1d(ts)
    res = fvec(kmap(ts))
    rows, env = res if isinstance(res, tuple) else (res, None)
    w = wmap(ts)[:, None]
    rows = np.asarray(rows) * w
    if not np.all(np.isfinite(rows)):
        raise RegimeError("integrand overflowed; request is outside the "
                          "representable range of this formulation")
    env = np.abs(rows) if env is None else np.asarray(env) * np.abs(w)
    return rows, env


def _adaptive_quadrature(fvec, t_lo, t_hi, rule, kmap=_map_k, wmap=_map_weight,
                         min_step=None):
    """Shared-node trapezoid of a vector integrand over k in (0, inf).

    fvec maps an array of k values to an array (nk, ncomp), optionally
    paired with a nonnegative envelope array of the same shape whose
    integral bounds the roundoff floor (used by the split evaluation,
    where the summed rows are small differences of large terms).
    min_step, when given, is the largest step that resolves the integrand's
    oscillation; agreement between two coarser levels is not trusted.
    Returns (values, envelopes, node_count); values follow fvec's dtype.
    """
    h = rule.coarse_step
    halvings = rule.max_halvings
    if min_step is not None and min_step < h:
        halvings += int(math.ceil(math.log2(h / min_step)))
    nseed = int(math.ceil(max(t_hi - t_lo, 0.0) / h)) + 1
    ts = t_lo + h * np.arange(nseed)
    rows, env = _weighted_rows(fvec, ts, kmap, wmap)
    peak = np.maximum(np.abs(rows).max(axis=0), _TINY)

    blocks = [(rows, env)]
    nodes = rows.shape[0]
    left_t, right_t = ts[0], ts[-1]
    for direction in (1.0, -1.0):
        t = right_t if direction > 0 else left_t
        quiet = 0
        # three consecutive quiet nodes, so an oscillation null cannot
        # close the window early
        while quiet < 3:
            t += direction * h
            row, erow = _weighted_rows(fvec, np.array([t]), kmap, wmap)
            nodes += 1
            if nodes > rule.max_nodes:
                raise RegimeError(f"node budget {rule.max_nodes} exhausted "
                                  "while expanding the quadrature window")
            mag = np.abs(row[0])
            peak = np.maximum(peak, mag)
            blocks.append((row, erow))
            quiet = quiet + 1 if np.all(mag <= rule.cut_factor * rule.tol * peak) else 0
        if direction > 0:
            right_t = t
        else:
            left_t = t

    total = h * sum(b[0].sum(axis=0) for b in blocks)
    envelope = h * sum(b[1].sum(axis=0) for b in blocks)

    # step halving with node reuse: new samples sit at midpoints
    count = int(round((right_t - left_t) / h)) + 1
    for _ in range(halvings):
        mids = left_t + h / 2.0 + h * np.arange(count - 1)
        if nodes + mids.size > rule.max_nodes:
            raise RegimeError(f"node budget {rule.max_nodes} exhausted "
                              "before the trapezoid levels agreed")
        rows, env = _weighted_rows(fvec, mids, kmap, wmap)
        nodes += mids.size
        h /= 2.0
        count = 2 * count - 1
        new_total = total / 2.0 + h * rows.sum(axis=0)
        envelope = envelope / 2.0 + h * env.sum(axis=0)
        err = np.abs(new_total - total)
        total = new_total
        if min_step is not None and h > min_step:
            continue
        # roundoff floor: pairwise summation of `count` terms whose
        # absolute sum is the envelope, accumulated across levels
        floor = (4.0 + 4.0 * math.log2(count)) * _EPS * envelope + _TINY
        if np.all(err <= np.maximum(rule.tol * np.abs(total), floor)):
            return total, envelope, nodes
    raise RegimeError("quadrature levels failed to agree within the "
                      f"halving budget ({nodes} nodes used)")


# ---------------------------------------------------------------------------
# integrand rows


def _log_pair(ns, ms):
    return 0.5 * (gammaln(ns + ms + 1.0) + gammaln(ns - ms + 1.0))


def _real_axis_rows(ns, ms, rho, z, S, density):
    """Vector integrand J_m(k rho) (kS)^n e^{-kz} sigma(k) / sqrt-pair."""
    ns = np.asarray(ns, dtype=float)
    ms = np.asarray(ms)
    shift = ns * math.log(S) - _log_pair(ns, ms)

    def fvec(k):
        sig = np.asarray(density(k))
        logk = np.log(np.maximum(k, _TINY))
        expo = logk[:, None] * ns[None, :] - k[:, None] * z + shift[None, :]
        return jv(ms[None, :], (k * rho)[:, None]) * np.exp(expo) * sig[:, None]

    return fvec


def _contour_rows(ns, ms, rho, z, S, density):
    """Imaginary-axis integrand; complex rows whose sum is (nearly) real."""
    ns = np.asarray(ns, dtype=int)
    ms = np.asarray(ms, dtype=int)
    mabs = np.abs(ms)
    shift = ns * math.log(S) - _log_pair(ns, ms)
    phase = _IPOW[(ns - ms) % 4] / math.pi
    parity = np.where((ns + ms) % 2 == 0, 1.0, -1.0)

    def fvec(eta):
        eta = np.maximum(eta, _TINY)
        osc = np.exp(-1j * eta * z)
        up = osc * np.asarray(density(1j * eta))
        dn = np.conj(osc) * np.asarray(density(-1j * eta))
        bracket = up[:, None] + parity[None, :] * dn[:, None]
        expo = np.log(eta)[:, None] * ns[None, :] + shift[None, :]
        with np.errstate(over="ignore", invalid="ignore"):
            mag = kv(mabs[None, :], (eta * rho)[:, None]) * np.exp(expo)
        bad = ~np.isfinite(mag)
        if np.any(bad):
            # K_m(x) overflows for tiny x at large m; its product with
            # eta^n stays representable, so patch those entries in logs:
            # K_m(x) ~ Gamma(m) 2^{m-1} x^{-m} (1 + x^2 / (4(m-1)))
            bi, bj = np.nonzero(bad)
            mb = mabs[bj].astype(float)
            lx = np.log(np.maximum(eta[bi] * rho, _TINY))
            logk = gammaln(mb) - _LN2 + mb * (_LN2 - lx)
            corr = np.where(mb > 1.0,
                            1.0 + np.exp(2.0 * lx) / np.maximum(4.0 * (mb - 1.0), 1.0),
                            1.0)
            mag[bad] = np.exp(logk + expo[bi, bj]) * corr
        return phase[None, :] * mag * bracket

    return fvec


def _difference(base, sub):
    """Rows of base - sub plus the pre-cancellation envelope."""

    def fvec(k):
        rb = np.asarray(base(k))
        rs = np.asarray(sub(k))
        return rb - rs, np.abs(rb) + np.abs(rs)

    return fvec


# ---------------------------------------------------------------------------
# plain formulations


def cancellation_estimate(req: IntegralRequest) -> float:
    """Envelope-to-value cancellation proxy for the real-axis form.

    The weighted real-axis integrand peaks at a height that exceeds the
    integral value by roughly (rho / (z + zeta))^(n - 1/2); machine epsilon
    times this factor bounds the achievable relative accuracy.
    """
    if req.z_effective <= 0.0:
        return math.inf
    ratio = max(req.rho / req.z_effective, 1.0)
    n_eff = max(req.n, 1)
    logfac = gammaln(req.n + 1.0) - _log_pair(np.array([req.n]),
                                              np.array([req.m]))[0]
    log_est = logfac + (n_eff - 0.5) * math.log(ratio)
    return math.exp(min(log_est, 700.0))


def _zero_result(path: str) -> QuadratureResult:
    return QuadratureResult(0.0, 0, 0.0, path)


def _bessel_step(nmax, rho, z_decay):
    """Largest t-step resolving J_m(k rho) near the integrand peak.

    The weighted rows peak at k ~ (n + 1) / z_decay where the map is
    nearly exponential, so the local Bessel phase advances by about
    rho * k per unit t; ten nodes per period is the working resolution.
    Beyond the peak the amplitude decays fast enough that undersampling
    the phase no longer moves the total.
    """
    freq = rho * (nmax + 1.0) / z_decay
    if freq <= 0.0:
        return None
    return 2.0 * math.pi / (10.0 * freq)


def real_axis(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> QuadratureResult:
    if req.density.structural_zero:
        return _zero_result("structural-zero")
    if req.rho == 0.0 and req.m != 0:
        return _zero_result("axis-zero")
    est = cancellation_estimate(req)
    if _EPS * est > 1e6 * rule.tol:
        raise RegimeError(
            f"real-axis cancellation ~{est:.2e} cannot reach tol={rule.tol:.1e}; "
            "use the contour formulation")
    center = _node_center(math.log(max(req.n, 1) / req.z_effective))
    fvec = _real_axis_rows([req.n], [req.m], req.rho, req.z, req.S, req.density)
    total, env, nodes = _adaptive_quadrature(
        fvec, center, center, rule,
        min_step=_bessel_step(req.n, req.rho, req.z_effective))
    return QuadratureResult(float(total[0].real), nodes, float(env[0]), "real-axis")


def contour(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> QuadratureResult:
    if req.density.structural_zero:
        return _zero_result("structural-zero")
    if req.rho <= 0.0:
        raise ValueError("contour formulation needs rho > 0 (K_m blows up at 0)")
    kmap, wmap = _contour_map(req.density, req.z, req.rho)
    center = _solve_center(kmap, max(req.n, 1) / req.rho)
    fvec = _contour_rows([req.n], [req.m], req.rho, req.z, req.S, req.density)
    # the window map is scaled so h = 0.125 resolves every phase present
    total, env, nodes = _adaptive_quadrature(fvec, center, center, rule,
                                             kmap, wmap, min_step=0.125)
    _check_imag(total, env)
    return QuadratureResult(float(total[0].real), nodes, float(env[0]), "contour")


def _check_imag(total, envelope):
    resid = np.abs(total.imag)
    bound = np.maximum(1e-10 * np.abs(total.real), 64.0 * _EPS * envelope + _TINY)
    if np.any(resid > bound):
        worst = float(np.max(resid / np.maximum(bound, _TINY)))
        raise RegimeError("imaginary residual of the rotated integral did not "
                          f"cancel ({worst:.1f}x the allowance)")


def dispatch(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> QuadratureResult:
    """Route to the benign formulation: real axis iff rho <= z + zeta."""
    if req.density.structural_zero:
        return _zero_result("structural-zero")
    if req.rho == 0.0:
        if req.m != 0:
            return _zero_result("axis-zero")
        return real_axis(req, rule)
    if req.rho <= req.z_effective:
        return real_axis(req, rule)
    return contour(req, rule)


def integral_real_axis(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> float:
    return real_axis(req, rule).value


def integral_contour(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> float:
    return contour(req, rule).value


def integral(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> float:
    return dispatch(req, rule).value


# ---------------------------------------------------------------------------
# split evaluation: closed leading mode + quadrature of the remainder


@dataclass(frozen=True)
class _ExponentialMode:
    """Single-mode stand-in density C e^{-k zeta}; accepts complex k."""

    C: float
    zeta: float

    def __call__(self, k):
        return self.C * np.exp(-np.asarray(k) * self.zeta)


def _remainder_profile(density):
    """(magnitude, decay offset) of sigma(k) - C e^{-k zeta}, memoized.

    A zero magnitude means the density IS a single exponential mode to
    machine precision, so the split needs no quadrature at all.  The
    offset is a sampled two-point fit; it only steers dispatch and
    window placement, so contamination by deeper modes is harmless.
    """
    try:
        return density._remainder_fit
    except AttributeError:
        pass
    stack = getattr(density, "stack", None)
    dmin = stack.min_thickness() if stack is not None else 1.0
    ks = np.array([1.0, 4.0, 8.0, 16.0]) / dmin
    sig = np.asarray(density(ks), dtype=float)
    lead = density.C * np.exp(-ks * density.zeta)
    resid = np.abs(sig - lead)
    if np.all(resid <= 32.0 * _EPS * np.abs(lead) + _TINY):
        fit = (0.0, math.inf)
    else:
        alive = np.nonzero(resid > 1e-250)[0]
        if alive.size >= 2:
            i, j = alive[-2], alive[-1]
            rate = math.log(resid[i] / resid[j]) / (ks[j] - ks[i])
        else:
            rate = density.zeta + 2.0 * dmin
        fit = (float(resid.max()), max(rate, density.zeta))
    object.__setattr__(density, "_remainder_fit", fit)
    return fit


def _mode_closed(req: IntegralRequest) -> float:
    """Closed value of the leading-mode part: the sigma == 1 identity
    S^n I_nm = sqrt(4 pi / (2n+1)) phat_n^m(v) S^n / r^{n+1} at z + zeta."""
    zeff = req.z_effective
    r = math.hypot(req.rho, zeff)
    surf = _leading_surface(np.array([req.n]), np.array([req.m]),
                            np.array([zeff / r]))[0, 0]
    return req.density.C * surf * math.exp(req.n * math.log(req.S)
                                           - (req.n + 1.0) * math.log(r))


def leading_split(req: IntegralRequest, rule: QuadratureRule = DEFAULT_RULE) -> QuadratureResult:
    """Closed leading mode plus adaptive quadrature of the fast remainder."""
    den = req.density
    if den.structural_zero:
        return _zero_result("structural-zero")
    if req.rho == 0.0 and req.m != 0:
        return _zero_result("axis-zero")
    lead = _mode_closed(req)
    r_mag, r_zeta = _remainder_profile(den)
    if r_mag == 0.0:
        return QuadratureResult(lead, 0, abs(lead), "split-closed")
    mode = _ExponentialMode(den.C, den.zeta)
    ns, ms = np.array([req.n]), np.array([req.m])
    zR = req.z + r_zeta
    if req.rho <= zR:
        fvec = _difference(_real_axis_rows(ns, ms, req.rho, req.z, req.S, den),
                           _real_axis_rows(ns, ms, req.rho, req.z, req.S, mode))
        center = _node_center(math.log(max(req.n, 1) / zR))
        total, env, nodes = _adaptive_quadrature(
            fvec, center, center, rule, min_step=_bessel_step(req.n, req.rho, zR))
        return QuadratureResult(lead + float(total[0].real), nodes,
                                float(env[0]) + abs(lead), "split-real")
    kmap, wmap = _contour_map(den, req.z, req.rho)
    fvec = _difference(_contour_rows(ns, ms, req.rho, req.z, req.S, den),
                       _contour_rows(ns, ms, req.rho, req.z, req.S, mode))
    center = _solve_center(kmap, max(req.n, 1) / req.rho)
    total, env, nodes = _adaptive_quadrature(fvec, center, center, rule,
                                             kmap, wmap, min_step=0.125)
    _check_imag(total, env)
    return QuadratureResult(lead + float(total[0].real), nodes,
                            float(env[0]) + abs(lead), "split-contour")


# ---------------------------------------------------------------------------
# initial-value columns, order recurrence, batched kernels


def initial_columns(density, rho, z, S, p, rule: QuadratureRule = DEFAULT_RULE,
                    cache=None, method="auto"):
    """Scaled m=0 and m=1 columns: S^n I_n0 (n <= 2p) and S^n I_n1 (1 <= n <= 2p).

    The m=1 column stores a leading 0 so both share the index n.  All
    entries of one call ride a single adaptive node set.  method "auto"
    applies the leading-mode split; "direct" forces plain quadrature of
    the full density.  With a cache the quadrature is replaced by surface
    interpolation.
    """
    nmax = 2 * p
    col0 = np.zeros(nmax + 1)
    col1 = np.zeros(nmax + 1)
    if density.structural_zero:
        return col0, col1
    if cache is not None and cache.covers(rho, z):
        return cache.initial_columns(rho, z, S)
    zeff = z + density.zeta
    if zeff < 0.0 or (zeff == 0.0 and rho <= 0.0):
        raise ValueError("need z + zeta > 0, or rho > 0 when it is 0")
    if method == "auto":
        return _split_columns(density, rho, z, S, p, rule)
    if method != "direct":
        raise ValueError(f"unknown column method {method!r}")

    if rho == 0.0:
        ns = np.arange(nmax + 1)
        ms = np.zeros(nmax + 1, dtype=int)
        fvec = _real_axis_rows(ns, ms, 0.0, z, S, density)
        lo = _node_center(math.log(1.0 / zeff))
        hi = _node_center(math.log(max(nmax, 1) / zeff))
        total, _, _ = _adaptive_quadrature(fvec, lo, hi, rule)
        col0[:] = total.real
        return col0, col1

    ns = np.concatenate([np.arange(nmax + 1), np.arange(1, nmax + 1)])
    ms = np.concatenate([np.zeros(nmax + 1, dtype=int), np.ones(nmax, dtype=int)])
    if rho <= zeff:
        worst = IntegralRequest(nmax, 0, rho, z, S, density)
        est = cancellation_estimate(worst)
        if _EPS * est > 1e6 * rule.tol:
            raise RegimeError("real-axis cancellation too large for the "
                              "initial-value columns")
        fvec = _real_axis_rows(ns, ms, rho, z, S, density)
        lo = _node_center(math.log(1.0 / zeff))
        hi = _node_center(math.log(max(nmax, 1) / zeff))
        total, _, _ = _adaptive_quadrature(fvec, lo, hi, rule,
                                           min_step=_bessel_step(nmax, rho, zeff))
        vals = total.real
    else:
        kmap, wmap = _contour_map(density, z, rho)
        fvec = _contour_rows(ns, ms, rho, z, S, density)
        lo = _solve_center(kmap, 1.0 / rho)
        hi = _solve_center(kmap, max(nmax, 1) / rho)
        total, env, _ = _adaptive_quadrature(fvec, lo, hi, rule, kmap, wmap,
                                             min_step=0.125)
        _check_imag(total, env)
        vals = total.real
    col0[:] = vals[: nmax + 1]
    col1[1:] = vals[nmax + 1:]
    return col0, col1


def _split_columns(density, rho, z, S, p, rule):
    nmax = 2 * p
    ns, ms = _cache_components(p)
    zeff = z + density.zeta
    r = math.hypot(rho, zeff)
    lead = density.C * _leading_surface(ns, ms, np.array([zeff / r]))[:, 0] \
        * np.exp(ns * math.log(S) - (ns + 1.0) * math.log(r))
    r_mag, r_zeta = _remainder_profile(density)
    vals = lead
    if r_mag != 0.0:
        mode = _ExponentialMode(density.C, density.zeta)
        zR = z + r_zeta
        if rho <= zR:
            fvec = _difference(_real_axis_rows(ns, ms, rho, z, S, density),
                               _real_axis_rows(ns, ms, rho, z, S, mode))
            lo = _node_center(math.log(1.0 / zR))
            hi = _node_center(math.log(max(nmax, 1) / zR))
            total, _, _ = _adaptive_quadrature(
                fvec, lo, hi, rule, min_step=_bessel_step(nmax, rho, zR))
            vals = lead + total.real
        else:
            kmap, wmap = _contour_map(density, z, rho)
            fvec = _difference(_contour_rows(ns, ms, rho, z, S, density),
                               _contour_rows(ns, ms, rho, z, S, mode))
            lo = _solve_center(kmap, 1.0 / rho)
            hi = _solve_center(kmap, max(nmax, 1) / rho)
            total, env, _ = _adaptive_quadrature(fvec, lo, hi, rule, kmap, wmap,
                                                 min_step=0.125)
            _check_imag(total, env)
            vals = lead + total.real
    col0 = vals[: nmax + 1].copy()
    col1 = np.zeros(nmax + 1)
    col1[1:] = vals[nmax + 1:]
    return col0, col1


def recurrence_fill(col0, col1, rho, S):
    """Full triangular table S^n I_nm (0 <= m <= n <= nmax) from two columns.

    Works upward in the order m; stable because each step multiplies by
    2m S / (rho a_{n+m}) < 1 whenever rho >= S.  Accepts stacked columns
    (nmax+1, K) with rho of shape (K,) to fill many translations at once.
    rho = 0 short-circuits: every m > 0 entry is exactly zero.
    """
    col0 = np.asarray(col0, dtype=float)
    col1 = np.asarray(col1, dtype=float)
    if col0.shape != col1.shape:
        raise ValueError("initial columns must have equal length")
    single = col0.ndim == 1
    if single:
        col0 = col0[:, None]
        col1 = col1[:, None]
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (col0.shape[1],))
    nmax = col0.shape[0] - 1
    table = np.zeros((tri_index(nmax, nmax) + 1, col0.shape[1]))
    ns_all = np.arange(nmax + 1)
    table[tri_index(ns_all, 0)] = col0
    live = rho > 0.0
    if np.any(live & (rho < S * (1.0 - 1e-12))):
        bad = float(rho[live & (rho < S * (1.0 - 1e-12))][0])
        raise RecurrenceStabilityError(
            f"forward recurrence needs rho >= S (rho={bad:g}, S={S:g})")
    if np.any(live) and nmax >= 1:
        table[tri_index(ns_all[1:], 1)] = np.where(live, col1[1:], 0.0)
        a = np.sqrt(np.arange(2 * nmax + 1) * (np.arange(2 * nmax + 1) + 1.0))
        ratio = np.where(live, S / np.where(live, rho, 1.0), 0.0)
        for m in range(1, nmax):
            ns = np.arange(m + 1, nmax + 1)
            nxt = ((2.0 * m * ratio) / a[ns + m, None] * table[tri_index(ns - 1, m)]
                   - (a[ns - m] / a[ns + m])[:, None] * table[tri_index(ns, m - 1)])
            table[tri_index(ns, m + 1)] = np.where(live, nxt, 0.0)
    return table[:, 0] if single else table


def translation_table(density, rho, z, S, p, rule: QuadratureRule = DEFAULT_RULE,
                      cache=None, method="auto"):
    """Scaled S^n I_nm for all 0 <= m <= n <= 2p at one (rho, z) offset."""
    col0, col1 = initial_columns(density, rho, z, S, p, rule, cache, method)
    return recurrence_fill(col0, col1, rho, S)


def _pair_rows_i00(rho_v, z_v, density):
    """Rows J_0(k rho_j) e^{-k z_j} sigma(k) across a batch of offsets."""

    def fvec(k):
        sig = np.asarray(density(k))
        arg = k[:, None] * rho_v[None, :]
        return jv(0, arg) * np.exp(-k[:, None] * z_v[None, :]) * sig[:, None]

    return fvec


def batch_i00(density, rho, z, rule: QuadratureRule = DEFAULT_RULE, cache=None,
              chunk=4096):
    """Unscaled I_00 for paired (rho, z) arrays; the near-field kernel.

    Points covered by the cache interpolate; the rest split off the closed
    leading mode and integrate the remainder in shared-node chunks (sorted
    by window scale), falling back to per-point contour evaluation for
    offsets too wide for the real axis.
    """
    rho = np.asarray(rho, dtype=float)
    z = np.asarray(z, dtype=float)
    if rho.shape != z.shape:
        raise ValueError("rho and z must be congruent")
    out = np.zeros(rho.shape)
    if density.structural_zero:
        return out
    flat_r = rho.ravel()
    flat_z = z.ravel()
    flat_o = out.ravel()
    pending = np.ones(flat_r.size, dtype=bool)
    if cache is not None:
        hit = cache.covers(flat_r, flat_z) & pending
        if np.any(hit):
            flat_o[hit] = cache.i00(flat_r[hit], flat_z[hit])
            pending &= ~hit
    idx = np.nonzero(pending)[0]
    if idx.size == 0:
        return out

    zeff = flat_z[idx] + density.zeta
    if np.any(zeff < 0.0) or np.any((zeff == 0.0) & (flat_r[idx] <= 0.0)):
        raise ValueError("need z + zeta > 0, or rho > 0 when it is 0")
    lead = density.C / np.hypot(flat_r[idx], zeff)
    r_mag, r_zeta = _remainder_profile(density)
    if r_mag == 0.0:
        flat_o[idx] = lead
        return out

    zR = flat_z[idx] + r_zeta
    wide = flat_r[idx] > zR
    for i in np.nonzero(wide)[0]:
        req = IntegralRequest(0, 0, float(flat_r[idx[i]]), float(flat_z[idx[i]]),
                              1.0, density)
        flat_o[idx[i]] = leading_split(req, rule).value

    narrow = np.nonzero(~wide)[0]
    mode = _ExponentialMode(density.C, density.zeta)
    order = narrow[np.argsort(zR[narrow])]
    for lo in range(0, order.size, chunk):
        blk = order[lo: lo + chunk]
        sel = idx[blk]
        fvec = _difference(_pair_rows_i00(flat_r[sel], flat_z[sel], density),
                           _pair_rows_i00(flat_r[sel], flat_z[sel], mode))
        t_lo = _node_center(math.log(1.0 / zR[blk].max()))
        t_hi = _node_center(math.log(1.0 / zR[blk].min()))
        total, _, _ = _adaptive_quadrature(fvec, t_lo, t_hi, rule)
        flat_o[sel] = lead[blk] + total.real
    return out


# ---------------------------------------------------------------------------
# interpolation cache for the initial-value surfaces


def _leading_surface(ns, ms, v):
    """Closed form of r^(n+1) I_nm for sigma == 1: sqrt(4pi/(2n+1)) phat(v)."""
    nmax = int(np.max(ns))
    tables = normalized_legendre_table(nmax, np.asarray(v, dtype=float))
    rows = tables[tri_index(np.asarray(ns), np.abs(np.asarray(ms)))]
    pref = np.sqrt(4.0 * math.pi / (2.0 * np.asarray(ns) + 1.0))
    sign = np.where(np.asarray(ms) < 0, (-1.0) ** np.abs(np.asarray(ms)), 1.0)
    return (pref * sign)[:, None] * rows


@dataclass
class TableCache:
    """Cubic-spline surfaces of the m = 0, 1 initial values of one density.

    The stored quantity is the residual r^(n+1) I_nm minus the analytic
    large-k part C * sqrt(4pi/(2n+1)) phat_n^m(cos theta), on a uniform
    (log r, theta) grid with r = hypot(rho, z + zeta) and
    cos theta = (z + zeta)/r.  The residual decays with box size, so deep
    in a tree these surfaces are tiny and easy to interpolate; queries add
    the analytic part back.
    """

    density: object
    p: int
    r_lo: float
    r_hi: float
    v_floor: float
    u_grid: np.ndarray
    th_grid: np.ndarray
    data: np.ndarray            # (ncomp, nu, nth) residual surfaces
    splines: list               # per-component bicubic interpolants
    scales: np.ndarray          # per-surface magnitude of the full value
    ns: np.ndarray
    ms: np.ndarray
    build_nodes: int
    verify_error: float

    def covers(self, rho, z):
        rho = np.asarray(rho, dtype=float)
        z = np.asarray(z, dtype=float)
        zeff = z + self.density.zeta
        r = np.hypot(rho, zeff)
        ok = (zeff > 0) & (r >= self.r_lo) & (r <= self.r_hi)
        return ok & (zeff >= self.v_floor * r)

    def _raw_query(self, rho, z):
        """Residual surfaces at query points: array (ncomp, npts)."""
        zeff = np.asarray(z, dtype=float) + self.density.zeta
        rho = np.asarray(rho, dtype=float)
        r = np.hypot(rho, zeff)
        u = np.log(r)
        th = np.arccos(np.clip(zeff / r, -1.0, 1.0))
        du = self.u_grid[1] - self.u_grid[0]
        dth = self.th_grid[1] - self.th_grid[0]
        iu = (u - self.u_grid[0]) / du
        ith = th / dth
        out = np.empty((self.data.shape[0], r.size))
        for c, spl in enumerate(self.splines):
            out[c] = spl.ev(u, th)
        # exact stored values when a query lands on a grid node
        on_u = np.abs(iu - np.round(iu)) < 1e-9
        on_th = np.abs(ith - np.round(ith)) < 1e-9
        snap = on_u & on_th
        if np.any(snap):
            ju = np.round(iu[snap]).astype(int)
            jt = np.round(ith[snap]).astype(int)
            out[:, snap] = self.data[:, ju, jt]
        return out, r, zeff / r

    def values(self, rho, z):
        """Unscaled I_nm (all cached components) at paired query points."""
        res, r, v = self._raw_query(np.atleast_1d(rho), np.atleast_1d(z))
        full = res + self.density.C * _leading_surface(self.ns, self.ms, v)
        return full * np.exp(-(self.ns[:, None] + 1.0) * np.log(r)[None, :])

    def initial_columns(self, rho, z, S):
        nmax = 2 * self.p
        res, r, v = self._raw_query(np.atleast_1d(float(rho)), np.atleast_1d(float(z)))
        full = (res + self.density.C * _leading_surface(self.ns, self.ms, v))[:, 0]
        scale = np.exp(self.ns * math.log(S) - (self.ns + 1.0) * math.log(r[0]))
        vals = full * scale
        col0 = vals[: nmax + 1].copy()
        col1 = np.zeros(nmax + 1)
        col1[1:] = vals[nmax + 1:]
        return col0, col1

    def initial_columns_batch(self, rho, z, S):
        """Columns for many offsets at once: arrays (nmax+1, npts)."""
        nmax = 2 * self.p
        vals = self.values(rho, z) * np.exp(self.ns * math.log(S))[:, None]
        col0 = vals[: nmax + 1]
        col1 = np.zeros_like(col0)
        col1[1:] = vals[nmax + 1:]
        return col0, col1

    def i00(self, rho, z):
        res, r, v = self._raw_query(np.asarray(rho, dtype=float),
                                    np.asarray(z, dtype=float))
        return (res[0] + self.density.C) / r


def _cache_components(p):
    nmax = 2 * p
    ns = np.concatenate([np.arange(nmax + 1), np.arange(1, nmax + 1)])
    ms = np.concatenate([np.zeros(nmax + 1, dtype=int), np.ones(nmax, dtype=int)])
    return ns, ms


def build_table_cache(density, r_lo, r_hi, p, rule: QuadratureRule = DEFAULT_RULE,
                      v_floor=5e-3, target=1e-8, nu0=None, nth0=None,
                      max_grid=600_000, verify_points=48, seed=0):
    """Sample the initial-value surfaces and refine until interpolation is
    trustworthy.

    The grid doubles along whichever axis fails a staggered spot check
    against direct quadrature, so the final resolution adapts to how much
    of the density's structure survives the analytic subtraction.
    """
    if not (0 < r_lo < r_hi):
        raise ValueError("need 0 < r_lo < r_hi")
    if density.structural_zero:
        raise ValueError("no cache for a structurally absent density")
    ns, ms = _cache_components(p)
    th_hi = math.acos(v_floor)
    width = math.log(r_hi / r_lo)
    nu = nu0 or max(8, int(math.ceil(width / 0.1)) + 1)
    nth = nth0 or max(17, 4 * p + 5)
    rng = np.random.default_rng(seed)
    uq = rng.uniform(math.log(r_lo), math.log(r_hi), size=verify_points)
    tq = rng.uniform(0.0, th_hi, size=verify_points)
    build_nodes = 0

    while True:
        if nu * nth > max_grid:
            raise RegimeError("interpolation grid exceeded its size budget "
                              "before reaching the target accuracy")
        u_grid = np.linspace(math.log(r_lo), math.log(r_hi), nu)
        th_grid = np.linspace(0.0, th_hi, nth)
        data = np.empty((ns.size, nu, nth))
        for i, u in enumerate(u_grid):
            r = math.exp(u)
            for j, th in enumerate(th_grid):
                data[:, i, j] = _surface_point(density, r, th, p, rule)
                build_nodes += 1
        scales = np.maximum(np.abs(data).max(axis=(1, 2)),
                            abs(density.C) * np.abs(
                                _leading_surface(ns, ms, np.cos(th_grid))).max(axis=1))
        scales = np.maximum(scales, _TINY)
        splines = [RectBivariateSpline(u_grid, th_grid, d, kx=3, ky=3, s=0)
                   for d in data]
        cache = TableCache(density, p, r_lo, r_hi, v_floor, u_grid, th_grid,
                           data, splines, scales, ns, ms, build_nodes, math.nan)

        err_u = _verify_cache(cache, uq, np.round(tq / (th_grid[1] - th_grid[0]))
                              * (th_grid[1] - th_grid[0]), p, rule)
        err_t = _verify_cache(cache, np.round((uq - u_grid[0]) / (u_grid[1] - u_grid[0]))
                              * (u_grid[1] - u_grid[0]) + u_grid[0], tq, p, rule)
        if max(err_u, err_t) <= target:
            cache.verify_error = max(err_u, err_t)
            return cache
        if err_u > target:
            nu = 2 * nu - 1
        if err_t > target:
            nth = 2 * nth - 1


def _surface_point(density, r, th, p, rule):
    """Residual surface values r^(n+1) I_nm - C*closed at one grid point."""
    rho = r * math.sin(th)
    z = r * math.cos(th) - density.zeta
    col0, col1 = initial_columns(density, rho, z, 1.0, p, rule)
    ns, ms = _cache_components(p)
    vals = np.concatenate([col0, col1[1:]])
    full = vals * np.exp((ns + 1.0) * math.log(r))
    lead = density.C * _leading_surface(ns, ms, np.array([math.cos(th)]))[:, 0]
    return full - lead


def _verify_cache(cache, uq, tq, p, rule):
    """Worst interpolation error (surface units, relative to each scale)."""
    tq = np.clip(tq, 0.0, cache.th_grid[-1])
    uq = np.clip(uq, cache.u_grid[0], cache.u_grid[-1])
    worst = 0.0
    for u, th in zip(uq, tq):
        r = math.exp(u)
        direct = _surface_point(cache.density, r, th, p, rule)
        res, _, _ = cache._raw_query(np.array([r * math.sin(th)]),
                                     np.array([r * math.cos(th) - cache.density.zeta]))
        err = np.abs(res[:, 0] - direct) / cache.scales
        worst = max(worst, float(err.max()))
    return worst
