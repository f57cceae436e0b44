"""Equilibrium bidding in first-price procurement auctions.

Costs are private and independent; the lowest bid wins and is paid. A type-k
bidder facing ``n_k - 1`` rivals of its own type and ``n_k'`` of the other
type bids so that

    b - phi_k(b) = 1 / [(n_k - 1) psi_k(b) + n_k' psi_k'(b)],

with ``phi_k`` the inverse strategy and ``psi_j = g_j / (1 - G_j)`` the bid
hazard of type j. Both strategies meet at the common top ``phi_k(c_hi) = c_hi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, optimize, special

_SQRT2 = math.sqrt(2.0)


class EquilibriumError(RuntimeError):
    """The asymmetric solver could not produce a valid equilibrium."""

    def __init__(self, message: str, best_residual: float = math.inf):
        super().__init__(f"{message} (best residual {best_residual:.3g})")
        self.best_residual = best_residual


@dataclass(frozen=True)
class CostFamily:
    """Base-scale cost distribution on ``[lo, hi]``.

    ``kind`` is ``"uniform"``, ``"power"`` (``F = t**shape`` on the unit
    rescaling ``t``) or ``"truncnormal"`` (``mu``, ``sigma`` before truncation).
    Project costs are ``X * c`` for engineer's estimate ``X``.
    """

    kind: str = "uniform"
    lo: float = 0.0
    hi: float = 1.0
    shape: float = 1.0
    mu: float = 0.5
    sigma: float = 0.25

    def __post_init__(self):
        if self.kind not in ("uniform", "power", "truncnormal"):
            raise ValueError(f"unknown cost family {self.kind!r}")
        if not self.lo < self.hi:
            raise ValueError("cost support needs lo < hi")
        if self.kind == "power" and not self.shape > 0:
            raise ValueError("power family needs shape > 0")
        if self.kind == "truncnormal" and not self.sigma > 0:
            raise ValueError("truncnormal family needs sigma > 0")

    @cached_property
    def _tn(self) -> tuple[float, float]:
        a = 0.5 * math.erfc(-(self.lo - self.mu) / (self.sigma * _SQRT2))
        b = 0.5 * math.erfc(-(self.hi - self.mu) / (self.sigma * _SQRT2))
        return a, b - a

    # scalar versions keep the ODE loop cheap
    def cdf1(self, c: float) -> float:
        if c <= self.lo:
            return 0.0
        if c >= self.hi:
            return 1.0
        t = (c - self.lo) / (self.hi - self.lo)
        if self.kind == "uniform":
            return t
        if self.kind == "power":
            return t**self.shape
        a, z = self._tn
        return (0.5 * math.erfc(-(c - self.mu) / (self.sigma * _SQRT2)) - a) / z

    def pdf1(self, c: float) -> float:
        if c < self.lo or c > self.hi:
            return 0.0
        w = self.hi - self.lo
        if self.kind == "uniform":
            return 1.0 / w
        if self.kind == "power":
            t = (c - self.lo) / w
            return self.shape * t ** (self.shape - 1) / w if t > 0 else (math.inf if self.shape < 1 else self.shape / w)
        _, z = self._tn
        u = (c - self.mu) / self.sigma
        return math.exp(-0.5 * u * u) / (self.sigma * math.sqrt(2 * math.pi) * z)

    def cdf(self, c):
        c = np.asarray(c, dtype=float)
        t = np.clip((c - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        if self.kind == "uniform":
            return t
        if self.kind == "power":
            return t**self.shape
        a, z = self._tn
        v = (special.ndtr((c - self.mu) / self.sigma) - a) / z
        return np.clip(v, 0.0, 1.0)

    def pdf(self, c):
        c = np.asarray(c, dtype=float)
        inside = (c >= self.lo) & (c <= self.hi)
        w = self.hi - self.lo
        if self.kind == "uniform":
            v = np.full_like(c, 1.0 / w)
        elif self.kind == "power":
            t = np.clip((c - self.lo) / w, 0.0, 1.0)
            with np.errstate(divide="ignore"):
                v = self.shape * t ** (self.shape - 1) / w
        else:
            _, z = self._tn
            v = np.exp(-0.5 * ((c - self.mu) / self.sigma) ** 2) / (self.sigma * math.sqrt(2 * math.pi) * z)
        return np.where(inside, v, 0.0)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        w = self.hi - self.lo
        if self.kind == "uniform":
            return self.lo + w * q
        if self.kind == "power":
            return self.lo + w * q ** (1.0 / self.shape)
        a, z = self._tn
        return np.clip(self.mu + self.sigma * special.ndtri(a + q * z), self.lo, self.hi)

    def dlogpdf_hi(self) -> float:
        """Slope of ``log f`` at the upper endpoint."""
        if self.kind == "uniform":
            return 0.0
        if self.kind == "power":
            return (self.shape - 1.0) / (self.hi - self.lo)
        return -(self.hi - self.mu) / self.sigma**2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.ppf(rng.random(size))


def _check_cost(c: float, F: CostFamily) -> None:
    if not (F.lo <= c <= F.hi):
        raise ValueError(f"cost {c} outside support [{F.lo}, {F.hi}]")


def _survival_integral(c: float, n: int, F: CostFamily) -> float:
    if F.kind == "uniform":
        # closed form of int_c^hi ((hi-u)/w)^(n-1) du
        w = F.hi - F.lo
        return (F.hi - c) ** n / (n * w ** (n - 1))
    val, _ = integrate.quad(lambda u: (1.0 - F.cdf1(u)) ** (n - 1), c, F.hi, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def symmetric_equilibrium_bid(c: float, n: int, F: CostFamily, *, numeric: bool = False) -> float:
    """Symmetric equilibrium bid ``c + int_c^hi S(u)^(n-1) du / S(c)^(n-1)``.

    ``numeric=True`` forces quadrature even for the uniform family.
    """
    _check_cost(c, F)
    if n < 2:
        raise ValueError("need at least two bidders")
    if c >= F.hi:
        return F.hi
    if F.kind == "uniform" and not numeric:
        return c + (F.hi - c) / n
    S = 1.0 - F.cdf1(c)
    if numeric and F.kind == "uniform":
        val, _ = integrate.quad(lambda u: (1.0 - F.cdf1(u)) ** (n - 1), c, F.hi, epsabs=1e-14, epsrel=1e-12)
    else:
        val = _survival_integral(c, n, F)
    return c + val / S ** (n - 1)


def symmetric_bid_slope(c: float, n: int, F: CostFamily) -> float:
    """Derivative of the symmetric strategy, ``(n-1) f(c) I(c) / S(c)^n``."""
    if F.kind == "uniform":
        return (n - 1) / n
    S = 1.0 - F.cdf1(c)
    return (n - 1) * F.pdf1(c) * _survival_integral(c, n, F) / S**n


def symmetric_inverse(b: float, n: int, F: CostFamily) -> float:
    """Cost whose symmetric equilibrium bid is ``b``."""
    lo_bid = symmetric_equilibrium_bid(F.lo, n, F)
    if not (lo_bid <= b <= F.hi):
        raise ValueError(f"bid {b} outside the equilibrium bid range [{lo_bid}, {F.hi}]")
    if F.kind == "uniform":
        return min(F.hi, max(F.lo, (n * b - F.hi) / (n - 1)))
    if b >= F.hi:
        return F.hi
    return optimize.brentq(lambda c: symmetric_equilibrium_bid(c, n, F) - b, F.lo, F.hi, xtol=1e-15, rtol=4e-16)


def symmetric_bid_hazard(b: float, n: int, F: CostFamily, x: float = 1.0) -> tuple[float, float, float]:
    """True ``(G, g, psi)`` of a symmetric market's bid distribution at bid ``b``.

    Bids scale with the engineer's estimate ``x``: ``B = x * s(C)``.
    """
    c = symmetric_inverse(b / x, n, F)
    G = F.cdf1(c)
    g = F.pdf1(c) / (x * symmetric_bid_slope(c, n, F))
    return G, g, g / (1.0 - G)


@dataclass(frozen=True)
class AsymmetricEquilibrium:
    """Tabulated inverse strategies on a common ascending bid grid.

    ``phi[k]`` is NaN below the lowest bid type k ever submits; this happens
    when the type with the higher cost floor enters above the common
    lowest bid.
    """

    families: tuple[CostFamily, CostFamily]
    n0: int
    n1: int
    bids: np.ndarray
    phi: np.ndarray  # shape (2, len(bids))
    residual: np.ndarray  # FOC residual per grid point, shape (2, len(bids))

    @property
    def b_low(self) -> float:
        return float(self.bids[0])

    @property
    def b_high(self) -> float:
        return float(self.bids[-1])

    def entry_bid(self, k: int) -> float:
        """Lowest bid submitted by type k."""
        return float(self.bids[np.argmax(np.isfinite(self.phi[k]))])

    @property
    def max_residual(self) -> float:
        """Largest FOC residual over interior grid points.

        Segment ends (lowest bid, each type's entry bid, top) are excluded.
        """
        ends = np.isin(self.bids, [self.entry_bid(0), self.entry_bid(1), self.b_high])
        r = self.residual[:, ~ends]
        return float(np.max(np.abs(r[np.isfinite(r)]))) if np.isfinite(r).any() else math.nan

    def _valid(self, k):
        ok = np.isfinite(self.phi[k])
        return self.bids[ok], self.phi[k][ok]

    def inverse(self, k: int, b):
        bb, pp = self._valid(k)
        return np.interp(b, bb, pp)

    def bid(self, k: int, c):
        """Equilibrium bid of a type-k bidder with base-scale cost ``c``."""
        c = np.asarray(c, dtype=float)
        F = self.families[k]
        if np.any((c < F.lo) | (c > F.hi)):
            raise ValueError("cost outside support")
        bb, pp = self._valid(k)
        return np.interp(c, pp, bb)


def _ode_rhs(b, p0, p1, n0, n1, F0, F1):
    """``d phi_k / d b`` from the two FOCs solved for the hazards (vectorised)."""
    r0 = 1.0 / (b - p0)
    r1 = 1.0 / (b - p1)
    N1 = n0 + n1 - 1
    a0 = (n1 * r1 - (n1 - 1) * r0) / N1
    a1 = (n0 * r0 - (n0 - 1) * r1) / N1
    q0 = np.clip(p0, F0.lo, F0.hi)
    q1 = np.clip(p1, F1.lo, F1.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = (1.0 - F0.cdf(q0)) / F0.pdf(q0)
        m1 = (1.0 - F1.cdf(q1)) / F1.pdf(q1)
    return a0 * m0, a1 * m1


def _top_expansion(n0, n1, F0, F1):
    """Local behaviour of ``phi_k`` near the singular top ``b = c_hi``.

    With ``u = c_hi - b`` the regular branch is
    ``phi_k = c_hi - lam u + beta_k u^2`` with ``lam = N/(N-1)``; the
    curvatures solve a 2x2 system driven by the slope of the log densities
    at the top (determinant ``1 + 2N - N^3``, never zero for N >= 2).
    Perturbations of this branch behave like ``u^(1-N)`` along ``(1, 1)``
    (excluded, singular at the top) and like ``u^(N^2-N+1)`` along the
    returned direction, which is the free mode fixed by the lower boundary.
    """
    N = n0 + n1
    lam = N / (N - 1)
    A = np.array([[N * (n1 - 1) - 1, -N * n1], [-N * n0, N * (n0 - 1) - 1]], dtype=float)
    rhs = 0.5 * lam**2 * np.array([F0.dlogpdf_hi(), F1.dlogpdf_hi()])
    beta = np.linalg.solve(A, rhs)
    free = np.array([N * n1, 1 + N * (n1 - 1) - (N * N - N + 1)], dtype=float)
    return lam, beta, free / np.linalg.norm(free)


def foc_residual(bids, phi, n0, n1, F0, F1) -> np.ndarray:
    """Survival-weighted FOC residual of tabulated inverse strategies.

    For type k: ``S_k S_k' - (b - phi_k)[(n_k-1) f_k phi_k' S_k' + n_k' f_k' phi_k'' S_k]``,
    i.e. the first-order condition multiplied through by both survival terms
    so it stays bounded at the top. Derivatives are central differences.
    Where a type does not bid (NaN in ``phi``) its survival is 1 and its
    density 0; its own residual is NaN there.
    """
    bids = np.asarray(bids, dtype=float)
    fams, counts = (F0, F1), (n0, n1)
    S, dens, ok = [], [], []
    for k in (0, 1):
        v = np.isfinite(phi[k])
        d = np.zeros_like(bids)
        if v.sum() >= 2:
            d[v] = np.gradient(phi[k][v], bids[v])
        q = np.where(v, phi[k], fams[k].lo)
        S.append(np.where(v, 1.0 - fams[k].cdf(q), 1.0))
        dens.append(np.where(v, fams[k].pdf(q) * d, 0.0))
        ok.append(v)
    out = np.full((2, bids.size), np.nan)
    for k in (0, 1):
        o = 1 - k
        r = S[k] * S[o] - (bids - phi[k]) * ((counts[k] - 1) * dens[k] * S[o] + counts[o] * dens[o] * S[k])
        out[k, ok[k]] = r[ok[k]]
    return out


def _check_families(F0, F1):
    if F0.hi != F1.hi:
        raise ValueError("cost supports must share the upper endpoint")
    for F in (F0, F1):
        ends = (F.pdf1(F.lo), F.pdf1(F.hi))
        if not all(0 < v < math.inf for v in ends):
            raise ValueError("cost densities must be positive and finite at both support endpoints")


def _solve_common_floor(F0, F1, n0, n1, top, free, b_top, tol, max_nodes):
    """Both types bid down to a common lowest bid at their cost floors."""
    lo = np.array([F0.lo, F1.lo])
    N = n0 + n1

    def fun(t, y, p):
        span = b_top - p[0]
        d0, d1 = _ode_rhs(p[0] + t * span, y[0], y[1], n0, n1, F0, F1)
        return np.vstack([d0 * span, d1 * span])

    def bc(ya, yb, p):
        return np.array([ya[0] - lo[0], ya[1] - lo[1], yb[0] - top[0] - p[1] * free[0], yb[1] - top[1] - p[1] * free[1]])

    m = lo.max()
    t = np.linspace(0.0, 1.0, 201)
    y = lo[:, None] + t * (top - lo)[:, None]
    # Newton on the collocation system is sensitive to the starting lowest bid
    for frac in (1.0, 1.5, 2.0, 0.5, 3.0):
        b0 = m + frac * (F0.hi - m) / N
        if b0 >= b_top:
            continue
        with np.errstate(all="ignore"):
            sol = integrate.solve_bvp(fun, bc, t, y, p=np.array([b0, 0.0]), tol=tol * 1e-2, max_nodes=max_nodes)
        if sol.success:
            break
    if not sol.success:
        return None, sol
    b_low = float(sol.p[0])

    def table(b):
        return sol.sol((b - b_low) / (b_top - b_low))

    return (b_low, (b_low, b_low), table), sol


def _solve_late_entry(F0, F1, n0, n1, top, free, b_top, tol, max_nodes):
    """The type with the higher cost floor enters above the lowest bid.

    Below its entry bid ``b_e`` only the other (strong) type bids, so the
    strong FOC has no weak-rival hazard there. At ``b_e`` the weak bidder at
    its floor is indifferent to shading further, which pins the weak bid
    density at zero: ``n_s (b_e - lo_w) = (n_s - 1)(b_e - phi_s(b_e))``.
    """
    fams, counts = (F0, F1), (n0, n1)
    s = 0 if F0.lo < F1.lo else 1
    w = 1 - s
    Fs, Fw = fams[s], fams[w]
    ns = counts[s]

    def full(b, ps, pw):
        d = _ode_rhs(b, *((ps, pw) if s == 0 else (pw, ps)), n0, n1, F0, F1)
        return (d[0], d[1]) if s == 0 else (d[1], d[0])

    def fun(t, y, p):
        b_low, b_e = p[0], p[1]
        sp1, sp2 = b_e - b_low, b_top - b_e
        b1 = b_low + t * sp1
        q = np.clip(y[0], Fs.lo, Fs.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = (1.0 - Fs.cdf(q)) / (Fs.pdf(q) * (ns - 1) * (b1 - y[0]))
        ds, dw = full(b_e + t * sp2, y[1], y[2])
        return np.vstack([d1 * sp1, ds * sp2, dw * sp2])

    def bc(ya, yb, p):
        b_e, A = p[1], p[2]
        return np.array(
            [
                ya[0] - Fs.lo,
                yb[0] - ya[1],
                ya[2] - Fw.lo,
                yb[1] - top[s] - A * free[s],
                yb[2] - top[w] - A * free[w],
                ns * (b_e - Fw.lo) - (ns - 1) * (b_e - ya[1]),
            ]
        )

    N = n0 + n1
    b_e0 = Fw.lo + (Fw.hi - Fw.lo) / N
    b_low0 = Fs.lo + (b_e0 - Fs.lo) * (1 - 1 / ns)
    t = np.linspace(0.0, 1.0, 201)
    mid = Fs.lo + (Fw.lo - Fs.lo) * 0.9
    y = np.vstack([Fs.lo + t * (mid - Fs.lo), mid + t * (top[s] - mid), Fw.lo + t * (top[w] - Fw.lo)])
    with np.errstate(all="ignore"):
        sol = integrate.solve_bvp(fun, bc, t, y, p=np.array([b_low0, b_e0, 0.0]), tol=tol * 1e-2, max_nodes=max_nodes)
    if not sol.success:
        return None, sol
    b_low, b_e = float(sol.p[0]), float(sol.p[1])

    def table(b):
        b = np.asarray(b, dtype=float)
        out = np.full((2, b.size), np.nan)
        lower = b < b_e
        out[s, lower] = sol.sol((b[lower] - b_low) / (b_e - b_low))[0]
        v = sol.sol((b[~lower] - b_e) / (b_top - b_e))
        out[s, ~lower] = v[1]
        out[w, ~lower] = v[2]
        return out

    entry = (b_low, b_e) if s == 0 else (b_e, b_low)
    return (b_low, entry, table), sol


def asymmetric_equilibrium_solve(
    F0: CostFamily,
    F1: CostFamily,
    n0: int,
    n1: int,
    grid_size: int = 2000,
    tol: float = 1e-4,
    max_nodes: int = 20000,
) -> AsymmetricEquilibrium:
    """Solve the two-type equilibrium as a boundary value problem.

    Unknowns are the lowest bid (where the inverse strategies meet the cost
    floors) and the amplitude of the free mode at the top. The strategies
    are found by collocation on ``[b_low, c_hi - u0]`` and joined to the
    local expansion on the last ``u0`` below ``c_hi``; the table is laid on
    ``grid_size + 1`` evenly spaced bids (plus the weak type's entry bid if
    it enters late).

    Raises :class:`EquilibriumError` if collocation fails or the FOC residual
    at an interior grid point exceeds ``tol``.
    """
    if n0 < 1 or n1 < 1:
        raise ValueError("asymmetric solve needs at least one bidder of each type")
    _check_families(F0, F1)

    hi = F0.hi
    lo = np.array([F0.lo, F1.lo])
    lam, beta, free = _top_expansion(n0, n1, F0, F1)
    u0 = 1e-2 * (hi - lo.max())
    top = hi - lam * u0 + beta * u0 * u0
    b_top = hi - u0
    args = (F0, F1, n0, n1, top, free, b_top, tol, max_nodes)

    found, sol = _solve_common_floor(*args)
    if found is not None and lo[0] != lo[1]:
        # a negative weak-type slope at the floor means it should enter later
        w = 0 if lo[0] > lo[1] else 1
        b_low = found[0]
        phi_lo = found[2](np.array([b_low, b_low + 1e-6 * (hi - b_low)]))
        if phi_lo[w, 1] < phi_lo[w, 0]:
            found = None
    if found is None and lo[0] != lo[1] and (n0 if lo[0] < lo[1] else n1) >= 2:
        found, sol = _solve_late_entry(*args)
    if found is None:
        best = float(np.max(sol.rms_residuals)) if getattr(sol, "rms_residuals", None) is not None else math.inf
        raise EquilibriumError(f"collocation failed: {sol.message}", best_residual=best)

    b_low, entry, table = found
    bids = np.union1d(np.linspace(b_low, hi, grid_size + 1), np.asarray(entry))
    inner = bids <= b_top
    phi = np.empty((2, bids.size))
    phi[:, inner] = table(bids[inner])
    u = hi - bids[~inner]
    phi[:, ~inner] = hi - lam * u + beta[:, None] * u * u
    for k in (0, 1):
        phi[k, bids == entry[k]] = lo[k]
    phi[:, -1] = hi
    res = foc_residual(bids, phi, n0, n1, F0, F1)
    eq = AsymmetricEquilibrium(families=(F0, F1), n0=n0, n1=n1, bids=bids, phi=phi, residual=res)
    if not np.isfinite(eq.max_residual) or eq.max_residual > tol:
        raise EquilibriumError("FOC residual above tolerance", best_residual=eq.max_residual)
    for k in (0, 1):
        v = phi[k][np.isfinite(phi[k])]
        if np.any(np.diff(v) <= 0):
            raise EquilibriumError("inverse strategies not strictly increasing", best_residual=eq.max_residual)
    return eq
