"""Local polynomial estimation of conditional bid distributions and densities.

Conditioning variables are the engineer's estimate ``x`` (continuous,
Epanechnikov kernel) and the type counts ``n0, n1`` (discrete, Gaussian
kernel). The CDF uses a local quadratic fit of ``1(B <= b)``; the density is
the slope of a local linear fit, in the bid direction, to the
kernel-weighted empirical CDF, which keeps its accuracy at the edge of the
bid support. The textbook
local-linear fit of a kernel-smoothed response is kept as an option.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _parallel
from .market_data import Dataset, fmt6

RULE_OF_THUMB = 1.06 * 2.214
G_CLAMP = 1e-6
G_DENSITY_FLOOR = 1e-8
_COLLINEAR_TOL = 1e-9


class LpeError(ValueError):
    """No usable local sample at an evaluation point."""


@dataclass(frozen=True)
class KernelSpec:
    continuous: str = "epanechnikov"
    discrete: str = "gaussian"


@dataclass(frozen=True)
class BandwidthSet:
    """``h_G``: conditioning variable ``x``; ``h_g``: bid direction; ``h_n``: counts.

    ``math.inf`` for ``h_G`` switches the ``x`` kernel off (constant ``x``).
    """

    h_G: float
    h_g: float
    h_n: float = 1.0
    R: int = 2

    def __post_init__(self):
        if not (self.h_G > 0 and self.h_g > 0 and self.h_n > 0):
            raise ValueError("bandwidths must be positive")
        if self.R < 1:
            raise ValueError("smoothness R must be >= 1")


@dataclass(frozen=True)
class EvalPoint:
    b: float
    x: float
    n0: int
    n1: int
    type_k: int = 0


@dataclass(frozen=True)
class LpeSample:
    """Pooled observations of one bidder type (``b`` may be log bids)."""

    b: np.ndarray
    x: np.ndarray
    n0: np.ndarray
    n1: np.ndarray

    def __post_init__(self):
        n = len(self.b)
        if not (len(self.x) == len(self.n0) == len(self.n1) == n):
            raise ValueError("sample arrays must have equal length")

    def __len__(self) -> int:
        return len(self.b)

    @classmethod
    def from_dataset(cls, d: Dataset, type_k: int, log: bool = True) -> "LpeSample":
        rows = [
            (math.log(b.bid) if log else b.bid, a.engineer_estimate, a.n0, a.n1)
            for a, b in d.iter_bids()
            if b.type_k == type_k
        ]
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


def epanechnikov(u):
    """``3/4 (1 - u^2)`` on ``[-1, 1]``, zero outside."""
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return out if out.ndim else float(out)


def gaussian(u):
    u = np.asarray(u, dtype=float)
    out = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return out if out.ndim else float(out)


def _check_bw_args(sigma_hat: float, T: int, R: int) -> None:
    if not sigma_hat > 0:
        raise ValueError("sigma_hat must be positive")
    if T < 2:
        raise ValueError("need T >= 2 observations")
    if R < 1:
        raise ValueError("R must be >= 1")


def bandwidth_cdf(sigma_hat: float, T: int, R: int = 2) -> float:
    """Rule-of-thumb bandwidth for the distribution, rate ``T^(-1/(2R+3))``."""
    _check_bw_args(sigma_hat, T, R)
    return RULE_OF_THUMB * sigma_hat * T ** (-1.0 / (2 * R + 3))


def bandwidth_pdf(sigma_hat: float, T: int, R: int = 2) -> float:
    """Rule-of-thumb bandwidth for the density, rate ``T^(-1/(2R+1))``."""
    _check_bw_args(sigma_hat, T, R)
    return RULE_OF_THUMB * sigma_hat * T ** (-1.0 / (2 * R + 1))


def default_bandwidths(sample: LpeSample, R: int = 2, h_n: float = 1.0) -> BandwidthSet:
    """Bandwidths from sample standard deviations of ``x`` and of the bid variable."""
    T = len(sample)
    sx = float(np.std(sample.x, ddof=1)) if T > 1 else 0.0
    sb = float(np.std(sample.b, ddof=1)) if T > 1 else 0.0
    h_G = bandwidth_cdf(sx, T, R) if sx > 0 else math.inf
    return BandwidthSet(h_G=h_G, h_g=bandwidth_pdf(sb, T, R), h_n=h_n, R=R)


def product_weight(z: EvalPoint, x, n0, n1, bw: BandwidthSet):
    """Product kernel ``K_H``: Epanechnikov in ``x``, Gaussian in each count.

    Each factor carries its ``1/h`` scaling; an infinite ``h_G`` drops the
    ``x`` factor.
    """
    x = np.asarray(x, dtype=float)
    w = gaussian((np.asarray(n0, dtype=float) - z.n0) / bw.h_n) / bw.h_n
    w = w * gaussian((np.asarray(n1, dtype=float) - z.n1) / bw.h_n) / bw.h_n
    if math.isfinite(bw.h_G):
        w = w * epanechnikov((x - z.x) / bw.h_G) / bw.h_G
    return w


def covariate_design(z: EvalPoint, x, n0, n1, bw: BandwidthSet, degree: int) -> np.ndarray:
    """Local design in bandwidth-scaled offsets.

    Degree 1: ``1, dx, dn0, dn1``. Degree 2 adds ``dx^2, dx dn0, dx dn1,
    dn0 dn1, dn0^2, dn1^2``. Scaling leaves the intercept unchanged.
    """
    hx = bw.h_G if math.isfinite(bw.h_G) else 1.0
    dx = (np.asarray(x, dtype=float) - z.x) / hx
    d0 = (np.asarray(n0, dtype=float) - z.n0) / bw.h_n
    d1 = (np.asarray(n1, dtype=float) - z.n1) / bw.h_n
    cols = [np.ones_like(dx), dx, d0, d1]
    if degree >= 2:
        cols += [dx * dx, dx * d0, dx * d1, d0 * d1, d0 * d0, d1 * d1]
    return np.column_stack(cols)


@dataclass(frozen=True)
class WlsFit:
    coef: np.ndarray  # zero for dropped columns
    kept: np.ndarray  # boolean mask of design columns used
    max_residual: float  # largest |residual| over positively weighted rows


def _independent_columns(G: np.ndarray) -> np.ndarray:
    """Greedy column selection on a Gram matrix, intercept first.

    A column is kept if its part orthogonal to the kept ones retains more
    than a tiny fraction of its own norm (pivoted Cholesky in fixed order).
    """
    p = G.shape[0]
    keep = np.zeros(p, dtype=bool)
    L = np.zeros((p, p))
    idx: list[int] = []
    for j in range(p):
        if G[j, j] <= 0:
            continue
        if idx:
            Lk = L[np.ix_(idx, idx)]
            v = np.linalg.solve(Lk, G[idx, j])
            d = G[j, j] - v @ v
        else:
            v = np.empty(0)
            d = G[j, j]
        if d > _COLLINEAR_TOL * G[j, j]:
            for t, i in enumerate(idx):
                L[j, i] = v[t]
            L[j, j] = math.sqrt(d)
            idx.append(j)
            keep[j] = True
    return keep


def wls(design: np.ndarray, y: np.ndarray, w: np.ndarray) -> WlsFit:
    """Weighted least squares with collinear columns dropped.

    Solved by SVD least squares on the square-root-weighted kept columns, so
    any polynomial in the design is reproduced to rounding error.
    Raises :class:`LpeError` if the intercept has no weight.
    """
    pos = w > 0
    if not np.any(pos):
        raise LpeError("no observation carries positive weight")
    Z = design[pos]
    sw = w[pos]
    G = Z.T @ (Z * sw[:, None])
    keep = _independent_columns(G)
    if not keep[0]:
        raise LpeError("intercept column has no weight")
    r = np.sqrt(sw)
    beta = np.linalg.lstsq(Z[:, keep] * r[:, None], y[pos] * r, rcond=None)[0]
    if not np.all(np.isfinite(beta)):
        raise LpeError("non-finite local fit")
    coef = np.zeros(design.shape[1])
    coef[keep] = beta
    resid = y[pos] - Z @ coef
    return WlsFit(coef, keep, float(np.max(np.abs(resid))))


def _describe(z: EvalPoint) -> str:
    return f"b={z.b:.6g}, x={z.x:.6g}, n0={z.n0}, n1={z.n1}, type={z.type_k}"


def fit_cdf_point(sample: LpeSample, z: EvalPoint, bw: BandwidthSet, clamp: bool = True) -> float:
    """Local quadratic estimate of ``G(b | x, n0, n1)`` (intercept of the fit)."""
    w = product_weight(z, sample.x, sample.n0, sample.n1, bw)
    y = (sample.b <= z.b).astype(float)
    Z = covariate_design(z, sample.x, sample.n0, sample.n1, bw, degree=2)
    try:
        fit = wls(Z, y, w)
    except LpeError as e:
        raise LpeError(f"{e} at ({_describe(z)})") from None
    g = float(fit.coef[0])
    return min(1.0, max(0.0, g)) if clamp else g


def _cdf_slope(sample: LpeSample, z: EvalPoint, bw: BandwidthSet, w: np.ndarray) -> float:
    """Slope at ``b`` of a local linear fit to the weighted empirical CDF."""
    pos = w > 0
    bs, ws = sample.b[pos], w[pos]
    order = np.argsort(bs, kind="stable")
    bs, ws = bs[order], ws[order]
    cum = np.cumsum(ws) / ws.sum()
    # ties share the CDF value at their largest index
    last = np.searchsorted(bs, bs, side="right") - 1
    emp = cum[last]
    u = (bs - z.b) / bw.h_g
    kb = epanechnikov(u) / bw.h_g
    wt = ws * kb
    if np.count_nonzero(wt > 0) < 2:
        raise LpeError(f"fewer than two bids within h_g at ({_describe(z)})")
    D = np.column_stack([np.ones_like(u), u])
    fit = wls(D, emp, wt)
    if not fit.kept[1]:
        raise LpeError(f"no bid spread within h_g at ({_describe(z)})")
    return float(fit.coef[1]) / bw.h_g


def _kernel_response(sample: LpeSample, z: EvalPoint, bw: BandwidthSet, w: np.ndarray) -> float:
    y = epanechnikov((sample.b - z.b) / bw.h_g) / bw.h_g
    Z = covariate_design(z, sample.x, sample.n0, sample.n1, bw, degree=1)
    return float(wls(Z, y, w).coef[0])


PDF_METHODS = ("cdf-slope", "kernel-response")


def fit_pdf_point(
    sample: LpeSample, z: EvalPoint, bw: BandwidthSet, method: str = "cdf-slope", clamp: bool = True
) -> float:
    """Local estimate of the density ``g(b | x, n0, n1)``.

    ``cdf-slope`` (default) differentiates the kernel-weighted empirical CDF
    with a local linear fit in ``(B - b) / h_g``; it needs no knowledge of the
    support and does not lose mass at its edge. ``kernel-response`` fits a
    local linear model in the covariates to ``K((B - b)/h_g)/h_g``.
    """
    w = product_weight(z, sample.x, sample.n0, sample.n1, bw)
    try:
        if method == "cdf-slope":
            g = _cdf_slope(sample, z, bw, w)
        elif method == "kernel-response":
            g = _kernel_response(sample, z, bw, w)
        else:
            raise ValueError(f"unknown density method {method!r}")
    except LpeError as e:
        if "at (" in str(e):
            raise
        raise LpeError(f"{e} at ({_describe(z)})") from None
    return max(0.0, g) if clamp else g


def kernel_density(sample_b: np.ndarray, b: float, h: float) -> float:
    """Plain Epanechnikov kernel density estimate (no boundary correction)."""
    return float(np.mean(epanechnikov((np.asarray(sample_b) - b) / h)) / h)


def rearrange(values: Sequence[float]) -> np.ndarray:
    """Monotone rearrangement: sorted values of a CDF evaluated on an ascending grid."""
    return np.sort(np.asarray(values, dtype=float))


def cdf_curve(sample: LpeSample, z: EvalPoint, grid: Sequence[float], bw: BandwidthSet, monotone: bool = True) -> np.ndarray:
    """``G`` at fixed covariates over an ascending bid grid."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be ascending")
    vals = np.array([fit_cdf_point(sample, EvalPoint(b, z.x, z.n0, z.n1, z.type_k), bw) for b in grid])
    return rearrange(vals) if monotone else vals


# -- hazards at every observed bid ------------------------------------------


@dataclass(frozen=True)
class HazardEstimates:
    """Per-bid estimates in dataset bid order, for both types at the bid's point.

    Arrays are NaN where a type's hazard does not enter the bidder's FOC.
    ``log`` tells whether ``G``/``g`` refer to log bids.
    """

    auction_ids: tuple[str, ...]
    bidder_ids: tuple[str, ...]
    G: np.ndarray  # shape (n_bids, 2), clamped
    g: np.ndarray  # shape (n_bids, 2), floored
    log: bool
    bandwidths: tuple[BandwidthSet | None, BandwidthSet | None]

    def hazard(self) -> np.ndarray:
        return self.g / (1.0 - self.G)


def _eval_chunk(job):
    samples, bws, points, method = job
    out = []
    for v, x, n0, n1, k, need in points:
        G = [math.nan, math.nan]
        g = [math.nan, math.nan]
        for j in (0, 1):
            if not need[j]:
                continue
            z = EvalPoint(v, x, n0, n1, j)
            try:
                Gj = fit_cdf_point(samples[j], z, bws[j])
            except LpeError:
                Gj = float(np.mean(samples[j].b <= v))
            try:
                gj = fit_pdf_point(samples[j], z, bws[j], method=method)
            except LpeError:
                # no local data, typically a bid outside the other type's range
                gj = 0.0
            G[j] = min(1.0 - G_CLAMP, max(G_CLAMP, Gj))
            g[j] = max(G_DENSITY_FLOOR, gj)
        out.append((G, g))
    return out


def estimate_hazards(
    d: Dataset,
    bandwidths: dict[int, BandwidthSet] | None = None,
    log: bool = True,
    method: str = "cdf-slope",
    workers: int = 1,
    h_n: float = 1.0,
) -> HazardEstimates:
    """Estimate ``G_j, g_j`` for each bid at its own ``(b, x, n0, n1)``.

    The bidder's own type is always evaluated; the other type only when it
    is present in the auction (``n_k' >= 1``).
    """
    samples = [LpeSample.from_dataset(d, k, log=log) for k in (0, 1)]
    bws: list[BandwidthSet | None] = []
    for k in (0, 1):
        if bandwidths and k in bandwidths:
            bws.append(bandwidths[k])
        elif len(samples[k]) >= 2:
            bws.append(default_bandwidths(samples[k], h_n=h_n))
        else:
            bws.append(None)
    points, aids, bids = [], [], []
    for a, b in d.iter_bids():
        k = b.type_k
        counts = (a.n0, a.n1)
        need = [False, False]
        # own type is always estimated (audit output); it enters the FOC only if n_k >= 2
        need[k] = counts[k] >= 2 or bws[k] is not None
        need[1 - k] = counts[1 - k] >= 1
        for j in (0, 1):
            if need[j] and bws[j] is None:
                raise LpeError(f"type {j} has too few bids to estimate its distribution")
        v = math.log(b.bid) if log else b.bid
        points.append((v, a.engineer_estimate, a.n0, a.n1, k, tuple(need)))
        aids.append(a.id)
        bids.append(b.bidder_id)
    chunks = _parallel.chunked(points, max(1, workers) * 4)
    jobs = [(samples, bws, list(c), method) for c in chunks]
    parts = _parallel.pmap(_eval_chunk, jobs, workers=workers)
    res = [r for p in parts for r in p]
    G = np.array([r[0] for r in res], dtype=float).reshape(-1, 2)
    g = np.array([r[1] for r in res], dtype=float).reshape(-1, 2)
    return HazardEstimates(tuple(aids), tuple(bids), G, g, log, (bws[0], bws[1]))


def write_audit_csv(d: Dataset, est: HazardEstimates, path: str | Path, comment: str | None = None) -> None:
    """``bidder_id, auction_id, b, G_hat, g_hat`` for each bid's own type."""
    types = {(a.id, b.bidder_id): b.type_k for a, b in d.iter_bids()}
    bid_of = {(a.id, b.bidder_id): b.bid for a, b in d.iter_bids()}
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bidder_id", "auction_id", "b", "G_hat", "g_hat"])
        for i, (aid, bid) in enumerate(zip(est.auction_ids, est.bidder_ids)):
            k = types[(aid, bid)]
            G, g = est.G[i, k], est.g[i, k]
            w.writerow([bid, aid, fmt6(bid_of[(aid, bid)]), "" if math.isnan(G) else f"{G:.8f}", "" if math.isnan(g) else f"{g:.8f}"])


HAZARD_COLUMNS = ("auction_id", "bidder_id", "G0", "g0", "G1", "g1")


def _exact(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_hazards_csv(est: HazardEstimates, path: str | Path, comment: str | None = None) -> None:
    """Both types' ``G, g`` per bid at full precision, so inversion can resume from disk."""
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"# domain={'log' if est.log else 'level'}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HAZARD_COLUMNS)
        for i, (aid, bid) in enumerate(zip(est.auction_ids, est.bidder_ids)):
            w.writerow([aid, bid, _exact(est.G[i, 0]), _exact(est.g[i, 0]), _exact(est.G[i, 1]), _exact(est.g[i, 1])])


def load_hazards_csv(path: str | Path) -> HazardEstimates:
    log = True
    with Path(path).open(newline="") as fh:
        lines = []
        for ln in fh:
            if ln.startswith("# domain="):
                log = ln.strip().split("=", 1)[1] == "log"
            elif ln.strip() and not ln.startswith("#"):
                lines.append(ln)
    rows = list(csv.DictReader(lines))
    num = lambda s: float(s) if s else math.nan  # noqa: E731
    G = np.array([[num(r["G0"]), num(r["G1"])] for r in rows], dtype=float).reshape(-1, 2)
    g = np.array([[num(r["g0"]), num(r["g1"])] for r in rows], dtype=float).reshape(-1, 2)
    return HazardEstimates(
        tuple(r["auction_id"] for r in rows), tuple(r["bidder_id"] for r in rows), G, g, log, (None, None)
    )
