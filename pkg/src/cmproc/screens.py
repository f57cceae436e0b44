"""Competitive-bidding screens: conditional independence and exchangeability.

Normalised bids ``BID/EE`` are regressed on four cost shifters with project
fixed effects. Bidders under suspicion get their own coefficient block, the
rest share a pooled block. Competitive bidding implies that residuals of two
bidders are uncorrelated across the auctions they both enter, and that the
blocks share coefficients.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from . import _parallel
from .market_data import Dataset

VARIABLES = ("LDIST", "CAP", "UTIL", "LMDIST")
POOLED = "pooled"
_RANK_TOL = 1e-9


class RankDeficiencyError(ValueError):
    def __init__(self, columns: Sequence[str]):
        super().__init__("collinear design columns: " + ", ".join(columns))
        self.columns = tuple(columns)


def bid_covariates(d: Dataset) -> np.ndarray:
    """``(n_bids, 4)`` array of LDIST, CAP, UTIL, LMDIST in ``iter_bids`` order.

    Distances enter as ``ln(1 + miles)``. LMDIST uses the nearest other
    participant; a lone bidder gets 0 (its row is absorbed by the fixed effect).
    """
    out = []
    for a in d.auctions:
        dist = np.array([b.distance for b in a.bids])
        for j, b in enumerate(a.bids):
            others = np.delete(dist, j)
            near = float(others.min()) if others.size else 0.0
            out.append((math.log1p(b.distance), d.bidders[b.bidder_id].capacity, b.utilization, math.log1p(near)))
    return np.array(out, dtype=float).reshape(-1, len(VARIABLES))


def joint_counts(d: Dataset, type_k: int | None = 1) -> Counter:
    c: Counter = Counter()
    for a in d.auctions:
        ids = sorted(b.bidder_id for b in a.bids if type_k is None or b.type_k == type_k)
        c.update(combinations(ids, 2))
    return c


def find_frequent_pairs(d: Dataset, min_joint: int = 15, type_k: int | None = 1) -> list[tuple[tuple[str, str], int]]:
    """Unordered pairs (of the given type) co-bidding at least ``min_joint`` times, most frequent first."""
    if min_joint < 1:
        raise ValueError("min_joint must be >= 1")
    counts = joint_counts(d, type_k)
    pairs = [(p, n) for p, n in counts.items() if n >= min_joint]
    return sorted(pairs, key=lambda t: (-t[1], t[0]))


def pair_table(d: Dataset, pair: tuple[str, str]) -> dict:
    """Joint bids, expected joint wins (sum of 2/N) and each member's wins."""
    i, j = pair
    n = 0
    exp = []
    wins = [0, 0]
    for a in d.auctions:
        ids = a.bidder_ids()
        if i in ids and j in ids:
            n += 1
            exp.append(2.0 / a.n_bidders)
            w = a.winner.bidder_id
            wins[0] += w == i
            wins[1] += w == j
    return {"n_joint": n, "expected_wins": math.fsum(exp), "first_wins": wins[0], "second_wins": wins[1]}


@dataclass(frozen=True)
class RegressionSpec:
    """Pooled fixed-effects specification.

    Each entry of ``blocks`` is a group of bidders sharing one coefficient
    vector on ``variables``; bidders in no block share the pooled vector.
    """

    blocks: tuple[tuple[str, ...], ...] = ()
    variables: tuple[str, ...] = VARIABLES

    def __post_init__(self):
        seen = [b for blk in self.blocks for b in blk]
        if len(seen) != len(set(seen)):
            raise ValueError("a bidder appears in two blocks")
        if any(not blk for blk in self.blocks):
            raise ValueError("empty block")
        bad = set(self.variables) - set(VARIABLES)
        if bad:
            raise ValueError(f"unknown regressors {sorted(bad)}")

    @staticmethod
    def singletons(ids: Iterable[str]) -> "RegressionSpec":
        return RegressionSpec(tuple((b,) for b in sorted(set(ids))))

    def block_label(self, k: int) -> str:
        return "+".join(self.blocks[k])


@dataclass
class RegressionFit:
    spec: RegressionSpec
    names: tuple[str, ...]
    coef: np.ndarray
    residuals: np.ndarray
    ssr: float
    T: int
    m: int
    dropped: tuple[str, ...]
    keys: tuple[tuple[str, str], ...]
    group: np.ndarray
    group_size: np.ndarray
    Q: np.ndarray = field(repr=False)

    def row_index(self) -> dict[tuple[str, str], int]:
        return {k: i for i, k in enumerate(self.keys)}


def _demean(a: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
    counts = np.bincount(group, minlength=n_groups).astype(float)
    if a.ndim == 1:
        return a - (np.bincount(group, a, n_groups) / counts)[group]
    means = np.stack([np.bincount(group, a[:, c], n_groups) for c in range(a.shape[1])], axis=1) / counts[:, None]
    return a - means[group]


@dataclass(frozen=True)
class Panel:
    """Row-aligned arrays of one dataset, cheap to ship to worker processes."""

    keys: tuple[tuple[str, str], ...]
    bidder: tuple[str, ...]
    group: np.ndarray
    n_groups: int
    y: np.ndarray
    X: np.ndarray

    @staticmethod
    def from_dataset(d: Dataset, X: np.ndarray | None = None) -> "Panel":
        if X is None:
            X = bid_covariates(d)
        keys, group, y = [], [], []
        for g, a in enumerate(d.auctions):
            for b in a.bids:
                keys.append((a.id, b.bidder_id))
                group.append(g)
                y.append(b.bid / a.engineer_estimate)
        return Panel(tuple(keys), tuple(k[1] for k in keys), np.array(group, dtype=int), len(d.auctions),
                     np.array(y), np.asarray(X, float))


def _design(panel: Panel, spec: RegressionSpec):
    col = [VARIABLES.index(v) for v in spec.variables]
    owner = {b: k for k, blk in enumerate(spec.blocks) for b in blk}
    which = np.array([owner.get(b, -1) for b in panel.bidder])
    parts, names = [], []
    labels = [(k, spec.block_label(k)) for k in range(len(spec.blocks))]
    if (which == -1).any():
        labels.append((-1, POOLED))
    for k, lab in labels:
        mask = (which == k).astype(float)[:, None]
        parts.append(panel.X[:, col] * mask)
        names += [f"{lab}:{v}" for v in spec.variables]
    D = np.hstack(parts) if parts else np.empty((len(panel.keys), 0))
    return D, tuple(names)


def fit_pooled_regression(
    d: Dataset | Panel, spec: RegressionSpec, X: np.ndarray | None = None, drop_collinear: bool = False
) -> RegressionFit:
    """Least squares of ``BID/EE`` on block regressors plus project dummies.

    Project dummies are absorbed by demeaning within auction; ``m`` counts
    them. Rank-deficient designs raise :class:`RankDeficiencyError` naming
    the offending columns unless ``drop_collinear`` is set, in which case
    those columns are removed and listed in ``dropped``.
    """
    panel = d if isinstance(d, Panel) else Panel.from_dataset(d, X)
    group, n_groups = panel.group, panel.n_groups
    D, names = _design(panel, spec)
    Dd = _demean(D, group, n_groups) if D.shape[1] else D
    yd = _demean(panel.y, group, n_groups)
    T = len(panel.y)

    dropped: list[str] = []
    keep = list(range(D.shape[1]))
    if keep:
        _, R, piv = linalg.qr(Dd, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        scale = max(diag[0], 1e-300)
        rank = int(np.sum(diag > _RANK_TOL * scale * max(1.0, math.sqrt(T))))
        bad = sorted(piv[rank:])
        if bad:
            if not drop_collinear:
                raise RankDeficiencyError([names[c] for c in bad])
            dropped = [names[c] for c in bad]
            keep = [c for c in keep if c not in set(bad)]
    Dk = Dd[:, keep]
    names = tuple(names[c] for c in keep)
    m = n_groups + len(keep)
    if T <= m:
        raise ValueError(f"need T > m, got T={T}, m={m}")
    if keep:
        Q, R = linalg.qr(Dk, mode="economic")
        coef = linalg.solve_triangular(R, Q.T @ yd)
        resid = yd - Dk @ coef
    else:
        Q = np.empty((T, 0))
        coef = np.empty(0)
        resid = yd
    size = np.bincount(group, minlength=n_groups)
    return RegressionFit(
        spec, names, coef, resid, float(resid @ resid), T, m, tuple(dropped), panel.keys, group, size, Q
    )


@dataclass(frozen=True)
class PairTestResult:
    pair: tuple[str, str]
    statistic: float
    p_value: float
    n_joint: int
    dof: int


def correlation_p_value(rho: float, n: int) -> float:
    """Two-sided p-value of a Pearson correlation from Student-t with ``n - 2`` dof."""
    if n < 3:
        raise ValueError("need at least 3 observations")
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


def independence_test(ri: Sequence[float], rj: Sequence[float], pair: tuple[str, str] = ("", "")) -> PairTestResult:
    """Pearson correlation test on paired residuals."""
    ri, rj = np.asarray(ri, float), np.asarray(rj, float)
    if ri.shape != rj.shape or ri.ndim != 1:
        raise ValueError("residual vectors must be 1-d and paired")
    n = len(ri)
    if n < 3:
        raise ValueError("need n_joint >= 3")
    a, b = ri - ri.mean(), rj - rj.mean()
    sa, sb = math.sqrt(a @ a), math.sqrt(b @ b)
    if sa == 0 or sb == 0:
        raise ValueError("zero residual variance")
    rho = float(np.clip((a @ b) / (sa * sb), -1.0, 1.0))
    return PairTestResult(pair, rho, correlation_p_value(rho, n), n, n - 2)


def pair_residuals(fit: RegressionFit, i: str, j: str, whiten: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of ``i`` and ``j`` on the auctions both entered.

    With ``whiten`` each auction's residual pair is multiplied by the inverse
    symmetric square root of its residual-maker block, undoing the negative
    correlation that the project fixed effect induces. Two-bidder auctions
    carry no information after the fixed effect and are dropped then.
    """
    idx = fit.row_index()
    auctions = {}
    for (aid, bid), r in idx.items():
        if bid in (i, j):
            auctions.setdefault(aid, {})[bid] = r
    ei, ej = [], []
    for aid in sorted(auctions):
        rows = auctions[aid]
        if len(rows) < 2:
            continue
        a, b = rows[i], rows[j]
        v = np.array([fit.residuals[a], fit.residuals[b]])
        if whiten:
            n = fit.group_size[fit.group[a]]
            if n <= 2:
                continue
            qa, qb = fit.Q[a], fit.Q[b]
            M = np.array(
                [[1 - 1 / n - qa @ qa, -1 / n - qa @ qb], [-1 / n - qa @ qb, 1 - 1 / n - qb @ qb]]
            )
            w, V = np.linalg.eigh(M)
            if w[0] <= 1e-10:
                continue
            v = V @ ((V.T @ v) / np.sqrt(w))
        ei.append(v[0])
        ej.append(v[1])
    return np.array(ei), np.array(ej)


@dataclass(frozen=True)
class ExchangeabilityResult:
    scope: str
    blocks: tuple[tuple[str, ...], ...]
    F: float
    r: int
    m: int
    T: int
    ssr_c: float
    ssr_u: float
    upper_tail_area: float


def f_test(ssr_c: float, ssr_u: float, r: int, T: int, m: int) -> tuple[float, float]:
    """``F = ((SSR_C - SSR_U)/r) / (SSR_U/(T-m))`` and its upper tail area under ``F(r, T-m)``."""
    if r < 1 or T <= m:
        raise ValueError("need r >= 1 and T > m")
    # a restriction cannot improve the fit; clip round-off
    num = max(ssr_c - ssr_u, 0.0) / r
    F = num / (ssr_u / (T - m)) if ssr_u > 0 else math.inf
    return F, float(stats.f.sf(F, r, T - m))


SCOPES = ("market", "pair")


def exchangeability_test(
    d: Dataset | Panel,
    blocks: Sequence[Sequence[str]],
    scope: str = "market",
    X: np.ndarray | None = None,
    restricted: RegressionFit | None = None,
    drop_collinear: bool = False,
    context: Sequence[str] = (),
) -> ExchangeabilityResult:
    """F-test that the given blocks share coefficients.

    ``market``: the blocks are constrained equal to each other, the pooled
    rest stays free, ``r = 4 (k - 1)``. ``pair``: the blocks are constrained
    equal to the pooled rest as well, ``r = 4 k``. Bidders in ``context``
    keep their own free block in both models. With dropped columns the
    effective ``r`` is the difference in slope counts.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    blocks = tuple(tuple(sorted(b)) for b in blocks)
    tested = {b for blk in blocks for b in blk}
    ctx = tuple((b,) for b in sorted(set(context) - tested))
    panel = d if isinstance(d, Panel) else Panel.from_dataset(d, X)
    unres = fit_pooled_regression(panel, RegressionSpec(blocks + ctx), drop_collinear=drop_collinear)
    if restricted is None:
        merged = (tuple(sorted(tested)),) if scope == "market" else ()
        restricted = fit_pooled_regression(panel, RegressionSpec(merged + ctx), drop_collinear=drop_collinear)
    r = unres.m - restricted.m
    F, uta = f_test(restricted.ssr, unres.ssr, r, unres.T, unres.m)
    return ExchangeabilityResult(scope, blocks, F, r, unres.m, unres.T, restricted.ssr, unres.ssr, uta)


@dataclass(frozen=True)
class PairScreen:
    pair: tuple[str, str]
    n_joint: int
    expected_wins: float
    first_wins: int
    second_wins: int
    independence: PairTestResult | None
    exchangeability: ExchangeabilityResult | None
    notes: tuple[str, ...] = ()

    def fails(self, alpha: float) -> bool:
        ind = self.independence is not None and self.independence.p_value < alpha
        exch = self.exchangeability is not None and self.exchangeability.upper_tail_area < alpha
        return ind or exch


@dataclass(frozen=True)
class RingFlags:
    broad: frozenset
    tight: frozenset


def flag_ring(screens: Sequence[PairScreen], alpha: float = 0.05) -> RingFlags:
    """Broad ring: members of any failing pair. Tight ring: the failing pairs
    with the most joint bids, plus bidders failing with at least two of them."""
    failing = [s for s in screens if s.fails(alpha)]
    broad = frozenset(b for s in failing for b in s.pair)
    if not failing:
        return RingFlags(frozenset(), frozenset())
    top = max(s.n_joint for s in failing)
    seed = {b for s in failing if s.n_joint == top for b in s.pair}
    partners: dict[str, set[str]] = {}
    for s in failing:
        i, j = s.pair
        partners.setdefault(i, set()).add(j)
        partners.setdefault(j, set()).add(i)
    tight = set(seed) | {b for b in broad - seed if len(partners[b] & seed) >= 2}
    return RingFlags(broad, frozenset(tight))


@dataclass
class ScreenReport:
    alpha: float
    min_joint: int
    whiten: bool
    screened: tuple[str, ...]
    pairs: list[PairScreen]
    market: ExchangeabilityResult | None
    flags: RingFlags
    notes: list[str]


def _pair_exchangeability(args):
    """Pair test nested in the full model: only the pair is merged into the pooled block."""
    panel, pair, screened, ssr_u, m_u = args
    try:
        rest = [b for b in screened if b not in pair]
        res_fit = fit_pooled_regression(panel, RegressionSpec.singletons(rest), drop_collinear=True)
        r = m_u - res_fit.m
        F, uta = f_test(res_fit.ssr, ssr_u, r, len(panel.y), m_u)
        res = ExchangeabilityResult("pair", ((pair[0],), (pair[1],)), F, r, m_u, len(panel.y), res_fit.ssr, ssr_u, uta)
        return res, None
    except (ValueError, np.linalg.LinAlgError) as e:
        return None, f"exchangeability {pair[0]}-{pair[1]}: {e}"


def run_screens(
    d: Dataset, alpha: float = 0.05, min_joint: int = 15, whiten: bool = True, workers: int = 1
) -> ScreenReport:
    """Frequent pairs, residual-correlation tests, pair and market F-tests, ring flags."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    pairs = find_frequent_pairs(d, min_joint)
    screened = tuple(sorted({b for p, _ in pairs for b in p}))
    notes: list[str] = []
    panel = Panel.from_dataset(d)
    market = None
    if not screened:
        notes.append("no frequent pairs")
        return ScreenReport(alpha, min_joint, whiten, screened, [], None, RingFlags(frozenset(), frozenset()), notes)

    full = fit_pooled_regression(panel, RegressionSpec.singletons(screened), drop_collinear=True)
    if full.dropped:
        notes.append("dropped collinear columns: " + ", ".join(full.dropped))
    if len(screened) >= 2:
        try:
            market = exchangeability_test(panel, [(b,) for b in screened], "market", drop_collinear=True)
        except ValueError as e:
            notes.append(f"market exchangeability: {e}")

    jobs = [(panel, p, screened, full.ssr, full.m) for p, _ in pairs]
    exch = _parallel.pmap(_pair_exchangeability, jobs, workers)
    out = []
    for (p, n), (ex, err) in zip(pairs, exch):
        pn = [err] if err else []
        ri, rj = pair_residuals(full, *p, whiten=whiten)
        try:
            ind = independence_test(ri, rj, p)
        except ValueError as e:
            ind = None
            pn.append(f"independence: {e}")
        tab = pair_table(d, p)
        out.append(
            PairScreen(p, n, tab["expected_wins"], tab["first_wins"], tab["second_wins"], ind, ex, tuple(pn))
        )
    return ScreenReport(alpha, min_joint, whiten, screened, out, market, flag_ring(out, alpha), notes)


def _r(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else round(float(x), 10)


def _exch_json(e: ExchangeabilityResult | None) -> dict | None:
    if e is None:
        return None
    return {
        "scope": e.scope,
        "F": _r(e.F),
        "upper_tail_area": _r(e.upper_tail_area),
        "r": e.r,
        "m": e.m,
        "T": e.T,
        "dof": e.T - e.m,
        "ssr_restricted": _r(e.ssr_c),
        "ssr_unrestricted": _r(e.ssr_u),
    }


def report_to_json(rep: ScreenReport, header: Mapping[str, object] | None = None) -> dict:
    pairs = []
    for s in rep.pairs:
        ind = s.independence
        pairs.append(
            {
                "pair": list(s.pair),
                "simultaneous_bids": s.n_joint,
                "expected_wins": _r(s.expected_wins),
                "first_wins": s.first_wins,
                "second_wins": s.second_wins,
                "independence": None
                if ind is None
                else {"correlation": _r(ind.statistic), "p_value": _r(ind.p_value), "n": ind.n_joint, "dof": ind.dof},
                "exchangeability": _exch_json(s.exchangeability),
                "fails": s.fails(rep.alpha),
                "notes": list(s.notes),
            }
        )
    return {
        **dict(header or {}),
        "alpha": rep.alpha,
        "min_joint": rep.min_joint,
        "residuals": "whitened" if rep.whiten else "raw",
        "screened_bidders": list(rep.screened),
        "market": _exch_json(rep.market),
        "pairs": pairs,
        "broad_ring": sorted(rep.flags.broad),
        "tight_ring": sorted(rep.flags.tight),
        "notes": rep.notes,
    }


def write_screens_json(rep: ScreenReport, path: str | Path, header: Mapping[str, object] | None = None) -> None:
    Path(path).write_text(json.dumps(report_to_json(rep, header), indent=2, sort_keys=False) + "\n")


def load_rings(path: str | Path) -> dict[str, list[str]]:
    data = json.loads(Path(path).read_text())
    return {"broad": data["broad_ring"], "tight": data["tight_ring"]}
