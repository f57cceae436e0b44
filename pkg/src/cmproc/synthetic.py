"""Synthetic procurement markets with known cost primitives.

Two generators share the bid-file format of :mod:`cmproc.market_data`:

* :func:`generate_dataset` draws costs from the type families, scales them by
  the engineer's estimate and bids the (symmetric or two-type) equilibrium;
  backlog builds up from wins and is worked off at a constant rate.
* :func:`generate_regression_panel` draws normalised bids directly from the
  linear fixed-effects model the screens assume, so competitive behaviour
  is exactly the screens' null.

Each auction uses its own random stream derived from ``(seed, auction)``,
so draws never depend on how the work is scheduled.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from . import _parallel
from .equilibrium import (
    AsymmetricEquilibrium,
    CostFamily,
    asymmetric_equilibrium_solve,
    symmetric_equilibrium_bid,
)
from .market_data import BidRow, Dataset, build_dataset, fmt6, to_rows

# latitude / longitude box the sites and offices are drawn from
CALIFORNIA_BOX = (32.5, 42.0, -124.0, -114.5)

TRUTH_COLUMNS = ("auction_id", "bidder_id", "true_cost", "ring_member", "cover_bid")

# stream families under one seed
_AUCTION, _BIDDER, _CARTEL, _PANEL = 0, 1, 2, 3


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class XDist:
    """Distribution of the engineer's estimate (millions).

    ``constant`` uses ``a``; ``uniform`` is U[a, b]; ``lognormal`` has log-mean
    ``a`` and log-sd ``b``.
    """

    kind: str = "uniform"
    a: float = 1.0
    b: float = 10.0

    def __post_init__(self):
        if self.kind == "constant":
            ok = self.a > 0
        elif self.kind == "uniform":
            ok = 0 < self.a < self.b
        elif self.kind == "lognormal":
            ok = self.b > 0
        else:
            raise ValueError(f"unknown X distribution {self.kind!r}")
        if not ok:
            raise ValueError(f"invalid parameters for {self.kind} X distribution")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        return float(rng.lognormal(self.a, self.b))


@dataclass(frozen=True)
class CartelSpec:
    """Planted ring: member ids plus the conduct rule.

    ``designated-low``: in every auction with two or more members, the member
    with the lowest competitive bid keeps it and the others bid that bid
    times ``1 + u``, ``u ~ U[cover_range]``. ``uniform-markup``: members
    scale their competitive bids by ``1 + markup``.
    """

    members: tuple[str, ...]
    conduct: str = "designated-low"
    markup: float = 0.1
    cover_range: tuple[float, float] = (0.05, 0.15)

    def __post_init__(self):
        if not self.members:
            raise ValueError("cartel needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError("duplicate cartel member")
        if self.conduct not in ("designated-low", "uniform-markup"):
            raise ValueError(f"unknown conduct {self.conduct!r}")
        if not self.markup > 0:
            raise ValueError("markup must be positive")
        lo, hi = self.cover_range
        if not 0 < lo <= hi:
            raise ValueError("cover range must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class MarketConfig:
    """Equilibrium market: auction count, participation and cost primitives.

    ``N`` is uniform on ``n_range``; each slot is a regular (type 1) bidder
    with probability ``p_regular``. Bidders are drawn without replacement from
    pools of ``n_regular`` regular and ``n_fringe`` fringe firms.
    """

    n_auctions: int = 500
    n_range: tuple[int, int] = (2, 6)
    p_regular: float = 0.4
    family0: CostFamily = field(default_factory=CostFamily)
    family1: CostFamily = field(default_factory=CostFamily)
    x_dist: XDist = field(default_factory=XDist)
    n_regular: int = 12
    n_fringe: int = 60
    seed: int = 0
    cartel: CartelSpec | None = None
    start_date: dt.date = dt.date(2002, 1, 1)
    days_between: int = 1
    duration_days: int = 182
    grid_size: int = 2000
    region: tuple[float, float, float, float] = CALIFORNIA_BOX

    def __post_init__(self):
        n_lo, n_hi = self.n_range
        if self.n_auctions < 1:
            raise ValueError("need at least one auction")
        if not 2 <= n_lo <= n_hi:
            raise ValueError("participation range needs 2 <= n_lo <= n_hi")
        if n_hi > self.n_regular + self.n_fringe:
            raise ValueError("n_hi exceeds the bidder pool")
        if not 0 <= self.p_regular <= 1:
            raise ValueError("p_regular must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.days_between < 1 or self.duration_days < 1:
            raise ValueError("days_between and duration_days must be positive")

    def regular_ids(self) -> list[str]:
        return [f"R{i + 1:03d}" for i in range(self.n_regular)]

    def fringe_ids(self) -> list[str]:
        return [f"F{i + 1:03d}" for i in range(self.n_fringe)]


@dataclass(frozen=True)
class TruthRow:
    true_cost: float
    ring_member: bool = False
    cover_bid: bool = False


@dataclass(frozen=True)
class SimulatedMarket:
    """Generated bids plus the sidecar ground truth.

    ``duration_days`` is the work-off horizon used to rebuild backlog from
    wins after bids change; ``None`` keeps the drawn backlog.
    """

    dataset: Dataset
    truth: Mapping[tuple[str, str], TruthRow]
    duration_days: int | None = 182


def _offices(ids: list[str], seed: int, start: int, region) -> dict[str, tuple[float, float]]:
    lat0, lat1, lon0, lon1 = region
    out = {}
    for i, b in enumerate(ids):
        r = _rng(seed, _BIDDER, start + i)
        out[b] = (float(r.uniform(lat0, lat1)), float(r.uniform(lon0, lon1)))
    return out


@dataclass(frozen=True)
class _Draw:
    index: int
    x: float
    site: tuple[float, float]
    n0: int
    n1: int
    bidders: tuple[tuple[str, int, float], ...]  # (id, type, base-scale cost)


def _draw_auction(cfg: MarketConfig, ell: int) -> _Draw:
    rng = _rng(cfg.seed, _AUCTION, ell)
    n_lo, n_hi = cfg.n_range
    N = int(rng.integers(n_lo, n_hi + 1))
    n1 = min(int(rng.binomial(N, cfg.p_regular)), cfg.n_regular)
    n0 = N - n1
    if n0 > cfg.n_fringe:
        n0 = cfg.n_fringe
        n1 = N - n0
    regs = sorted(rng.choice(cfg.n_regular, size=n1, replace=False).tolist()) if n1 else []
    frs = sorted(rng.choice(cfg.n_fringe, size=n0, replace=False).tolist()) if n0 else []
    x = cfg.x_dist.sample(rng)
    lat0, lat1, lon0, lon1 = cfg.region
    site = (float(rng.uniform(lat0, lat1)), float(rng.uniform(lon0, lon1)))
    c1 = cfg.family1.sample(rng, n1)
    c0 = cfg.family0.sample(rng, n0)
    rid, fid = cfg.regular_ids(), cfg.fringe_ids()
    bidders = tuple((rid[i], 1, float(c)) for i, c in zip(regs, c1)) + tuple(
        (fid[i], 0, float(c)) for i, c in zip(frs, c0)
    )
    return _Draw(ell, x, site, n0, n1, bidders)


def _needs_asymmetric(cfg: MarketConfig, n0: int, n1: int) -> bool:
    return n0 > 0 and n1 > 0 and cfg.family0 != cfg.family1


def _solve_pair(args):
    cfg, n0, n1 = args
    return asymmetric_equilibrium_solve(cfg.family0, cfg.family1, n0, n1, grid_size=cfg.grid_size)


def equilibrium_bid(
    k: int, c: float, n0: int, n1: int, cfg: MarketConfig, table: AsymmetricEquilibrium | None = None
) -> float:
    """Base-scale equilibrium bid of a type-k bidder with cost ``c``."""
    if table is not None:
        return float(table.bid(k, c))
    # one type present, or both types share a family: symmetric market
    F = cfg.family1 if n0 == 0 else cfg.family0
    return symmetric_equilibrium_bid(c, n0 + n1, F)


def backlog_from_wins(rows: Iterable[BidRow], duration_days: int) -> list[BidRow]:
    """Recompute backlog: each won project is worked off linearly over ``duration_days``.

    Backlog at a letting date counts projects won on strictly earlier dates,
    valued at the winning bid.
    """
    rows = list(rows)
    by_auction: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        by_auction.setdefault(r.auction_id, []).append(i)
    order = sorted(by_auction, key=lambda a: (rows[by_auction[a][0]].letting_date, a))
    wins: dict[str, list[tuple[dt.date, float]]] = {}
    out = list(rows)
    for aid in order:
        idx = by_auction[aid]
        t = rows[idx[0]].letting_date
        for i in idx:
            r = rows[i]
            terms = [
                v * max(0.0, 1.0 - (t - d).days / duration_days) for d, v in wins.get(r.bidder_id, ()) if d < t
            ]
            out[i] = replace(r, backlog=math.fsum(terms))
        w = min(idx, key=lambda i: (rows[i].bid, rows[i].bidder_id))
        wins.setdefault(rows[w].bidder_id, []).append((t, rows[w].bid))
    return out


def generate_dataset(cfg: MarketConfig, workers: int = 1) -> SimulatedMarket:
    """Draw ``cfg.n_auctions`` equilibrium auctions; plant the cartel if configured."""
    draws = [_draw_auction(cfg, ell) for ell in range(cfg.n_auctions)]
    pairs = sorted({(d.n0, d.n1) for d in draws if _needs_asymmetric(cfg, d.n0, d.n1)})
    solved = _parallel.pmap(_solve_pair, [(cfg, n0, n1) for n0, n1 in pairs], workers=workers)
    tables = dict(zip(pairs, solved))

    offices = _offices(cfg.regular_ids(), cfg.seed, 0, cfg.region)
    offices.update(_offices(cfg.fringe_ids(), cfg.seed, cfg.n_regular, cfg.region))
    width = len(str(cfg.n_auctions))
    rows, truth = [], {}
    for d in draws:
        aid = f"L{d.index + 1:0{width}d}"
        date = cfg.start_date + dt.timedelta(days=d.index * cfg.days_between)
        table = tables.get((d.n0, d.n1))
        for bidder, k, c in d.bidders:
            b = d.x * equilibrium_bid(k, c, d.n0, d.n1, cfg, table)
            rows.append(
                BidRow(aid, date, d.x, d.site[0], d.site[1], bidder, *offices[bidder], bid=b, backlog=0.0, type_k=k)
            )
            truth[(aid, bidder)] = TruthRow(true_cost=d.x * c)
    rows = backlog_from_wins(rows, cfg.duration_days)
    market = SimulatedMarket(build_dataset(rows), MappingProxyType(truth), cfg.duration_days)
    if cfg.cartel is not None:
        market = plant_cartel(market, cfg.cartel, seed=cfg.seed)
    return market


def plant_cartel(market: SimulatedMarket, cartel: CartelSpec, seed: int = 0) -> SimulatedMarket:
    """Rewrite member bids according to the cartel's conduct rule.

    Only auctions with at least two members change. Truth rows of members get
    ``ring_member``; rewritten bids get ``cover_bid``.
    """
    d = market.dataset
    members = set(cartel.members)
    unknown = sorted(members - set(d.bidders))
    if unknown:
        raise ValueError(f"unknown cartel member(s): {', '.join(unknown)}")
    new_bid: dict[tuple[str, str], float] = {}
    for ell, a in enumerate(d.auctions):
        present = [b for b in a.bids if b.bidder_id in members]
        if len(present) < 2:
            continue
        if cartel.conduct == "uniform-markup":
            for b in present:
                new_bid[(a.id, b.bidder_id)] = b.bid * (1.0 + cartel.markup)
        else:
            rng = _rng(seed, _CARTEL, ell)
            lead = min(present, key=lambda b: (b.bid, b.bidder_id))
            lo, hi = cartel.cover_range
            for b in present:
                if b is lead:
                    continue
                new_bid[(a.id, b.bidder_id)] = lead.bid * (1.0 + float(rng.uniform(lo, hi)))

    rows = [replace(r, bid=new_bid.get((r.auction_id, r.bidder_id), r.bid)) for r in to_rows(d)]
    if market.duration_days is not None:
        rows = backlog_from_wins(rows, market.duration_days)
    truth = {}
    for key, t in market.truth.items():
        truth[key] = replace(
            t, ring_member=t.ring_member or key[1] in members, cover_bid=t.cover_bid or key in new_bid
        )
    return SimulatedMarket(build_dataset(rows), MappingProxyType(truth), market.duration_days)


def write_truth_csv(market: SimulatedMarket, path: str | Path, comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for a in market.dataset.auctions:
            for b in a.bids:
                t = market.truth[(a.id, b.bidder_id)]
                cost = "" if math.isnan(t.true_cost) else fmt6(t.true_cost)
                w.writerow([a.id, b.bidder_id, cost, int(t.ring_member), int(t.cover_bid)])


def load_truth_csv(path: str | Path) -> dict[tuple[str, str], TruthRow]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    out = {}
    for r in csv.DictReader(lines):
        cost = float(r["true_cost"]) if r["true_cost"] else math.nan
        out[(r["auction_id"], r["bidder_id"])] = TruthRow(cost, r["ring_member"] == "1", r["cover_bid"] == "1")
    return out


# -- regression-null panel ---------------------------------------------------


@dataclass(frozen=True)
class PanelConfig:
    """Competitive panel drawn from the screens' linear model.

    ``bid / X = mu_l + gamma . (LDIST, CAP, UTIL, LMDIST) + sigma * eps`` with
    ``mu_l = intercept + fe_sd * z_l`` and standard normal ``z``, ``eps``.
    ``n_core`` regular bidders take each bid slot with probability
    ``p_core`` so they meet often; the rest come from ``n_other`` fringe firms.
    Backlog is drawn per bid (scale per bidder) and does not react to wins.
    """

    n_auctions: int = 400
    n_range: tuple[int, int] = (3, 6)
    n_core: int = 8
    n_other: int = 40
    p_core: float = 0.6
    gamma: tuple[float, float, float, float] = (0.01, 0.002, 0.05, -0.01)
    intercept: float = 1.0
    fe_sd: float = 0.05
    sigma: float = 0.05
    backlog_scale: float = 5.0
    x_dist: XDist = field(default_factory=XDist)
    seed: int = 0
    start_date: dt.date = dt.date(2002, 1, 1)
    region: tuple[float, float, float, float] = CALIFORNIA_BOX

    def __post_init__(self):
        n_lo, n_hi = self.n_range
        if not 2 <= n_lo <= n_hi or n_hi > self.n_core + self.n_other:
            raise ValueError("invalid participation range")
        if not 0 <= self.p_core <= 1 or self.sigma <= 0 or self.fe_sd < 0:
            raise ValueError("invalid panel parameters")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def core_ids(self) -> list[str]:
        return [f"R{i + 1:03d}" for i in range(self.n_core)]

    def other_ids(self) -> list[str]:
        return [f"F{i + 1:03d}" for i in range(self.n_other)]


def generate_regression_panel(cfg: PanelConfig) -> SimulatedMarket:
    """Competitive panel satisfying the screens' null exactly (normal errors)."""
    from .screens import bid_covariates

    core, other = cfg.core_ids(), cfg.other_ids()
    offices = _offices(core, cfg.seed, 0, cfg.region)
    offices.update(_offices(other, cfg.seed, cfg.n_core, cfg.region))
    scale = {b: float(_rng(cfg.seed, _PANEL, i).uniform(0.2, 1.0)) * cfg.backlog_scale for i, b in enumerate(core + other)}
    width = len(str(cfg.n_auctions))
    lat0, lat1, lon0, lon1 = cfg.region
    n_lo, n_hi = cfg.n_range

    rows, shocks = [], {}
    for ell in range(cfg.n_auctions):
        rng = _rng(cfg.seed, _AUCTION, ell)
        N = int(rng.integers(n_lo, n_hi + 1))
        nc = min(int(rng.binomial(N, cfg.p_core)), cfg.n_core)
        if N - nc > cfg.n_other:
            nc = N - cfg.n_other
        ids = sorted([core[i] for i in rng.choice(cfg.n_core, nc, replace=False)] + [
            other[i] for i in rng.choice(cfg.n_other, N - nc, replace=False)
        ])
        x = cfg.x_dist.sample(rng)
        site = (float(rng.uniform(lat0, lat1)), float(rng.uniform(lon0, lon1)))
        aid = f"L{ell + 1:0{width}d}"
        mu = cfg.intercept + cfg.fe_sd * float(rng.standard_normal())
        eps = rng.standard_normal(N)
        backlog = rng.random(N)
        date = cfg.start_date + dt.timedelta(days=ell)
        for j, b in enumerate(ids):
            shocks[(aid, b)] = (mu, float(eps[j]))
            rows.append(
                BidRow(aid, date, x, site[0], site[1], b, *offices[b], bid=1.0, backlog=float(backlog[j]) * scale[b],
                       type_k=int(b in core))
            )

    # covariates do not depend on bids, so a placeholder pass fixes them
    base = build_dataset(rows)
    X = bid_covariates(base)
    g = np.asarray(cfg.gamma)
    new_bid, truth = {}, {}
    for (a, b), xrow in zip(base.iter_bids(), X):
        mu, e = shocks[(a.id, b.bidder_id)]
        y = mu + float(g @ xrow) + cfg.sigma * e
        if y <= 0:
            raise ValueError("non-positive normalised bid; lower sigma or gamma")
        new_bid[(a.id, b.bidder_id)] = a.engineer_estimate * y
        truth[(a.id, b.bidder_id)] = TruthRow(true_cost=math.nan)
    rows = [replace(r, bid=new_bid[(r.auction_id, r.bidder_id)]) for r in rows]
    return SimulatedMarket(build_dataset(rows), MappingProxyType(truth), None)
