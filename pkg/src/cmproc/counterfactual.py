"""Rent the buyer would pay under the collusion-proof auction.

For each auction won by a hypothesised ring member the counterfactual price
``o`` replaces the winner's recovered cost ``c~``; the rent is ``o - c~``.
Totals are expressed as a share of actual spending and optionally inflated
by the marginal excess burden of the taxes that fund it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .gpv import PseudoCost
from .market_data import Dataset, ProjectAuction

log = logging.getLogger(__name__)

MODES = ("cm", "paper")
DEFAULT_MEB = 0.3
EXCLUSION_WARN = 0.2


@dataclass(frozen=True)
class RingHypothesis:
    members: frozenset
    label: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))

    def check(self, d: Dataset) -> None:
        unknown = sorted(self.members - set(d.bidders))
        if unknown:
            raise ValueError(f"ring {self.label!r} names unknown bidder(s): {', '.join(unknown)}")


@dataclass(frozen=True)
class CmPrice:
    o: float
    c_tilde: float
    status: str  # ok | not-ring | reserve | excluded
    reason: str = ""


def _usable(pc: PseudoCost | None) -> bool:
    return pc is not None and not pc.flags and math.isfinite(pc.c_hat)


def cm_price(
    a: ProjectAuction,
    costs: Mapping[tuple[str, str], PseudoCost],
    ring: RingHypothesis,
    mode: str = "cm",
    reserve: bool = True,
) -> CmPrice:
    """Counterfactual price in one auction.

    ``cm``: lowest usable cost among participants outside the ring.
    ``paper``: lowest usable cost among the other ring participants.
    With ``reserve`` the price is capped at the engineer's estimate, which
    also stands in when the comparison set is empty; without it an empty set
    excludes the auction.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    w = a.winner.bidder_id
    pc = costs.get((a.id, w))
    if not _usable(pc):
        why = "missing" if pc is None else ",".join(sorted(pc.flags)) or "non-finite"
        return CmPrice(math.nan, math.nan, "excluded", f"winner cost {why}")
    c_t = pc.c_hat
    if w not in ring.members:
        return CmPrice(c_t, c_t, "not-ring")
    if mode == "cm":
        pool = [b.bidder_id for b in a.bids if b.bidder_id not in ring.members]
    else:
        pool = [b.bidder_id for b in a.bids if b.bidder_id in ring.members and b.bidder_id != w]
    vals = [costs[(a.id, j)].c_hat for j in pool if _usable(costs.get((a.id, j)))]
    o = min(vals, default=math.inf)
    if reserve and a.engineer_estimate <= o:
        return CmPrice(a.engineer_estimate, c_t, "reserve", "" if vals else "empty comparison set")
    if not vals:
        return CmPrice(math.nan, c_t, "excluded", "empty comparison set")
    return CmPrice(o, c_t, "ok")


def auction_rent(price: CmPrice) -> float:
    """``max(0, o - c~)`` for ring winners, 0 otherwise.

    The floor only binds when recovered costs reorder across bidder types.
    """
    if price.status in ("not-ring", "excluded"):
        return 0.0
    return max(0.0, price.o - price.c_tilde)


def with_meb(pct: float, meb: float = DEFAULT_MEB) -> float:
    return pct * (1.0 + meb)


@dataclass
class RentReport:
    label: str
    members: tuple[str, ...]
    mode: str
    meb: float
    rents: dict[str, float]
    total: float
    base_spend: float
    base_estimate: float
    excluded: dict[str, str]
    reserve_capped: int
    n_auctions: int

    @property
    def pct(self) -> float:
        return self.total / self.base_spend if self.base_spend > 0 else math.nan

    @property
    def pct_with_meb(self) -> float:
        return with_meb(self.pct, self.meb)

    @property
    def pct_of_estimate(self) -> float:
        return self.total / self.base_estimate if self.base_estimate > 0 else math.nan

    @property
    def excluded_share(self) -> float:
        return len(self.excluded) / self.n_auctions if self.n_auctions else 0.0


def ring_rent(
    d: Dataset,
    costs: Mapping[tuple[str, str], PseudoCost],
    ring: RingHypothesis,
    meb: float = DEFAULT_MEB,
    mode: str = "cm",
    reserve: bool = True,
) -> RentReport:
    ring.check(d)
    if meb < 0:
        raise ValueError("meb must be nonnegative")
    rents, excluded, spend, est, capped = {}, {}, [], [], 0
    for a in sorted(d.auctions, key=lambda a: a.id):
        p = cm_price(a, costs, ring, mode, reserve)
        if p.status == "excluded":
            excluded[a.id] = p.reason
            continue
        capped += p.status == "reserve"
        rents[a.id] = auction_rent(p)
        spend.append(a.winner.bid)
        est.append(a.engineer_estimate)
    rep = RentReport(
        ring.label, tuple(sorted(ring.members)), mode, meb, rents, math.fsum(rents.values()),
        math.fsum(spend), math.fsum(est), excluded, capped, len(d.auctions),
    )
    if rep.excluded_share > EXCLUSION_WARN:
        log.warning(
            "ring %s (%s): %d of %d auctions excluded", ring.label, mode, len(excluded), len(d.auctions)
        )
    return rep


@dataclass
class RentSummary:
    reports: list[RentReport]
    nested: list[dict] = field(default_factory=list)

    def get(self, label: str, mode: str = "cm") -> RentReport:
        for r in self.reports:
            if r.label == label and r.mode == mode:
                return r
        raise KeyError((label, mode))


def rent_report(
    d: Dataset,
    costs: Sequence[PseudoCost] | Mapping[tuple[str, str], PseudoCost],
    rings: Sequence[RingHypothesis],
    meb: float = DEFAULT_MEB,
    modes: Sequence[str] = MODES,
    reserve: bool = True,
) -> RentSummary:
    """Rent per ring and pricing mode, plus total-rent checks for every nested ring pair."""
    if not isinstance(costs, Mapping):
        costs = {(c.auction_id, c.bidder_id): c for c in costs}
    reps = [ring_rent(d, costs, r, meb, m, reserve) for m in modes for r in rings]
    nested = []
    for m in modes:
        for small in rings:
            for big in rings:
                if small is not big and small.members <= big.members:
                    a, b = ring_rent_lookup(reps, small.label, m), ring_rent_lookup(reps, big.label, m)
                    nested.append(
                        {"mode": m, "subset": small.label, "superset": big.label,
                         "holds": a.total <= b.total + 1e-12 * max(1.0, abs(b.total))}
                    )
    return RentSummary(reps, nested)


def ring_rent_lookup(reps: Sequence[RentReport], label: str, mode: str) -> RentReport:
    return next(r for r in reps if r.label == label and r.mode == mode)


def _f(x: float) -> float | None:
    return round(x, 10) if math.isfinite(x) else None


def summary_to_json(s: RentSummary, primary_mode: str = "cm", header: Mapping[str, object] | None = None) -> dict:
    rings = []
    for r in s.reports:
        reasons: dict[str, int] = {}
        for why in r.excluded.values():
            reasons[why] = reasons.get(why, 0) + 1
        rings.append(
            {
                "label": r.label,
                "members": list(r.members),
                "mode": r.mode,
                "primary": r.mode == primary_mode,
                "total_rent": _f(r.total),
                "base_spend": _f(r.base_spend),
                "pct": _f(r.pct),
                "pct_with_meb": _f(r.pct_with_meb),
                "meb": r.meb,
                "base_engineer_estimate": _f(r.base_estimate),
                "pct_of_engineer_estimate": _f(r.pct_of_estimate),
                "reserve_capped": r.reserve_capped,
                "excluded": {"count": len(r.excluded), "share": _f(r.excluded_share), "reasons": reasons},
                "auctions_with_rent": sum(v > 0 for v in r.rents.values()),
            }
        )
    return {
        **dict(header or {}),
        "pricing_mode": primary_mode,
        "rings": rings,
        "nested_monotonicity": s.nested,
        "note": "percentages and MEB arithmetic are scale-free; dollar totals depend on the sample",
    }


def write_rent_json(s: RentSummary, path: str | Path, primary_mode: str = "cm", header=None) -> None:
    Path(path).write_text(json.dumps(summary_to_json(s, primary_mode, header), indent=2) + "\n")
