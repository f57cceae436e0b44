"""Pseudo-cost recovery from the asymmetric first-order condition.

A type-k bid ``b`` in an auction with ``n0, n1`` bidders of each type reveals

    c = b - 1 / [(n_k - 1) psi_k(b) + n_k' psi_k'(b)],     psi = g / (1 - G).

With ``d = ln b`` and log-bid hazards ``psi_d = b psi_b`` the same cost reads
``e^d - e^d / [(n_k - 1) psi_kd + n_k' psi_k'd]``; estimation works on log
bids, so this is the form used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .equilibrium import CostFamily, symmetric_bid_hazard
from .lpe import G_CLAMP, G_DENSITY_FLOOR, HazardEstimates, LpeSample
from .market_data import Dataset, fmt6

NEGATIVE_COST = "negative_cost"
EXTRAPOLATED = "extrapolated"
CLAMPED_HAZARD = "clamped_hazard"
INVALID = "invalid"


class InversionError(ValueError):
    def __init__(self, message: str, clamped: bool = False):
        super().__init__(message)
        self.clamped = clamped


@dataclass(frozen=True)
class HazardPair:
    """Type hazards at one point; ``log=True`` means they refer to log bids."""

    psi_0: float
    psi_1: float
    log: bool = False

    def __post_init__(self):
        for v in (self.psi_0, self.psi_1):
            if not (v >= 0 or math.isnan(v)):
                raise ValueError("hazards must be nonnegative")

    def get(self, k: int) -> float:
        return self.psi_1 if k else self.psi_0


@dataclass(frozen=True)
class PseudoCost:
    auction_id: str
    bidder_id: str
    b: float
    type_k: int
    c_hat: float
    flags: frozenset = frozenset()

    @property
    def markup(self) -> float:
        return self.b - self.c_hat

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def invert_bid(
    b: float, type_k: int, n0: int, n1: int, hz: HazardPair, auction_id: str = "", bidder_id: str = ""
) -> PseudoCost:
    """Pseudo-cost of one bid.

    Hazards of a type that does not enter the denominator may be NaN.
    Raises :class:`InversionError` when the denominator is zero or not finite.
    """
    if not b > 0:
        raise ValueError("bid must be positive")
    if type_k not in (0, 1):
        raise ValueError("type must be 0 or 1")
    counts = (n0, n1)
    own, other = counts[type_k] - 1, counts[1 - type_k]
    if own < 0:
        raise ValueError("bidder's own type must be present")
    if own + other < 1:
        raise ValueError("need at least one rival")
    d = math.log(b)
    scale = 1.0 if hz.log else b  # bid-space hazards become log-bid hazards
    denom = 0.0
    if own:
        denom += own * hz.get(type_k) * scale
    if other:
        denom += other * hz.get(1 - type_k) * scale
    if not (denom > 0 and math.isfinite(denom)):
        raise InversionError(f"FOC denominator {denom!r} for bid {b} (n0={n0}, n1={n1})", clamped=True)
    e = math.exp(d)
    return PseudoCost(auction_id, bidder_id, b, type_k, e - e / denom)


def invert_dataset(d: Dataset, est: HazardEstimates) -> list[PseudoCost]:
    """Pseudo-cost for every bid, in dataset order.

    Failed inversions are returned with ``c_hat = nan`` and the ``invalid``
    flag; negative costs, hazards distorted by clamping and evaluation
    points outside a type's observed bid or estimate range are flagged but
    kept.
    """
    samples = [LpeSample.from_dataset(d, k, log=est.log) for k in (0, 1)]
    ranges = []
    for s in samples:
        if len(s):
            ranges.append((s.b.min(), s.b.max(), s.x.min(), s.x.max()))
        else:
            ranges.append(None)
    out = []
    for i, (a, bid) in enumerate(d.iter_bids()):
        if (a.id, bid.bidder_id) != (est.auction_ids[i], est.bidder_ids[i]):
            raise ValueError("estimates were not computed on this dataset")
        k = bid.type_k
        counts = (a.n0, a.n1)
        used = [j for j in (0, 1) if (counts[j] - (j == k)) > 0]
        flags = set()
        v = math.log(bid.bid) if est.log else bid.bid
        floored = 0
        for j in used:
            G, g = est.G[i, j], est.g[i, j]
            # a clamped survival inflates the hazard; a floored density with G at its
            # lower clamp is a genuine near-zero hazard and only matters if every term is one
            if G >= 1.0 - G_CLAMP:
                flags.add(CLAMPED_HAZARD)
            floored += g <= G_DENSITY_FLOOR
            r = ranges[j]
            if r is None or not (r[0] <= v <= r[1] and r[2] <= a.engineer_estimate <= r[3]):
                flags.add(EXTRAPOLATED)
        if used and floored == len(used):
            flags.add(CLAMPED_HAZARD)
        psi = est.g[i] / (1.0 - est.G[i])
        try:
            pc = invert_bid(bid.bid, k, a.n0, a.n1, HazardPair(psi[0], psi[1], log=est.log), a.id, bid.bidder_id)
        except (InversionError, ValueError):
            out.append(PseudoCost(a.id, bid.bidder_id, bid.bid, k, math.nan, frozenset(flags | {INVALID})))
            continue
        if pc.c_hat < 0:
            flags.add(NEGATIVE_COST)
        out.append(PseudoCost(a.id, bid.bidder_id, bid.bid, k, pc.c_hat, frozenset(flags)))
    return out


def true_symmetric_hazards(d: Dataset, family: CostFamily, log: bool = True) -> HazardEstimates:
    """Exact ``G, g`` of a symmetric equilibrium market (both type columns equal).

    Each bid is evaluated with its own auction's ``N`` and ``X``; bids scale
    as ``X * s(c)``.
    """
    G, g, aids, bids = [], [], [], []
    for a, b in d.iter_bids():
        Gv, gv, _ = symmetric_bid_hazard(b.bid, a.n_bidders, family, x=a.engineer_estimate)
        if log:
            gv *= b.bid
        G.append([Gv, Gv])
        g.append([gv, gv])
        aids.append(a.id)
        bids.append(b.bidder_id)
    return HazardEstimates(
        tuple(aids), tuple(bids), np.array(G).reshape(-1, 2), np.array(g).reshape(-1, 2), log, (None, None)
    )


def flag_counts(costs: Iterable[PseudoCost]) -> dict[str, int]:
    out = {NEGATIVE_COST: 0, EXTRAPOLATED: 0, CLAMPED_HAZARD: 0, INVALID: 0}
    for c in costs:
        for f in c.flags:
            out[f] += 1
    return out


def write_costs_csv(costs: Sequence[PseudoCost], path: str | Path, comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["auction_id", "bidder_id", "b", "c_hat", "markup", "flags"])
        for c in costs:
            ok = math.isfinite(c.c_hat)
            w.writerow(
                [
                    c.auction_id,
                    c.bidder_id,
                    fmt6(c.b),
                    fmt6(c.c_hat) if ok else "",
                    fmt6(c.markup) if ok else "",
                    ";".join(sorted(c.flags)),
                ]
            )


def load_costs_csv(path: str | Path, types: dict[tuple[str, str], int] | None = None) -> list[PseudoCost]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        key = (r["auction_id"], r["bidder_id"])
        c = float(r["c_hat"]) if r["c_hat"] else math.nan
        flags = frozenset(f for f in r["flags"].split(";") if f)
        out.append(PseudoCost(key[0], key[1], float(r["b"]), (types or {}).get(key, 0), c, flags))
    return out
