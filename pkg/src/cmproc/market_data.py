"""Auction/bid data: loading, validation, enrichment and bidder typing.

Bidders are split into fringe (``type_k = 0``) and regular (``type_k = 1``)
bidders by revenue share and participation rate. Every bid row carries the
covariates used downstream (distance to site, backlog, utilization).
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

EARTH_RADIUS_MILES = 3958.8

INPUT_COLUMNS = (
    "auction_id",
    "letting_date",
    "engineer_estimate",
    "site_lat",
    "site_lon",
    "bidder_id",
    "office_lat",
    "office_lon",
    "bid",
    "backlog",
)
ENRICHED_COLUMNS = INPUT_COLUMNS + ("type_k", "distance", "capacity", "utilization", "won")


class SchemaError(ValueError):
    """Input file does not have the expected columns or values."""


class DuplicateBidError(ValueError):
    """The same bidder appears twice in one auction."""


@dataclass(frozen=True)
class Bidder:
    id: str
    office_lat: float
    office_lon: float
    type_k: int = 0
    revenue_share: float = 0.0
    participation_rate: float = 0.0
    capacity: float = 0.0


@dataclass(frozen=True)
class BidRecord:
    auction_id: str
    bidder_id: str
    bid: float
    type_k: int
    distance: float
    backlog: float
    utilization: float
    won: bool


@dataclass(frozen=True)
class ProjectAuction:
    id: str
    letting_date: dt.date
    engineer_estimate: float
    site_lat: float
    site_lon: float
    bids: tuple[BidRecord, ...]

    @property
    def n_bidders(self) -> int:
        return len(self.bids)

    @property
    def n0(self) -> int:
        return sum(1 for b in self.bids if b.type_k == 0)

    @property
    def n1(self) -> int:
        return sum(1 for b in self.bids if b.type_k == 1)

    @property
    def winner(self) -> BidRecord:
        return next(b for b in self.bids if b.won)

    def bidder_ids(self) -> tuple[str, ...]:
        return tuple(b.bidder_id for b in self.bids)

    def bid_of(self, bidder_id: str) -> BidRecord:
        for b in self.bids:
            if b.bidder_id == bidder_id:
                return b
        raise KeyError(f"bidder {bidder_id!r} not in auction {self.id!r}")


@dataclass(frozen=True)
class Dataset:
    bidders: Mapping[str, Bidder]
    auctions: tuple[ProjectAuction, ...]
    dropped_auctions: int = 0

    @property
    def n_bids(self) -> int:
        return sum(a.n_bidders for a in self.auctions)

    def auction(self, auction_id: str) -> ProjectAuction:
        for a in self.auctions:
            if a.id == auction_id:
                return a
        raise KeyError(auction_id)

    def iter_bids(self) -> Iterable[tuple[ProjectAuction, BidRecord]]:
        for a in self.auctions:
            for b in a.bids:
                yield a, b


@dataclass(frozen=True)
class BidRow:
    """One raw input row, before enrichment."""

    auction_id: str
    letting_date: dt.date
    engineer_estimate: float
    site_lat: float
    site_lon: float
    bidder_id: str
    office_lat: float
    office_lon: float
    bid: float
    backlog: float
    type_k: int | None = None
    line: int | None = None


@dataclass(frozen=True)
class SchemaConfig:
    """Column names in the input file, keyed by canonical name."""

    columns: Mapping[str, str] = field(default_factory=dict)
    date_format: str = "%Y-%m-%d"

    def name(self, canonical: str) -> str:
        return self.columns.get(canonical, canonical)


def _check_coords(lat: float, lon: float, what: str) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"{what} coordinates out of range: ({lat}, {lon})")


def haversine_miles(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    _check_coords(lat1, lon1, "first")
    _check_coords(lat2, lon2, "second")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_MILES * math.asin(min(1.0, math.sqrt(a)))


def compute_distance(bidder: Bidder, auction: ProjectAuction) -> float:
    """Great-circle distance in miles from the bidder's office to the site."""
    return haversine_miles(bidder.office_lat, bidder.office_lon, auction.site_lat, auction.site_lon)


def _winner_index(bids: Sequence[float], ids: Sequence[str]) -> int:
    # lowest bid; ties go to the lexicographically smallest bidder id
    return min(range(len(bids)), key=lambda i: (bids[i], ids[i]))


def build_dataset(rows: Iterable[BidRow]) -> Dataset:
    """Group raw rows into auctions and derive every covariate.

    Single-bidder auctions are dropped and counted. Capacity is the maximum
    backlog a bidder carries over the retained sample; utilization is
    backlog / capacity (0 when capacity is 0).
    """
    by_auction: dict[str, list[BidRow]] = defaultdict(list)
    seen: set[tuple[str, str]] = set()
    for r in rows:
        key = (r.auction_id, r.bidder_id)
        if key in seen:
            where = f" (line {r.line})" if r.line is not None else ""
            raise DuplicateBidError(f"duplicate bid for auction {r.auction_id!r}, bidder {r.bidder_id!r}{where}")
        seen.add(key)
        by_auction[r.auction_id].append(r)

    dropped = 0
    kept: dict[str, list[BidRow]] = {}
    for aid, group in by_auction.items():
        if len(group) < 2:
            dropped += 1
            continue
        kept[aid] = group
    if dropped:
        log.warning("dropped %d single-bidder auction(s)", dropped)

    offices: dict[str, tuple[float, float]] = {}
    capacity: dict[str, float] = defaultdict(float)
    types: dict[str, int] = {}
    for group in kept.values():
        for r in group:
            offices.setdefault(r.bidder_id, (r.office_lat, r.office_lon))
            capacity[r.bidder_id] = max(capacity[r.bidder_id], r.backlog)
            if r.type_k is not None:
                types[r.bidder_id] = r.type_k

    auctions = []
    for aid, group in kept.items():
        first = group[0]
        group = sorted(group, key=lambda r: r.bidder_id)
        ids = [r.bidder_id for r in group]
        w = _winner_index([r.bid for r in group], ids)
        recs = []
        for i, r in enumerate(group):
            cap = capacity[r.bidder_id]
            recs.append(
                BidRecord(
                    auction_id=aid,
                    bidder_id=r.bidder_id,
                    bid=r.bid,
                    type_k=types.get(r.bidder_id, 0),
                    distance=haversine_miles(*offices[r.bidder_id], first.site_lat, first.site_lon),
                    backlog=r.backlog,
                    utilization=r.backlog / cap if cap > 0 else 0.0,
                    won=(i == w),
                )
            )
        auctions.append(
            ProjectAuction(
                id=aid,
                letting_date=first.letting_date,
                engineer_estimate=first.engineer_estimate,
                site_lat=first.site_lat,
                site_lon=first.site_lon,
                bids=tuple(recs),
            )
        )
    auctions.sort(key=lambda a: (a.letting_date, a.id))

    bidders = {
        bid: Bidder(id=bid, office_lat=lat, office_lon=lon, type_k=types.get(bid, 0), capacity=capacity[bid])
        for bid, (lat, lon) in sorted(offices.items())
    }
    d = Dataset(bidders=MappingProxyType(bidders), auctions=tuple(auctions), dropped_auctions=dropped)
    return _with_shares(d)


def _with_shares(d: Dataset) -> Dataset:
    won_rev: dict[str, float] = defaultdict(float)
    entered: dict[str, int] = defaultdict(int)
    for a in d.auctions:
        for b in a.bids:
            entered[b.bidder_id] += 1
            if b.won:
                won_rev[b.bidder_id] += b.bid
    total = sum(won_rev[k] for k in sorted(won_rev))
    L = len(d.auctions)
    bidders = {
        k: replace(
            v,
            revenue_share=won_rev[k] / total if total > 0 else 0.0,
            participation_rate=entered[k] / L if L else 0.0,
        )
        for k, v in d.bidders.items()
    }
    return replace(d, bidders=MappingProxyType(bidders))


def _parse_row(raw: dict, schema: SchemaConfig, line: int) -> BidRow:
    def get(col: str) -> str:
        return raw[schema.name(col)].strip()

    def num(col: str) -> float:
        v = float(get(col))
        if not math.isfinite(v):
            raise ValueError(f"{col} is not finite")
        return v

    row = BidRow(
        auction_id=get("auction_id"),
        letting_date=dt.datetime.strptime(get("letting_date"), schema.date_format).date(),
        engineer_estimate=num("engineer_estimate"),
        site_lat=num("site_lat"),
        site_lon=num("site_lon"),
        bidder_id=get("bidder_id"),
        office_lat=num("office_lat"),
        office_lon=num("office_lon"),
        bid=num("bid"),
        backlog=num("backlog"),
        type_k=int(get("type_k")) if schema.name("type_k") in raw and get("type_k") != "" else None,
        line=line,
    )
    if row.bid <= 0:
        raise ValueError("bid must be positive")
    if row.engineer_estimate <= 0:
        raise ValueError("engineer_estimate must be positive")
    if row.backlog < 0:
        raise ValueError("backlog must be nonnegative")
    if row.type_k not in (None, 0, 1):
        raise ValueError("type_k must be 0 or 1")
    _check_coords(row.site_lat, row.site_lon, "site")
    _check_coords(row.office_lat, row.office_lon, "office")
    return row


def _data_lines(fh) -> Iterable[tuple[int, str]]:
    for lineno, text in enumerate(fh, start=1):
        if text.startswith("#") or not text.strip():
            continue
        yield lineno, text


def read_rows(path: str | Path, schema: SchemaConfig | None = None) -> list[BidRow]:
    schema = schema or SchemaConfig()
    path = Path(path)
    with path.open(newline="") as fh:
        numbered = list(_data_lines(fh))
    if not numbered:
        raise SchemaError(f"{path}: empty file")
    linenos = [n for n, _ in numbered]
    reader = csv.DictReader(t for _, t in numbered)
    header = reader.fieldnames or []
    missing = [c for c in INPUT_COLUMNS if schema.name(c) not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
    rows, problems = [], []
    for i, raw in enumerate(reader, start=1):
        line = linenos[i]
        try:
            rows.append(_parse_row(raw, schema, line))
        except (ValueError, TypeError, AttributeError) as e:
            problems.append(f"line {line}: {e}")
    if problems:
        raise SchemaError(f"{path}: invalid rows\n  " + "\n  ".join(problems))
    return rows


def load_dataset(path: str | Path, schema_config: SchemaConfig | None = None) -> Dataset:
    """Read a bids CSV (one bid per row) into a validated :class:`Dataset`.

    Lines starting with ``#`` are comments. An optional ``type_k`` column is
    honoured; all other derived columns are recomputed.
    """
    return build_dataset(read_rows(path, schema_config))


def to_rows(d: Dataset) -> list[BidRow]:
    out = []
    for a in d.auctions:
        for b in a.bids:
            bd = d.bidders[b.bidder_id]
            out.append(
                BidRow(
                    auction_id=a.id,
                    letting_date=a.letting_date,
                    engineer_estimate=a.engineer_estimate,
                    site_lat=a.site_lat,
                    site_lon=a.site_lon,
                    bidder_id=b.bidder_id,
                    office_lat=bd.office_lat,
                    office_lon=bd.office_lon,
                    bid=b.bid,
                    backlog=b.backlog,
                    type_k=b.type_k,
                )
            )
    return out


def fmt6(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_enriched_csv(d: Dataset, path: str | Path, comment: str | None = None) -> None:
    """Write the enriched bids CSV; currency and derived reals use 6 decimals."""
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENRICHED_COLUMNS)
        for a in d.auctions:
            for b in a.bids:
                bd = d.bidders[b.bidder_id]
                w.writerow(
                    [
                        a.id,
                        a.letting_date.isoformat(),
                        fmt6(a.engineer_estimate),
                        fmt6(a.site_lat),
                        fmt6(a.site_lon),
                        b.bidder_id,
                        fmt6(bd.office_lat),
                        fmt6(bd.office_lon),
                        fmt6(b.bid),
                        fmt6(b.backlog),
                        b.type_k,
                        fmt6(b.distance),
                        fmt6(bd.capacity),
                        fmt6(b.utilization),
                        int(b.won),
                    ]
                )


def classify_bidders(d: Dataset, rev_threshold: float = 0.01, part_threshold: float = 0.03) -> Dataset:
    """Mark regular (type 1) bidders: revenue share AND participation above thresholds.

    Revenue share is the bidder's summed winning bids over all winning bids;
    participation rate is auctions entered over total auctions. ``n0``/``n1``
    of every auction follow from the new types.
    """
    if not (0 < rev_threshold < 1 and 0 < part_threshold < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    total = sum(a.winner.bid for a in d.auctions)
    if total <= 0:
        raise ValueError("total winning revenue is zero; cannot compute revenue shares")
    d = _with_shares(d)
    types = {
        k: int(b.revenue_share >= rev_threshold and b.participation_rate >= part_threshold)
        for k, b in d.bidders.items()
    }
    return with_types(d, types)


def with_types(d: Dataset, types: Mapping[str, int]) -> Dataset:
    bidders = {k: replace(b, type_k=types.get(k, b.type_k)) for k, b in d.bidders.items()}
    auctions = tuple(
        replace(a, bids=tuple(replace(b, type_k=bidders[b.bidder_id].type_k) for b in a.bids)) for a in d.auctions
    )
    return replace(d, bidders=MappingProxyType(bidders), auctions=auctions)


def expected_wins(d: Dataset, bidder_id: str) -> float:
    """Sum of 1/N over the auctions the bidder entered."""
    if bidder_id not in d.bidders:
        raise KeyError(f"unknown bidder {bidder_id!r}")
    terms = [1.0 / a.n_bidders for a in d.auctions if bidder_id in a.bidder_ids()]
    if not terms:
        raise ValueError(f"bidder {bidder_id!r} entered no auctions")
    return math.fsum(terms)


def participation_timeline(d: Dataset, bidder_ids: Iterable[str]) -> list[tuple[dt.date, str]]:
    wanted = set(bidder_ids)
    out = []
    for a in d.auctions:
        for b in a.bids:
            if b.bidder_id in wanted:
                out.append((a.letting_date, a.id, b.bidder_id))
    out.sort()
    return [(date, bidder) for date, _, bidder in out]


def write_timeline_csv(rows: Sequence[tuple[dt.date, str]], path: str | Path, comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["letting_date", "bidder_id"])
        for date, bidder in rows:
            w.writerow([date.isoformat(), bidder])
