import datetime as dt

import pytest

from cmproc.market_data import BidRow, build_dataset

SITE = (34.05, -118.24)


def row(aid, bidder, bid, *, date=dt.date(2002, 1, 1), est=10.0, office=SITE, backlog=0.0, type_k=None, site=SITE):
    return BidRow(aid, date, est, site[0], site[1], bidder, office[0], office[1], bid, backlog, type_k)


def make_dataset(auctions, **kw):
    """``auctions``: mapping auction id -> list of ``(bidder, bid)`` or ``(bidder, bid, type_k)``."""
    rows = []
    for i, (aid, bids) in enumerate(auctions.items()):
        for entry in bids:
            bidder, bid, *rest = entry
            rows.append(row(aid, bidder, bid, date=dt.date(2002, 1, 1) + dt.timedelta(days=i),
                            type_k=rest[0] if rest else None, **kw))
    return build_dataset(rows)


@pytest.fixture
def two_auctions():
    return make_dataset({"L1": [("A", 1.0), ("B", 1.2)], "L2": [("A", 2.0), ("B", 1.5), ("C", 1.7)]})
