import datetime as dt
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmproc.market_data import (
    INPUT_COLUMNS,
    Bidder,
    DuplicateBidError,
    SchemaError,
    build_dataset,
    classify_bidders,
    compute_distance,
    expected_wins,
    haversine_miles,
    load_dataset,
    participation_timeline,
    to_rows,
    write_enriched_csv,
)

from conftest import make_dataset, row

HEADER = ",".join(INPUT_COLUMNS)


def _csv(tmp_path, lines):
    p = tmp_path / "bids.csv"
    p.write_text(HEADER + "\n" + "\n".join(lines) + "\n")
    return p


def _line(aid, bidder, bid, date="2002-01-01"):
    return f"{aid},{date},10.0,34.05,-118.24,{bidder},34.0,-118.0,{bid},1.0"


# -- loading ------------------------------------------------------------------


def test_load_two_auctions(tmp_path):
    p = _csv(tmp_path, [_line("L1", "A", 1.0), _line("L1", "B", 1.1), _line("L2", "A", 2.0), _line("L2", "C", 1.9)])
    d = load_dataset(p)
    assert len(d.auctions) == 2
    assert d.dropped_auctions == 0


def test_single_bidder_auction_dropped(tmp_path):
    p = _csv(tmp_path, [_line("L1", "A", 1.0), _line("L1", "B", 1.1), _line("L2", "A", 2.0)])
    d = load_dataset(p)
    assert [a.id for a in d.auctions] == ["L1"]
    assert d.dropped_auctions == 1


def test_duplicate_bid_names_pair(tmp_path):
    p = _csv(tmp_path, [_line("L1", "A", 1.0), _line("L1", "A", 1.1), _line("L1", "B", 1.2)])
    with pytest.raises(DuplicateBidError, match="'L1'.*'A'"):
        load_dataset(p)


def test_missing_column(tmp_path):
    p = tmp_path / "bids.csv"
    p.write_text("auction_id,bid\nL1,1.0\n")
    with pytest.raises(SchemaError, match="missing column"):
        load_dataset(p)


def test_bad_row_reports_line_number(tmp_path):
    p = _csv(tmp_path, [_line("L1", "A", 1.0), _line("L1", "B", -1.0)])
    with pytest.raises(SchemaError, match="line 3"):
        load_dataset(p)


def test_comment_lines_skipped(tmp_path):
    p = tmp_path / "bids.csv"
    p.write_text("# header comment\n" + HEADER + "\n" + _line("L1", "A", 1.0) + "\n" + _line("L1", "B", 2.0) + "\n")
    assert load_dataset(p).n_bids == 2


def test_enriched_csv_round_trip(tmp_path, two_auctions):
    p = tmp_path / "enriched.csv"
    write_enriched_csv(two_auctions, p)
    d = load_dataset(p)
    assert [a.id for a in d.auctions] == [a.id for a in two_auctions.auctions]
    assert [b.bid for _, b in d.iter_bids()] == [b.bid for _, b in two_auctions.iter_bids()]


def test_winner_lowest_bid_tie_to_smallest_id():
    d = make_dataset({"L1": [("B", 1.0), ("A", 1.0), ("C", 0.9)], "L2": [("B", 1.0), ("A", 1.0)]})
    assert d.auction("L1").winner.bidder_id == "C"
    assert d.auction("L2").winner.bidder_id == "A"


def test_auctions_sorted_by_date():
    rows = [row("L1", "A", 1.0, date=dt.date(2003, 1, 1)), row("L1", "B", 2.0, date=dt.date(2003, 1, 1)),
            row("L2", "A", 1.0, date=dt.date(2002, 1, 1)), row("L2", "B", 2.0, date=dt.date(2002, 1, 1))]
    assert [a.id for a in build_dataset(rows).auctions] == ["L2", "L1"]


def test_utilization_zero_without_capacity():
    d = make_dataset({"L1": [("A", 1.0), ("B", 2.0)]}, backlog=0.0)
    assert all(b.utilization == 0.0 for _, b in d.iter_bids())


def test_utilization_is_backlog_over_capacity():
    rows = [row("L1", "A", 1.0, backlog=2.0), row("L1", "B", 2.0), row("L2", "A", 1.0, backlog=4.0), row("L2", "B", 2.0)]
    d = build_dataset(rows)
    assert d.auction("L1").bid_of("A").utilization == pytest.approx(0.5)
    assert d.bidders["A"].capacity == 4.0


# -- classification -------------------------------------------------------------


def _share_fixture(share_a, part_a, total_auctions=1000):
    """``A`` wins ``share_a`` of revenue and enters ``part_a`` of auctions; ``Z`` fills the rest."""
    entered = round(part_a * total_auctions)
    auctions = {}
    # every auction is worth 1; A wins `won` of them
    won = round(share_a * total_auctions)
    for i in range(total_auctions):
        aid = f"L{i:04d}"
        if i < won:
            auctions[aid] = [("A", 1.0), ("Z", 2.0), ("Y", 2.5)]
        elif i < entered:
            auctions[aid] = [("A", 3.0), ("Z", 1.0), ("Y", 2.5)]
        else:
            auctions[aid] = [("Z", 1.0), ("Y", 2.5)]
    return make_dataset(auctions)


def test_classify_share_and_participation_pass():
    d = classify_bidders(_share_fixture(0.02, 0.07), 0.01, 0.03)
    assert d.bidders["A"].revenue_share == pytest.approx(0.02)
    assert d.bidders["A"].participation_rate == pytest.approx(0.07)
    assert d.bidders["A"].type_k == 1


def test_classify_fails_conjunction():
    d = classify_bidders(_share_fixture(0.009, 0.5), 0.01, 0.03)
    assert d.bidders["A"].revenue_share == pytest.approx(0.009)
    assert d.bidders["A"].type_k == 0


def test_classify_exactly_21_regular():
    # W01..W21 win 4 auctions at 1.0; W22..W25 win 4 auctions at 0.001; Z enters all
    auctions = {}
    for w in range(25):
        bid = 1.0 if w < 21 else 0.001
        for r in range(4):
            auctions[f"L{w:02d}{r}"] = [(f"W{w + 1:02d}", bid), ("Z", 2.0)]
    d = classify_bidders(make_dataset(auctions), 0.01, 0.03)
    assert sum(b.type_k for b in d.bidders.values()) == 21
    assert all(a.n0 + a.n1 == a.n_bidders for a in d.auctions)


def test_classify_zero_revenue_rejected():
    # all winning bids are positive by construction; zero revenue needs an empty dataset
    d = make_dataset({})
    with pytest.raises(ValueError):
        classify_bidders(d)


def test_classify_threshold_range():
    with pytest.raises(ValueError):
        classify_bidders(make_dataset({"L1": [("A", 1.0), ("B", 2.0)]}), 0.0, 0.5)


# -- distance -------------------------------------------------------------------


def test_distance_la_sf():
    assert haversine_miles(34.05, -118.24, 37.77, -122.42) == pytest.approx(347.4, abs=0.5)


def test_distance_zero_and_symmetric():
    assert haversine_miles(34.05, -118.24, 34.05, -118.24) == 0.0
    assert haversine_miles(37.77, -122.42, 34.05, -118.24) == haversine_miles(34.05, -118.24, 37.77, -122.42)


def test_distance_rejects_bad_coordinates():
    with pytest.raises(ValueError):
        haversine_miles(91.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        haversine_miles(0.0, 181.0, 0.0, 0.0)


def test_compute_distance_uses_office_and_site(two_auctions):
    a = two_auctions.auctions[0]
    b = Bidder("X", 37.77, -122.42)
    assert compute_distance(b, a) == pytest.approx(347.4, abs=0.5)


lat = st.floats(-89.0, 89.0)
lon = st.floats(-179.0, 179.0)


@settings(max_examples=200)
@given(lat, lon, lat, lon, lat, lon)
def test_distance_triangle_inequality(a1, o1, a2, o2, a3, o3):
    ab = haversine_miles(a1, o1, a2, o2)
    bc = haversine_miles(a2, o2, a3, o3)
    ac = haversine_miles(a1, o1, a3, o3)
    assert ac <= ab + bc + 1e-6
    assert ab >= 0


# -- expected wins ------------------------------------------------------------------


def test_expected_wins_fifty_five_bidder_auctions():
    auctions = {f"L{i:02d}": [("A", 1.0 + i), ("B", 2.0 + i), ("C", 3.0 + i), ("D", 4.0 + i), ("E", 5.0 + i)]
                for i in range(50)}
    assert expected_wins(make_dataset(auctions), "A") == pytest.approx(10.0)


def test_expected_wins_one_two_bidder_auction(two_auctions):
    d = make_dataset({"L1": [("A", 1.0), ("B", 2.0)]})
    assert expected_wins(d, "A") == 0.5


def test_expected_wins_no_auctions_or_unknown():
    d = make_dataset({"L1": [("A", 1.0), ("B", 2.0)], "L2": [("C", 1.0)]})  # C's only auction dropped
    with pytest.raises(KeyError):
        expected_wins(d, "C")
    with pytest.raises(KeyError):
        expected_wins(d, "nobody")


# -- timeline ---------------------------------------------------------------------


def test_timeline_cases(two_auctions):
    assert participation_timeline(two_auctions, set()) == []
    d1, d2 = (a.letting_date for a in two_auctions.auctions)
    assert participation_timeline(two_auctions, {"C"}) == [(d2, "C")]
    assert participation_timeline(two_auctions, {"A"}) == [(d1, "A"), (d2, "A")]
    both = participation_timeline(two_auctions, {"B", "C"})
    assert [r for r in both if r[0] == d2] == [(d2, "B"), (d2, "C")]


# -- dataset properties -----------------------------------------------------------


auction_strategy = st.dictionaries(
    st.sampled_from([f"L{i}" for i in range(12)]),
    st.dictionaries(st.sampled_from("ABCDEFG"), st.floats(0.1, 10.0), min_size=1, max_size=6),
    min_size=1,
    max_size=12,
)


@settings(max_examples=100, deadline=None)
@given(auction_strategy)
def test_dataset_invariants(spec):
    d = make_dataset({aid: list(bids.items()) for aid, bids in spec.items()})
    if not d.auctions:
        return
    d = classify_bidders(d)
    assert math.fsum(b.revenue_share for b in d.bidders.values()) == pytest.approx(1.0, abs=1e-9)
    for a in d.auctions:
        assert a.n0 + a.n1 == a.n_bidders >= 2
        assert sum(b.won for b in a.bids) == 1
        assert a.winner.bid == min(b.bid for b in a.bids)
    entered = {b for a in d.auctions for b in a.bidder_ids()}
    total = math.fsum(expected_wins(d, b) for b in entered)
    assert total == pytest.approx(len(d.auctions), abs=1e-9)
    assert to_rows(build_dataset(to_rows(d))) == to_rows(d)
