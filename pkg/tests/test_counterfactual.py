import json
import logging
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmproc.counterfactual import (
    RingHypothesis,
    auction_rent,
    cm_price,
    rent_report,
    ring_rent,
    summary_to_json,
    with_meb,
    write_rent_json,
)
from cmproc.gpv import NEGATIVE_COST, PseudoCost

from conftest import make_dataset


def costs_for(d, table):
    """``table``: (auction, bidder) -> cost, or (cost, flags)."""
    out = {}
    for a, b in d.iter_bids():
        v = table[(a.id, b.bidder_id)]
        c, flags = v if isinstance(v, tuple) else (v, frozenset())
        out[(a.id, b.bidder_id)] = PseudoCost(a.id, b.bidder_id, b.bid, b.type_k, c, frozenset(flags))
    return out


@pytest.fixture
def example():
    d = make_dataset({"L1": [("W", 3.5), ("V", 3.8), ("O", 4.2)]}, est=10.0)
    return d, costs_for(d, {("L1", "W"): 3.0, ("L1", "V"): 3.4, ("L1", "O"): 3.9})


def test_modes(example):
    d, costs = example
    ring = RingHypothesis({"W", "V"}, "tight")
    a = d.auctions[0]
    cm = cm_price(a, costs, ring, "cm")
    assert (cm.o, cm.c_tilde, cm.status) == (3.9, 3.0, "ok")
    assert auction_rent(cm) == pytest.approx(0.9)
    assert cm_price(a, costs, ring, "paper").o == 3.4
    with pytest.raises(ValueError):
        cm_price(a, costs, ring, "other")


def test_non_ring_winner(example):
    d, costs = example
    p = cm_price(d.auctions[0], costs, RingHypothesis({"V", "O"}))
    assert p.status == "not-ring" and p.o == p.c_tilde == 3.0
    assert auction_rent(p) == 0.0


def test_reserve_fallback():
    d = make_dataset({"L1": [("W", 3.5), ("V", 3.8)]}, est=5.0)
    costs = costs_for(d, {("L1", "W"): 3.0, ("L1", "V"): 3.4})
    ring = RingHypothesis({"W", "V"})
    p = cm_price(d.auctions[0], costs, ring, "cm", reserve=True)
    assert (p.o, p.status) == (5.0, "reserve")
    assert auction_rent(p) == pytest.approx(2.0)
    assert cm_price(d.auctions[0], costs, ring, "cm", reserve=False).status == "excluded"


def test_reserve_caps_price():
    d = make_dataset({"L1": [("W", 3.5), ("O", 9.0)]}, est=5.0)
    costs = costs_for(d, {("L1", "W"): 3.0, ("L1", "O"): 8.0})
    p = cm_price(d.auctions[0], costs, RingHypothesis({"W"}))
    assert (p.o, p.status) == (5.0, "reserve")


def test_equal_price_and_cost_zero_rent():
    d = make_dataset({"L1": [("W", 3.5), ("O", 3.6)]})
    costs = costs_for(d, {("L1", "W"): 3.0, ("L1", "O"): 3.0})
    assert auction_rent(cm_price(d.auctions[0], costs, RingHypothesis({"W"}))) == 0.0


def test_flagged_winner_excluded(example):
    d, costs = example
    costs[("L1", "W")] = PseudoCost("L1", "W", 3.5, 0, -0.1, frozenset({NEGATIVE_COST}))
    p = cm_price(d.auctions[0], costs, RingHypothesis({"W"}))
    assert p.status == "excluded" and NEGATIVE_COST in p.reason


def test_meb_arithmetic():
    assert with_meb(0.016, 0.3) == pytest.approx(0.0208, abs=1e-12)
    assert with_meb(0.05, 0.3) == pytest.approx(0.065, abs=1e-12)
    assert with_meb(0.0123, 0.0) == 0.0123


def test_empty_ring_zero(example):
    d, costs = example
    rep = ring_rent(d, costs, RingHypothesis(set(), "empty"))
    assert rep.total == 0.0


def test_unknown_member_rejected(example):
    d, costs = example
    with pytest.raises(ValueError, match="nobody"):
        ring_rent(d, costs, RingHypothesis({"nobody"}))


def test_report_totals_and_json(tmp_path, example):
    d, costs = example
    s = rent_report(d, list(costs.values()), [RingHypothesis({"W"}, "tight"), RingHypothesis({"W", "V"}, "broad")])
    cm_t, cm_b = s.get("tight", "cm"), s.get("broad", "cm")
    assert cm_t.total == pytest.approx(0.4)  # V is outside the tight ring
    assert cm_b.total == pytest.approx(0.9)
    assert cm_b.pct == pytest.approx(0.9 / 3.5)
    assert cm_b.pct_with_meb == pytest.approx(0.9 / 3.5 * 1.3)
    assert all(n["holds"] for n in s.nested if n["mode"] == "cm")
    p = tmp_path / "rent.json"
    write_rent_json(s, p, header={"seed": 1})
    data = json.loads(p.read_text())
    assert {r["label"] for r in data["rings"]} == {"tight", "broad"}
    assert data["seed"] == 1
    assert summary_to_json(s)["pricing_mode"] == "cm"


def test_exclusion_warning(caplog):
    d = make_dataset({"L1": [("W", 1.0), ("O", 2.0)], "L2": [("W", 1.0), ("O", 2.0)]})
    costs = costs_for(d, {("L1", "W"): (0.5, {NEGATIVE_COST}), ("L1", "O"): 1.5, ("L2", "W"): 0.5, ("L2", "O"): 1.5})
    with caplog.at_level(logging.WARNING):
        rep = ring_rent(d, costs, RingHypothesis({"W"}))
    assert rep.excluded_share == 0.5
    assert "excluded" in caplog.text


# -- nested monotonicity --------------------------------------------------------------------

IDS = "ABCDEF"


@st.composite
def market(draw):
    auctions, table = {}, {}
    for ell in range(draw(st.integers(1, 8))):
        n = draw(st.integers(2, 5))
        members = draw(st.permutations(IDS))[:n]
        aid = f"L{ell}"
        auctions[aid] = []
        for b in members:
            c = draw(st.floats(0.5, 9.0))
            auctions[aid].append((b, c + 0.5))
            table[(aid, b)] = c
    small = draw(st.sets(st.sampled_from(IDS)))
    extra = draw(st.sets(st.sampled_from(IDS)))
    est = draw(st.floats(1.0, 12.0))
    return auctions, table, small, small | extra, est


@settings(max_examples=200, deadline=None)
@given(market())
def test_nested_rings_monotone(m):
    auctions, table, small, big, est = m
    d = make_dataset(auctions, est=est)
    costs = costs_for(d, table)
    small, big = small & set(d.bidders), big & set(d.bidders)
    a = ring_rent(d, costs, RingHypothesis(small), mode="cm")
    b = ring_rent(d, costs, RingHypothesis(big), mode="cm")
    assert a.total <= b.total + 1e-12
    assert all(r >= 0 for r in a.rents.values())
    assert a.total == pytest.approx(math.fsum(a.rents.values()))
