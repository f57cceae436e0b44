import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cmproc.equilibrium import CostFamily
from cmproc.gpv import (
    CLAMPED_HAZARD,
    EXTRAPOLATED,
    INVALID,
    NEGATIVE_COST,
    HazardPair,
    InversionError,
    flag_counts,
    invert_bid,
    invert_dataset,
    load_costs_csv,
    true_symmetric_hazards,
    write_costs_csv,
)
from cmproc.lpe import HazardEstimates, estimate_hazards
from cmproc.synthetic import MarketConfig, XDist, generate_dataset

from conftest import make_dataset


def test_single_type_uniform_example():
    assert invert_bid(0.5, 0, 3, 0, HazardPair(2.0, math.nan)).c_hat == pytest.approx(0.25, abs=1e-15)


def test_two_type_example():
    assert invert_bid(0.5, 1, 1, 2, HazardPair(2.0, 2.0)).c_hat == pytest.approx(0.25, abs=1e-15)


def test_large_hazard_markup_vanishes():
    pc = invert_bid(0.9, 0, 3, 0, HazardPair(1e12, math.nan))
    assert pc.c_hat == pytest.approx(0.9, abs=1e-10)
    assert 0 < pc.markup < 1e-10


def test_zero_denominator_raises():
    with pytest.raises(InversionError) as e:
        invert_bid(0.5, 0, 3, 0, HazardPair(0.0, math.nan))
    assert e.value.clamped


def test_precondition_errors():
    with pytest.raises(ValueError):
        invert_bid(0.5, 1, 2, 0, HazardPair(1.0, 1.0))  # own type absent
    with pytest.raises(ValueError):
        invert_bid(0.5, 0, 1, 0, HazardPair(1.0, 1.0))  # no rival
    with pytest.raises(ValueError):
        HazardPair(-1.0, 1.0)


@settings(max_examples=200)
@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0), st.floats(0.01, 100.0), st.integers(1, 5), st.integers(0, 5))
def test_log_and_level_routes_agree(b, p0, p1, n0, n1):
    assume(n0 + n1 >= 2)
    level = invert_bid(b, 0, n0, n1, HazardPair(p0, p1))
    logs = invert_bid(b, 0, n0, n1, HazardPair(p0 * b, p1 * b, log=True))
    assert logs.c_hat == pytest.approx(level.c_hat, rel=1e-12, abs=1e-12)
    assert level.c_hat == pytest.approx(b - 1 / ((n0 - 1) * p0 + n1 * p1), rel=1e-12, abs=1e-12)


@settings(max_examples=200)
@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0), st.integers(2, 6), st.integers(0, 4))
def test_markup_positive_and_decreasing_in_n(b, psi, n0, n1):
    hz = HazardPair(psi, psi)
    pc = invert_bid(b, 0, n0, n1, hz)
    assert pc.c_hat < b
    more = invert_bid(b, 0, n0 + 1, n1, hz)
    assert more.markup <= pc.markup


def test_symmetric_uniform_inverse_increasing_in_bid():
    # true hazards of a symmetric n=3 uniform market: c_hat is the inverse strategy
    F = CostFamily()
    bids = np.linspace(0.35, 0.99, 30)
    from cmproc.equilibrium import symmetric_bid_hazard

    c = [invert_bid(b, 0, 3, 0, HazardPair(symmetric_bid_hazard(b, 3, F)[2], math.nan)).c_hat for b in bids]
    assert np.all(np.diff(c) > 0)
    np.testing.assert_allclose(c, (3 * bids - 1) / 2, atol=1e-12)


def test_analytic_round_trip():
    cfg = MarketConfig(n_auctions=300, n_range=(2, 6), p_regular=0.0, seed=21)
    m = generate_dataset(cfg)
    for log in (True, False):
        pcs = invert_dataset(m.dataset, true_symmetric_hazards(m.dataset, cfg.family0, log=log))
        err = max(abs(p.c_hat - m.truth[(p.auction_id, p.bidder_id)].true_cost) for p in pcs)
        assert err < 1e-10


def test_identical_hazards_identical_cost():
    d = make_dataset({"L1": [("A", 1.0, 0), ("B", 1.0, 1), ("C", 2.0, 0)]})
    n = d.n_bids
    est = HazardEstimates(
        tuple(a.id for a, _ in d.iter_bids()), tuple(b.bidder_id for _, b in d.iter_bids()),
        np.full((n, 2), 0.5), np.full((n, 2), 1.0), False, (None, None),
    )
    c = {p.bidder_id: p.c_hat for p in invert_dataset(d, est)}
    assert c["A"] == c["B"]


def test_empty_dataset():
    d = make_dataset({})
    est = HazardEstimates((), (), np.empty((0, 2)), np.empty((0, 2)), True, (None, None))
    assert invert_dataset(d, est) == []


def test_misaligned_estimates_rejected(two_auctions):
    n = two_auctions.n_bids
    est = HazardEstimates(("x",) * n, ("y",) * n, np.full((n, 2), 0.5), np.ones((n, 2)), False, (None, None))
    with pytest.raises(ValueError):
        invert_dataset(two_auctions, est)


def test_flags():
    d = make_dataset({"L1": [("A", 1.0, 0), ("B", 1.2, 0)], "L2": [("A", 2.0, 0), ("B", 0.5, 0)]})
    ids = (tuple(a.id for a, _ in d.iter_bids()), tuple(b.bidder_id for _, b in d.iter_bids()))
    G = np.array([[0.5, np.nan], [1 - 1e-6, np.nan], [0.5, np.nan], [0.5, np.nan]])
    g = np.array([[0.1, np.nan], [1.0, np.nan], [0.0, np.nan], [1.0, np.nan]])
    pcs = invert_dataset(d, HazardEstimates(*ids, G, g, False, (None, None)))
    by = {(p.auction_id, p.bidder_id): p for p in pcs}
    assert NEGATIVE_COST in by[("L1", "A")].flags  # 1 - 1/0.2 < 0
    assert CLAMPED_HAZARD in by[("L1", "B")].flags
    assert INVALID in by[("L2", "A")].flags and math.isnan(by[("L2", "A")].c_hat)
    assert by[("L2", "B")].flags == frozenset()
    counts = flag_counts(pcs)
    assert counts[INVALID] == 1 and counts[NEGATIVE_COST] == 1


def test_estimated_round_trip_and_flags():
    cfg = MarketConfig(n_auctions=300, n_range=(3, 3), p_regular=0.0, x_dist=XDist("constant", 1.0), seed=22)
    m = generate_dataset(cfg)
    pcs = invert_dataset(m.dataset, estimate_hazards(m.dataset))
    err = [abs(p.c_hat - m.truth[(p.auction_id, p.bidder_id)].true_cost) for p in pcs if not p.flags]
    assert np.median(err) < 0.05
    assert all(p.c_hat < p.b for p in pcs if not p.flags)
    top = max(pcs, key=lambda p: p.b)
    assert EXTRAPOLATED not in top.flags  # the largest bid is inside the observed range


def test_costs_csv_round_trip(tmp_path, two_auctions):
    d = two_auctions
    n = d.n_bids
    est = HazardEstimates(
        tuple(a.id for a, _ in d.iter_bids()), tuple(b.bidder_id for _, b in d.iter_bids()),
        np.full((n, 2), 0.5), np.full((n, 2), 2.0), False, (None, None),
    )
    pcs = invert_dataset(d, est)
    p = tmp_path / "costs.csv"
    write_costs_csv(pcs, p)
    back = load_costs_csv(p)
    assert [(c.auction_id, c.bidder_id) for c in back] == [(c.auction_id, c.bidder_id) for c in pcs]
    for a, b in zip(back, pcs):
        assert a.c_hat == pytest.approx(b.c_hat, abs=1e-6)
        assert a.flags == b.flags
