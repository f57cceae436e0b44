import numpy as np
import pytest
from scipy import stats

from cmproc.equilibrium import CostFamily
from cmproc.market_data import write_enriched_csv
from cmproc.synthetic import (
    CartelSpec,
    MarketConfig,
    PanelConfig,
    XDist,
    generate_dataset,
    generate_regression_panel,
    load_truth_csv,
    plant_cartel,
    write_truth_csv,
)

MEMBERS = ("R001", "R002", "R003", "R004")


def _bids(market):
    return [(a.id, b.bidder_id, b.bid) for a, b in market.dataset.iter_bids()]


def test_single_auction_deterministic():
    cfg = MarketConfig(n_auctions=1, n_range=(2, 2), seed=11)
    assert _bids(generate_dataset(cfg)) == _bids(generate_dataset(cfg))


def test_seed_changes_draws():
    a = generate_dataset(MarketConfig(n_auctions=5, seed=1))
    b = generate_dataset(MarketConfig(n_auctions=5, seed=2))
    assert _bids(a) != _bids(b)


def test_bid_distribution_kolmogorov():
    cfg = MarketConfig(n_auctions=1000, n_range=(3, 3), p_regular=0.0, x_dist=XDist("constant", 1.0), seed=3)
    bids = [b.bid for _, b in generate_dataset(cfg).dataset.iter_bids()]
    # s(c) = (1 + 2c)/3 pushes U[0,1] forward to U[1/3, 1]
    ks = stats.kstest(bids, stats.uniform(loc=1 / 3, scale=2 / 3).cdf).statistic
    assert ks <= 0.05


def test_bids_scale_with_estimate_and_exceed_cost():
    m = generate_dataset(MarketConfig(n_auctions=50, seed=4))
    for a, b in m.dataset.iter_bids():
        c = m.truth[(a.id, b.bidder_id)].true_cost
        assert c <= b.bid <= a.engineer_estimate + 1e-12


def test_asymmetric_market_generates():
    cfg = MarketConfig(n_auctions=40, n_range=(3, 5), p_regular=0.5, family0=CostFamily("uniform", 0.2, 1.0), seed=5)
    m = generate_dataset(cfg)
    assert len(m.dataset.auctions) == 40
    for a, b in m.dataset.iter_bids():
        assert m.truth[(a.id, b.bidder_id)].true_cost <= b.bid


def test_no_cartel_truth_all_false():
    m = generate_dataset(MarketConfig(n_auctions=30, seed=6))
    assert not any(t.ring_member or t.cover_bid for t in m.truth.values())


def test_designated_low():
    base = generate_dataset(MarketConfig(n_auctions=300, n_range=(3, 6), p_regular=0.5, n_regular=8, seed=7))
    m = plant_cartel(base, CartelSpec(MEMBERS[:2]), seed=7)
    joint = 0
    for a0, a1 in zip(base.dataset.auctions, m.dataset.auctions):
        present = [b for b in a0.bids if b.bidder_id in MEMBERS[:2]]
        if len(present) < 2:
            assert [b.bid for b in a0.bids] == [b.bid for b in a1.bids]
            continue
        joint += 1
        old = {b.bidder_id: b.bid for b in present}
        new = {b: a1.bid_of(b).bid for b in old}
        unchanged = [b for b in old if new[b] == old[b]]
        assert len(unchanged) == 1
        lead = unchanged[0]
        other = next(b for b in old if b != lead)
        assert new[other] > new[lead]
        assert 1.05 - 1e-12 <= new[other] / new[lead] <= 1.15 + 1e-12
    assert joint > 0


def test_uniform_markup():
    base = generate_dataset(MarketConfig(n_auctions=200, n_range=(3, 6), p_regular=0.5, n_regular=8, seed=8))
    m = plant_cartel(base, CartelSpec(MEMBERS, conduct="uniform-markup", markup=0.1))
    for a0, a1 in zip(base.dataset.auctions, m.dataset.auctions):
        present = [b for b in a0.bids if b.bidder_id in MEMBERS]
        for b in present:
            expected = b.bid * 1.1 if len(present) >= 2 else b.bid
            assert a1.bid_of(b.bidder_id).bid == pytest.approx(expected, rel=1e-15)


def test_cartel_truth_marks_members_and_covers():
    cfg = MarketConfig(n_auctions=200, n_range=(3, 6), p_regular=0.5, n_regular=8, seed=9, cartel=CartelSpec(MEMBERS))
    m = generate_dataset(cfg)
    assert all(t.ring_member == (k[1] in MEMBERS) for k, t in m.truth.items())
    assert any(t.cover_bid for t in m.truth.values())
    assert not any(t.cover_bid for k, t in m.truth.items() if k[1] not in MEMBERS)


def test_cartel_spec_validation():
    with pytest.raises(ValueError):
        CartelSpec(())
    with pytest.raises(ValueError):
        CartelSpec(("A", "A"))
    with pytest.raises(ValueError):
        plant_cartel(generate_dataset(MarketConfig(n_auctions=3)), CartelSpec(("nobody", "R001")))


def test_config_validation():
    with pytest.raises(ValueError):
        MarketConfig(n_range=(1, 3))
    with pytest.raises(ValueError):
        MarketConfig(seed=-1)


def test_workers_do_not_change_output(tmp_path):
    cfg = MarketConfig(n_auctions=60, n_range=(3, 5), p_regular=0.5, family0=CostFamily("uniform", 0.2, 1.0), seed=10)
    paths = []
    for w in (1, 2):
        p = tmp_path / f"bids{w}.csv"
        write_enriched_csv(generate_dataset(cfg, workers=w).dataset, p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]


def test_truth_csv_round_trip(tmp_path):
    m = generate_dataset(MarketConfig(n_auctions=20, seed=12, cartel=CartelSpec(("R001", "R002"))))
    p = tmp_path / "truth.csv"
    write_truth_csv(m, p)
    back = load_truth_csv(p)
    assert set(back) == set(m.truth)
    for k, t in m.truth.items():
        assert back[k].ring_member == t.ring_member
        assert back[k].true_cost == pytest.approx(t.true_cost, abs=1e-6)


def test_regression_panel_shape():
    m = generate_regression_panel(PanelConfig(n_auctions=50, seed=1))
    d = m.dataset
    assert len(d.auctions) == 50
    assert all(3 <= a.n_bidders <= 6 for a in d.auctions)
    assert np.all(np.array([b.bid for _, b in d.iter_bids()]) > 0)
