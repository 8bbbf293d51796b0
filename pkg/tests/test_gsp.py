import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gspmarket.gsp import (AuctionOutcome, BidProfile, clear_auction, make_recommendations,
                           simulate_platform_quality)
from gspmarket.market import CtrCurve, QualityModel, default_ctr, truncated_normal
from oracles import naive_gsp


def profile(bids, quals=None):
    quals = [1.0] * len(bids) if quals is None else quals
    return BidProfile.from_arrays([f"b{j}" for j in range(len(bids))], bids, quals)


def test_unit_quality_ladder():
    out = clear_auction(profile([10, 8, 5, 2]), CtrCurve((10, 6, 3)))
    assert out.prices == (8, 5, 2)
    assert out.revenue == 116


def test_single_slot_is_second_price():
    out = clear_auction(profile([7, 4]), CtrCurve((1.0,)))
    assert out.allocation == ("b0",) and out.prices == (4,)


def test_reserve_applies_when_no_one_below():
    out = clear_auction(profile([7]), CtrCurve((2.0, 1.0)), reserve=2.5)
    assert out.prices == (2.5,)
    assert out.revenue == 5.0


def test_no_eligible_bid_gives_empty_outcome():
    out = clear_auction(profile([1.0, 2.0]), CtrCurve((2.0,)), reserve=2.5)
    assert out.empty and out.revenue == 0 and out.allocation == ()


def test_ties_broken_by_id():
    b = BidProfile({"z": (5.0, 1.0), "a": (5.0, 1.0), "m": (2.5, 2.0)})
    out = clear_auction(b, CtrCurve((3.0, 2.0, 1.0)))
    assert out.allocation == ("a", "m", "z")


def test_matches_naive_oracle_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(1, 200))
        K = int(rng.integers(1, 21))
        bids = rng.uniform(0, 60, n)
        quals = rng.uniform(0.02, 0.5, n)
        alpha = np.sort(rng.uniform(0.1, 20, K))[::-1] + np.arange(K)[::-1] * 1e-3
        reserve = float(rng.choice([0.0, 2.5]))
        ids = [f"b{j:04d}" for j in range(n)]
        out = clear_auction(BidProfile.from_arrays(ids, bids, quals), CtrCurve(tuple(alpha)), reserve)
        alloc, prices, rev = naive_gsp(list(bids), list(quals), list(alpha), reserve, ids)
        assert list(out.allocation) == alloc
        np.testing.assert_allclose(out.prices, prices, atol=1e-9, rtol=0)
        assert abs(out.revenue - rev) < 1e-9


instances = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.0, 100.0), min_size=n, max_size=n),
    st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n),
    st.integers(1, 10),
    st.sampled_from([0.0, 2.5])))


@given(instances, st.floats(0.0, 50.0), st.integers(0, 29))
def test_raising_a_bid_never_lowers_the_slot(inst, raise_by, who):
    bids, quals, K, reserve = inst
    who = who % len(bids)
    ctr = default_ctr(K=K, top_clicks=10.0)
    before = clear_auction(profile(bids, quals), ctr, reserve)
    bids2 = list(bids)
    bids2[who] += raise_by
    after = clear_auction(profile(bids2, quals), ctr, reserve)
    rank_before = [i for i, _ in before.ranking]
    rank_after = [i for i, _ in after.ranking]
    me = f"b{who}"
    if me in rank_before:
        assert rank_after.index(me) <= rank_before.index(me)


@given(instances)
def test_price_sandwich_and_revenue_identity(inst):
    bids, quals, K, reserve = inst
    out = clear_auction(profile(bids, quals), default_ctr(K=K, top_clicks=10.0), reserve)
    entries = profile(bids, quals).entries
    for i, p in zip(out.allocation, out.prices):
        assert reserve - 1e-12 <= p <= entries[i][0] + 1e-9
    assert abs(out.revenue - sum(a * p for a, p in zip(out.clicks, out.prices))) < 1e-9
    r = out.rank_scores()
    assert np.all(np.diff(r) <= 0)


def test_recommendation_formula_and_floor():
    yesterday = clear_auction(BidProfile({"a": (30.0, 1.0), "b": (20.0, 1.0), "c": (1.0, 1.0)}),
                              CtrCurve((3.0, 2.0, 1.0)))
    recs = make_recommendations(yesterday, {"x": 0.5}, 2, reserve=2.5)
    assert recs.recs[("x", 1)] == 40.0
    assert recs.recs[("x", 2)] == 2.5  # r_3 / q = 2 is below the reserve


def test_recommendation_pads_missing_ranks_with_reserve():
    yesterday = clear_auction(BidProfile({"a": (30.0, 1.0)}), CtrCurve((3.0, 2.0, 1.0)), 2.5)
    recs = make_recommendations(yesterday, {"x": 0.3}, 3)
    assert recs.row("x") == (2.5, 2.5, 2.5)


def test_recommendations_reject_negative_slots():
    yesterday = clear_auction(profile([5.0, 4.0]), CtrCurve((1.0,)))
    with pytest.raises(ValueError):
        make_recommendations(yesterday, {"x": 1.0}, -1)


@given(st.lists(st.floats(0.1, 100.0), min_size=5, max_size=30), st.floats(0.05, 2.0))
def test_recommendation_scaling_and_order(bids, qhat):
    yesterday = clear_auction(profile(bids), default_ctr(K=10, top_clicks=5.0), 0.0)
    r1 = make_recommendations(yesterday, {"x": qhat}, 4, reserve=0.0)
    r2 = make_recommendations(yesterday, {"x": 2 * qhat}, 4, reserve=0.0)
    row1, row2 = r1.row("x"), r2.row("x")
    assert all(a == 2 * b for a, b in zip(row1, row2))
    assert all(x >= y for x, y in zip(row1, row1[1:]))


def test_platform_quality_zero_variance_is_exact():
    qm = QualityModel({"x": 0.12}, 0.0)
    assert simulate_platform_quality(qm, "x", 5, np.random.default_rng(0)) == 0.12


def test_platform_quality_converges():
    eps, M = 0.05, 10_000
    qm = QualityModel({"x": 0.3}, eps)
    qhat = simulate_platform_quality(qm, "x", M, np.random.default_rng(1))
    assert abs(qhat - 0.3) < 3 * eps / np.sqrt(M)


def test_platform_quality_single_draw_is_one_truncated_normal():
    qm = QualityModel({"x": 0.05}, 0.05)
    a = np.array([simulate_platform_quality(qm, "x", 1, np.random.default_rng(s)) for s in range(3000)])
    b = truncated_normal(0.05, 0.05, np.random.default_rng(99), size=20_000)
    from scipy import stats
    assert stats.ks_2samp(a, b).pvalue > 1e-3
    assert np.all(a > 0)


def test_platform_quality_errors():
    qm = QualityModel({"x": 0.3}, 0.1)
    with pytest.raises(ValueError):
        simulate_platform_quality(qm, "x", 0)
    with pytest.raises(KeyError):
        simulate_platform_quality(qm, "nobody", 3)


def test_outcome_serialisation_round_trip():
    out = clear_auction(profile([10, 8, 5, 2], [1, 0.5, 2, 1]), CtrCurve((10, 6, 3)), 1.0,
                        values={"b0": 12.0, "b1": 9.0})
    back = AuctionOutcome.from_dict(json.loads(out.to_json()))
    assert back == out
    lines = out.to_csv().strip().split("\r\n")
    assert lines[0].startswith("schema_version,slot,bidder_id")
    assert len(lines) == 1 + 3
    with pytest.raises(ValueError):
        AuctionOutcome.from_dict({**out.to_dict(), "schema_version": 99})
