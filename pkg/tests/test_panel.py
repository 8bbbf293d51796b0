import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gspmarket.market import generate_market
from gspmarket.panel import (GROUP_ORDER, Panel, PanelError, PanelObservation, PositionGroup,
                             RankDeficientDesign, demean_two_way, did_fit, disclosure_panel,
                             format_report, group_for_position, planted_panel)
from oracles import dummy_ols_cluster


@pytest.mark.parametrize("pos, group", [(1, "Top5"), (5, "Top5"), (5.01, "Mid6to25"),
                                        (25, "Mid6to25"), (25.5, "Below25"), (80, "Below25")])
def test_group_cutoffs(pos, group):
    assert group_for_position(pos) is PositionGroup(group)


def unbalanced(seed=0, n_ads=30, n_days=12):
    rng = np.random.default_rng(seed)
    p = planted_panel(n_ads, n_days, 6, group_effects=(3.0, 1.0, 0.0), rng=rng)
    keep = rng.random(len(p)) > 0.25
    return Panel(p.ad_id[keep], p.day[keep], p.treated[keep], p.post[keep], p.group[keep],
                 p.outcome[keep])


@pytest.mark.parametrize("with_groups", [False, True])
def test_matches_dummy_variable_regression(with_groups):
    p = unbalanced()
    est = did_fit(p, with_groups=with_groups)
    tp = (p.treated & p.post).astype(float)
    cols = [tp]
    if with_groups:
        cols += [(p.group == j) * p.post for j in range(2)]
        cols += [(p.group == j) * tp for j in range(2)]
    beta, se, hc = dummy_ols_cluster(p.outcome, np.column_stack(cols), list(p.ad_id), list(p.day))
    names = list(est.coefficients)
    np.testing.assert_allclose([est.coefficients[n] for n in names], beta, atol=1e-8)
    np.testing.assert_allclose([est.clustered_se[n] for n in names], se, rtol=1e-7)
    np.testing.assert_allclose([est.robust_se[n] for n in names], hc, rtol=1e-7)


def test_noiseless_panel_recovers_effects_exactly():
    p = planted_panel(60, 10, 5, noise_sd=0.0, rng=1)
    assert did_fit(p).alpha0 == pytest.approx(2.193, abs=1e-9)
    g = planted_panel(60, 10, 5, group_effects=(5.372, 1.705, 0.0), noise_sd=0.0, rng=1)
    est = did_fit(g, with_groups=True)
    assert est.alpha0 == pytest.approx(0.0, abs=1e-9)
    assert est.group_interactions["Top5"] == pytest.approx(5.372, abs=1e-9)
    assert est.group_interactions["Mid6to25"] == pytest.approx(1.705, abs=1e-9)


def test_balanced_panel_demeans_in_one_sweep():
    p = planted_panel(40, 8, 4, rng=2)
    est = did_fit(p)
    assert est.iterations <= 2
    M = np.random.default_rng(0).normal(size=(len(p), 2))
    _, a = np.unique(p.ad_id, return_inverse=True)
    Z, _ = demean_two_way(M, a, p.day)
    np.testing.assert_allclose(np.bincount(a, weights=Z[:, 0]), 0, atol=1e-9)
    np.testing.assert_allclose(np.bincount(p.day, weights=Z[:, 1]), 0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(-50, 50))
def test_invariant_to_ad_and_day_shifts(seed, ad_shift, day_shift):
    p = unbalanced(seed, n_ads=40, n_days=8)
    try:
        base = did_fit(p, with_groups=True)
    except RankDeficientDesign:
        assume(False)
    y = p.outcome + ad_shift * (p.ad_id == p.ad_id[0]) + day_shift * (p.day == 3)
    moved = did_fit(Panel(p.ad_id, p.day, p.treated, p.post, p.group, y), with_groups=True)
    for k, v in base.coefficients.items():
        assert moved.coefficients[k] == pytest.approx(v, abs=1e-7)


def test_all_treated_is_rejected():
    p = planted_panel(20, 6, 3, treated_share=1.0, rng=0)
    with pytest.raises(PanelError, match="control"):
        did_fit(p)


def test_empty_group_is_rank_deficient():
    p = planted_panel(30, 6, 3, group_shares=(0.0, 0.5, 0.5), rng=0)
    with pytest.raises(RankDeficientDesign):
        did_fit(p, with_groups=True)


def test_treatment_must_be_constant_within_ad():
    obs = [PanelObservation("a", t, t < 2, t > 0, PositionGroup.TOP5, 1.0) for t in range(3)]
    obs += [PanelObservation("b", t, False, t > 0, PositionGroup.TOP5, 1.0) for t in range(3)]
    with pytest.raises(PanelError, match="varies"):
        did_fit(obs)


def test_csv_round_trip_and_errors():
    p = planted_panel(10, 4, 2, rng=3)
    q = Panel.from_csv(p.to_csv())
    assert q.observations() == p.observations()
    bad = p.to_csv().replace("Top5", "Top3", 1)
    with pytest.raises(PanelError, match=r"row \d+, column 'group'"):
        Panel.from_csv(bad)
    with pytest.raises(PanelError, match="row 1"):
        Panel.from_csv("ad_id,day\r\nx,1\r\n")


def test_report_layout():
    p = planted_panel(rng=4, group_effects=(5.372, 1.705, 0.0))
    text = format_report({"(1)": did_fit(p), "(2)": did_fit(p, with_groups=True)})
    lines = text.splitlines()
    assert lines[2].startswith("T*Post")
    assert any(line.startswith("T*Post*Top5") and "***" in line for line in lines)
    assert "clustered by ad" in text
    assert set(did_fit(p, with_groups=True).to_dict()["coefficients"]) == {
        "T*Post", "Top5*Post", "Mid6to25*Post", "T*Post*Top5", "T*Post*Mid6to25"}


def test_group_order_has_below25_as_baseline():
    assert GROUP_ORDER[-1] is PositionGroup.BELOW25


@pytest.fixture(scope="module")
def small_market():
    return generate_market(constructing=30, adhering=20, participation=0.6)


def test_disclosure_panel_without_adherence_has_no_effect(small_market):
    obs = disclosure_panel(small_market, 3, 10, 10, seed=0, adherence=0.0)
    assert {o.ad_id[:4] for o in obs} == {"ctl:", "trt:"}
    est = did_fit(obs, with_groups=False)
    assert est.alpha0 == pytest.approx(0.0, abs=1e-9)


def test_disclosure_panel_is_reproducible(small_market):
    a = disclosure_panel(small_market, 3, 10, 10, seed=5, adherence=0.5, outcome="cpc")
    b = disclosure_panel(small_market, 3, 10, 10, seed=5, adherence=0.5, outcome="cpc")
    assert a == b and len(a) > 0
