"""Recover valuations from equilibrium bids, then bound adhering bidders.

Constructing bidders play the damped best-response equilibrium; their bids
are inverted through the first-order condition and compared with the
planted values.  Adhering bidders in a short simulation only reveal an
interval, which is checked against their planted values too.

    python demos/estimate_values.py
"""
import numpy as np

from gspmarket import bound_adhering_values, calibrated_market, estimate_constructing_values
from gspmarket.counterfactual import adhering_events, simulate_batch
from gspmarket.strategies import constructing_panel, equilibrium_bids

SEED = 3

m = calibrated_market()
ids, vals, qm = constructing_panel(m, SEED, 20, 15)
eq = equilibrium_bids(vals, qm, ids, m.quality.shared_sd, m.ctr, m.reserve_price,
                      m.auctions_per_period, seed=SEED)
records = eq.records()
truth = {(r.bidder_id, r.day, r.bid): v for r, v in zip(records, vals[np.isfinite(eq.bids)])}

est = estimate_constructing_values(records, m, seed=SEED)
pv = est.pseudo_values
planted = np.array([truth[(i, t, b)] for i, t, b, _ in pv.records])
rel = np.abs(pv.values - planted) / planted
print(f"{est.n_bids} bids, {est.n_qualifying} inverted, {est.n_outside_support} outside support")
print(f"relative error: median {np.median(rel):.4f}, p95 {np.quantile(rel, 0.95):.4f}")
print(f"valuation KDE bandwidth {est.valuation_kde.bandwidth:.3f}")

res = simulate_batch(m, [m.rec_slots], [0.5], periods=300, seed=SEED, trace=True)
ev = adhering_events(res)
bounds = bound_adhering_values([(i, t, b, recs) for i, t, b, recs, _ in ev])
value = {(i, t, b): v for i, t, b, _, v in ev}
inside = [lo <= value[(i, t, b)] and (hi is None or value[(i, t, b)] <= hi)
          for i, t, b, lo, hi in bounds.records]
print(f"{len(ev)} adhering events, {bounds.censored_count} censored, "
      f"coverage {np.mean(inside):.3f}")
