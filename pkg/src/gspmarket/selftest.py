"""End-to-end invariant checks behind ``gspmarket selftest``.

Each check is small enough that the whole run takes seconds.  The full
test suite covers the same ground at larger sizes.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ._rng import stream


def _gsp_vs_naive() -> str:
    from .gsp import BidProfile, clear_auction
    from .market import CtrCurve
    rng = stream(0, "selftest-gsp")
    worst = 0.0
    for _ in range(50):
        n, K = int(rng.integers(1, 60)), int(rng.integers(1, 21))
        bids, quals = rng.uniform(0, 60, n), rng.uniform(0.02, 0.5, n)
        alpha = np.sort(rng.uniform(0.1, 20, K))[::-1] + np.arange(K)[::-1] * 1e-3
        ids = [f"b{j:03d}" for j in range(n)]
        out = clear_auction(BidProfile.from_arrays(ids, bids, quals), CtrCurve(tuple(alpha)), 2.5)
        order = sorted((j for j in range(n) if bids[j] >= 2.5),
                       key=lambda j: (-bids[j] * quals[j], ids[j]))
        if list(out.allocation) != [ids[j] for j in order[:K]]:
            raise AssertionError("allocation differs from sort order")
        for k, j in enumerate(order[:K]):
            below = bids[order[k + 1]] * quals[order[k + 1]] if k + 1 < len(order) else 0.0
            worst = max(worst, abs(out.prices[k] - max(below / quals[j], 2.5)))
    if worst > 1e-9:
        raise AssertionError(f"price error {worst:.3g}")
    return f"50 auctions, max price error {worst:.1e}"


def _truthful_limit() -> str:
    from .density import RankScoreDensities, TabulatedDensity
    from .market import CtrCurve, QualityModel
    from .strategies import best_response_bid
    from .valuation import invert_bid
    g = TabulatedDensity([0.0, 100.0], [0.01, 0.01], [0.0, 1.0], [0.0, 50.0])
    dens, ctr, unit = RankScoreDensities((g,)), CtrCurve((1.0,)), QualityModel({"me": 1.0}, 0.0)
    worst = 0.0
    for b in np.linspace(1, 99, 20):
        worst = max(worst, abs(invert_bid(b, unit, "me", dens, ctr) - b),
                    abs(best_response_bid(b, dens, unit, "me", ctr).bid - b))
    if worst > 1e-6:
        raise AssertionError(f"deviation {worst:.3g}")
    return f"single slot, unit quality: max deviation {worst:.1e}"


def _kde() -> str:
    from .density import fit_kde
    x = stream(0, "selftest-kde").normal(10, 3, 500)
    f = fit_kde(x)
    h = 1.06 * np.std(x, ddof=1) * len(x) ** -0.2
    grid = np.linspace(f.support[0] - 5 * h, f.support[1] + 5 * h, 4001)
    mass = float(np.trapezoid(f.pdf(grid), grid)) if hasattr(np, "trapezoid") \
        else float(np.trapz(f.pdf(grid), grid))
    two = fit_kde([-1.0, 1.0]).pdf(0.0)
    if abs(f.bandwidth - h) > 1e-12 or abs(mass - 1) > 1e-3 or abs(float(two) - 0.2279) > 1e-3:
        raise AssertionError(f"bandwidth {f.bandwidth}, mass {mass}, f(0) {two}")
    return f"bandwidth rule exact, mass {mass:.6f}, two-point f(0) = {float(two):.4f}"


def _envy_free_vcg() -> str:
    from .gsp import BidProfile, clear_auction
    from .market import default_ctr
    from .strategies import envy_free_bids, sort_by_score
    rng = stream(0, "selftest-vcg")
    worst = 0.0
    for _ in range(50):
        n, K = int(rng.integers(2, 25)), int(rng.integers(1, 21))
        vals, quals = rng.uniform(1, 100, n), rng.uniform(0.05, 1, n)
        ctr = default_ctr(K=K, top_clicks=10.0)
        ladder = sort_by_score([(f"b{j:02d}", vals[j], quals[j]) for j in range(n)])
        bids = envy_free_bids(ladder, ctr)
        out = clear_auction(BidProfile({i: (bids[i], q) for i, _, q in ladder}), ctr)
        a = list(ctr.alpha) + [0.0] * (n + 1)
        for k in range(len(out.allocation)):
            vcg = sum((a[j] - a[j + 1]) * ladder[j + 1][2] * ladder[j + 1][1]
                      for j in range(k, n - 1)) / ladder[k][2]
            worst = max(worst, abs(out.clicks[k] * out.prices[k] - vcg) / max(1.0, vcg))
    if worst > 1e-9:
        raise AssertionError(f"payment gap {worst:.3g}")
    return f"50 ladders, max relative payment gap {worst:.1e}"


def _accounting() -> str:
    from .counterfactual import simulate_batch
    from .market import generate_market
    m = generate_market(constructing=30, adhering=20, participation=0.5, periods=200)
    res = simulate_batch(m, [0, 3, 20], [0.3] * 3, periods=200, seed=1)
    if res.max_identity_residual > 1e-9:
        raise AssertionError(f"residual {res.max_identity_residual:.3g}")
    return f"200 periods x 3 rows, max relative residual {res.max_identity_residual:.1e}"


def _bounds() -> str:
    from .valuation import bound_adhering_values
    rng = stream(0, "selftest-bounds")
    events, truth = [], {}
    for e in range(500):
        v = float(rng.uniform(5, 80))
        recs = sorted(rng.uniform(3, 90, 3).tolist())
        below = [s for s in recs if s < v]
        b = max(below) if below else v * 0.8
        events.append((f"a{e}", 0, b, recs))
        truth[f"a{e}"] = v
    res = bound_adhering_values(events)
    bad = sum(1 for i, _, _, lo, hi in res.records
              if hi is not None and not lo <= truth[i] <= hi)
    if bad:
        raise AssertionError(f"{bad} planted values outside their bounds")
    return f"500 events, {res.censored_count} censored, 0 violations"


def _did() -> str:
    from .panel import did_fit, planted_panel
    p = planted_panel(rng=stream(0, "selftest-did"))
    est = did_fit(p)
    z = abs(est.alpha0 - 2.193) / est.clustered_se["T*Post"]
    if z > 4:
        raise AssertionError(f"estimate {est.alpha0:.3f} is {z:.1f} SEs from 2.193")
    return f"planted 2.193, estimated {est.alpha0:.3f} (se {est.clustered_se['T*Post']:.3f})"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("GSP clearing vs sort-and-price", _gsp_vs_naive),
    ("truthful single-slot limit", _truthful_limit),
    ("kernel density rules", _kde),
    ("envy-free payments equal VCG", _envy_free_vcg),
    ("revenue + bidder surplus identity", _accounting),
    ("valuation bounds contain planted values", _bounds),
    ("DID recovers a planted effect", _did),
]


def run_selftest(emit=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            detail = fn()
            emit(f"PASS  {name}: {detail}")
        except Exception as exc:  # report every failure, keep going
            ok = False
            emit(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    emit("selftest " + ("passed" if ok else "FAILED"))
    return ok


__all__ = ["CHECKS", "run_selftest"]
