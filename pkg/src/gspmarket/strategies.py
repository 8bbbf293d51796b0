"""Bidding behaviour: Bayesian best responses, envy-free ladders, adherence.

Bid-constructing bidders either best-respond to rank-score densities
(estimation side) or play the bidder-optimal locally envy-free point of the
realised auction (counterfactual side).  Bid-adhering bidders copy the
largest recommendation below their value with probability p and otherwise
fall back to a polynomial or a random shading rule.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import as_generator, stream
from .density import RankScoreDensities, fit_rank_densities, quality_nodes
from .market import CtrCurve, Group, MarketConfig, QualityModel, truncated_normal
from .valuation import BidRecord, foc_terms, simulate_rank_scores


# --------------------------------------------------------------------------
# fallback bidding models


@dataclass(frozen=True)
class PolynomialBidModel:
    """b = sum_j c_j v^j, clamped to [reserve, v]."""

    coefficients: tuple[float, ...]

    def raw(self, v):
        return np.polynomial.polynomial.polyval(np.asarray(v, float), self.coefficients)

    def bids(self, v, u=None, reserve: float = 0.0):
        v = np.asarray(v, float)
        return np.clip(self.raw(v), np.minimum(reserve, v), v)

    def bid(self, v: float, reserve: float = 0.0, rng=None) -> float:
        return float(self.bids(v, reserve=reserve))

    def to_dict(self):
        return {"kind": "polynomial", "coefficients": list(self.coefficients)}


# cubic fitted to lower-bound valuations and quadratic fitted to upper-bound
# valuations of bid-adhering advertisers in the source data
LOWER_BOUND_POLYNOMIAL = PolynomialBidModel((-1.68, 0.83, -5.54e-3, 1.11e-5))
UPPER_BOUND_POLYNOMIAL = PolynomialBidModel((-3.11, 0.57, -1.50e-3))


def fit_bid_polynomial(values, bids, degree: int = 3) -> PolynomialBidModel:
    """Least-squares polynomial of bids on values."""
    v = np.asarray(values, float)
    b = np.asarray(bids, float)
    order = np.argsort(v, kind="stable")
    coef = np.polynomial.polynomial.polyfit(v[order], b[order], degree)
    return PolynomialBidModel(tuple(float(c) for c in coef))


class ShadingKind(str, enum.Enum):
    RANDOM_UNIFORM = "random_uniform"


@dataclass(frozen=True)
class ShadingModel:
    """b = a * v with a ~ U[0, 1] drawn per bid."""

    kind: ShadingKind = ShadingKind.RANDOM_UNIFORM

    def bids(self, v, u, reserve: float = 0.0):
        v = np.asarray(v, float)
        return np.clip(np.asarray(u) * v, np.minimum(reserve, v), v)

    def bid(self, v: float, reserve: float = 0.0, rng=None) -> float:
        rng = as_generator(rng)
        return float(self.bids(v, rng.random(), reserve))

    def to_dict(self):
        return {"kind": "shading", "shading": self.kind.value}


class Fallback(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    RANDOM_SHADING = "random_shading"


def fallback_model(kind: Fallback | str, bound=None):
    """Fallback rule for a (model kind, valuation bound) cell."""
    from .market import Bound
    if Fallback(kind) is Fallback.RANDOM_SHADING:
        return ShadingModel()
    if bound is not None and Bound(bound) is Bound.UPPER:
        return UPPER_BOUND_POLYNOMIAL
    return LOWER_BOUND_POLYNOMIAL


# --------------------------------------------------------------------------
# adherence


@dataclass(frozen=True)
class AdherencePolicy:
    probability: float
    target_rule: str = "largest recommendation strictly below valuation"

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise ValueError("adherence probability must lie in [0, 1]")


def adhering_target(v, recs):
    """max{s < v} over the recommendation row(s); NaN where none is below v."""
    r = np.asarray(recs, float)
    v = np.asarray(v, float)
    below = np.where(r < v[..., None], r, -np.inf)
    best = below.max(axis=-1) if r.shape[-1] else np.full(v.shape, -np.inf)
    return np.where(np.isfinite(best), best, np.nan)


def adhering_bid(v: float, recs: Sequence[float], policy: AdherencePolicy, fallback,
                 rng=None, reserve: float = 0.0) -> tuple[float, bool]:
    """(bid, adhered).  Adheres with probability p when some rec is below v."""
    if not v > 0:
        raise ValueError("valuation must be positive")
    rng = as_generator(rng)
    u_adhere, u_shade = rng.random(2)
    target = float(adhering_target(v, recs))
    if np.isfinite(target) and u_adhere < policy.probability:
        return target, True
    return float(fallback.bids(v, u_shade, reserve)), False


# --------------------------------------------------------------------------
# Bayesian best response


@dataclass(frozen=True)
class BestResponse:
    bid: np.ndarray
    participates: np.ndarray
    used_fallback: np.ndarray

    def __getitem__(self, i):
        return BestResponse(self.bid[i], self.participates[i], self.used_fallback[i])


def _node_rows(q_means, quality_sd, nodes):
    rows = [quality_nodes(m, quality_sd, nodes) for m in q_means]
    width = max(len(r[0]) for r in rows)
    Q = np.ones((len(rows), width))
    W = np.zeros((len(rows), width))
    for i, (q, w) in enumerate(rows):
        Q[i, :len(q)] = q
        W[i, :len(w)] = w
    return Q, W


def best_response_bids(values, q_means, quality_sd: float, densities: RankScoreDensities,
                       ctr: CtrCurve, reserve: float = 0.0, nodes: int = 32,
                       grid: int = 64, tol: float = 1e-6) -> BestResponse:
    """Vectorised best responses.

    For each value v the payoff slope pi'(b) = (v - b) D(b) - N(b) is scanned
    on ``grid`` points of [reserve, v]; the last point with pi' > 0 and its
    right neighbour bracket the optimum, which bisection pins to ``tol``.
    With no positive slope anywhere the bid maximising the grid-integrated
    payoff is returned and ``used_fallback`` is set.  Values at or below the
    reserve do not participate (bid NaN).
    """
    v = np.atleast_1d(np.asarray(values, float))
    qm = np.broadcast_to(np.asarray(q_means, float), v.shape)
    part = v > reserve
    bid = np.full(v.shape, np.nan)
    fb = np.zeros(v.shape, bool)
    idx = np.flatnonzero(part)
    if len(idx) == 0:
        return BestResponse(bid, part, fb)
    vv = v[idx]
    uniq, inv = np.unique(qm[idx], return_inverse=True)
    Qu, Wu = _node_rows(uniq, quality_sd, nodes)
    Q, W = Qu[inv], Wu[inv]

    def slope(b, rows):
        n, d = foc_terms(b, Q[rows], W[rows], densities, ctr)
        return (vv[rows] - b) * d - n

    t = np.linspace(0.0, 1.0, grid)
    B = reserve + (vv - reserve)[:, None] * t[None, :]
    m = len(vv)
    rows_rep = np.repeat(np.arange(m), grid)
    S = slope(B.ravel(), rows_rep).reshape(m, grid)
    pos = S > 0
    has = pos.any(axis=1)
    last = grid - 1 - np.argmax(pos[:, ::-1], axis=1)
    ok = has & (last < grid - 1)
    rows = np.flatnonzero(ok)
    lo = B[rows, last[rows]]
    hi = B[rows, last[rows] + 1]
    while len(rows) and np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        up = slope(mid, rows) > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    out = np.empty(m)
    out[rows] = 0.5 * (lo + hi)
    # no strict sign change on the grid: maximise the integrated payoff
    bad = np.flatnonzero(~ok)
    if len(bad):
        step = B[bad, 1:] - B[bad, :-1]
        payoff = np.concatenate([np.zeros((len(bad), 1)),
                                 np.cumsum(0.5 * (S[bad, 1:] + S[bad, :-1]) * step, axis=1)],
                                axis=1)
        out[bad] = B[bad, np.argmax(payoff, axis=1)]
    bid[idx] = np.minimum(out, vv)
    fb[idx[bad]] = True
    return BestResponse(bid, part, fb)


def best_response_bid(v: float, densities: RankScoreDensities, quality: QualityModel,
                      bidder: str, ctr: CtrCurve, reserve: float = 0.0, nodes: int = 32,
                      grid: int = 64) -> BestResponse:
    """Best response of one bidder; ``.bid`` is NaN when v <= reserve."""
    return best_response_bids([v], [quality.mean(bidder)], quality.shared_sd, densities,
                               ctr, reserve, nodes, grid)[0]


# --------------------------------------------------------------------------
# locally envy-free ladder


def sort_by_score(entries):
    """Sort (id, v, q) entries by q*v descending, ties by id."""
    return sorted(entries, key=lambda e: (-e[1] * e[2], str(e[0])))


def envy_free_bids(sorted_by_score, ctr: CtrCurve, fixed_rungs=(), reserve: float = 0.0
                   ) -> dict[str, float]:
    """Bidder-optimal locally envy-free bids of constructing bidders.

    ``sorted_by_score`` holds (id, v, q) sorted by q*v descending.
    ``fixed_rungs`` holds (label, rank score) pairs of bidders whose bids are
    exogenous; they are merged into the ladder by score and keep it.  From
    the bottom up, the constructing bidder at ladder position k sets its rank
    score so it is indifferent between its slot and the one above:

        alpha_{k-1} r_k = q_k v_k (alpha_{k-1} - alpha_k) + alpha_k r_{k+1}

    with r_{k+1} floored at q_k * reserve.  Bidders below the last slot, and
    the top bidder, bid their value; a bidder with no one below bids the
    reserve.  Returns id -> bid.
    """
    entries = list(sorted_by_score)
    keys = [(-v * q, str(i)) for i, v, q in entries]
    if keys != sorted(keys):
        raise ValueError("entries must be sorted by q*v descending (ties by id)")
    rungs = sorted(fixed_rungs, key=lambda r: (-r[1], str(r[0])))
    ladder = []  # (is_fixed, payload)
    ci = ri = 0
    while ci < len(entries) or ri < len(rungs):
        take_c = ri >= len(rungs) or (ci < len(entries)
                                      and entries[ci][1] * entries[ci][2] >= rungs[ri][1])
        if take_c:
            ladder.append((False, entries[ci]))
            ci += 1
        else:
            ladder.append((True, rungs[ri]))
            ri += 1
    alpha = ctr.padded()
    K = ctr.K
    n = len(ladder)
    scores = np.zeros(n)
    bids: dict[str, float] = {}
    for pos in range(n - 1, -1, -1):
        fixed, item = ladder[pos]
        if fixed:
            scores[pos] = item[1]
            continue
        i, v, q = item
        below = scores[pos + 1] if pos + 1 < n else None
        if pos >= K or (pos == 0 and below is not None):
            s = q * v
        elif below is None and pos == 0:
            s = q * min(reserve, v)
        else:
            k = pos + 1
            r_below = max(0.0 if below is None else below, q * reserve)
            a_prev, a_k = alpha[k - 2], alpha[k - 1]
            s = (q * v * (a_prev - a_k) + a_k * r_below) / a_prev
        scores[pos] = s
        bids[i] = float(s / q)
    return bids


def envy_free_scores_batch(key, qual, val, fixed, alpha, reserve: float):
    """Envy-free rank scores for B ladders at once.

    All arrays have shape (B, n) and are already sorted by ``key``
    descending (key = q*v for constructing entries, the rung score for fixed
    ones).  Inactive entries carry key = -inf and sit at the end.  Returns the
    rank score of every entry (fixed entries keep their key).
    """
    B, n = key.shape
    K = len(alpha)
    active = np.isfinite(key)
    out = np.where(active, key, -np.inf).astype(float)
    a = np.append(alpha, 0.0)
    # positions >= K keep q*v (or their rung); walk slots K..1 upwards
    for pos in range(min(K, n) - 1, -1, -1):
        nxt = out[:, pos + 1] if pos + 1 < n else np.full(B, -np.inf)
        has_below = np.isfinite(nxt)
        is_c = active[:, pos] & ~fixed[:, pos]
        q = qual[:, pos]
        v = val[:, pos]
        if pos == 0:
            s = np.where(has_below, q * v, q * np.minimum(reserve, v))
        else:
            r_below = np.maximum(np.where(has_below, nxt, 0.0), q * reserve)
            s = (q * v * (a[pos - 1] - a[pos]) + a[pos] * r_below) / a[pos - 1]
        out[:, pos] = np.where(is_c, s, out[:, pos])
    return out


# --------------------------------------------------------------------------
# Bayesian equilibrium in the estimation model


@dataclass
class EquilibriumPanel:
    """Bids of constructing bidders at an approximate Bayesian equilibrium."""

    ids: np.ndarray          # (days, n) bidder ids
    values: np.ndarray       # (days, n)
    q_means: np.ndarray      # (days, n)
    bids: np.ndarray         # (days, n); NaN for values below the reserve
    densities: RankScoreDensities = field(repr=False)
    iterations: int = 0
    max_change: float = float("nan")

    def records(self) -> list[BidRecord]:
        out = []
        for d in range(self.bids.shape[0]):
            for j in range(self.bids.shape[1]):
                if np.isfinite(self.bids[d, j]):
                    out.append(BidRecord(str(self.ids[d, j]), d, float(self.bids[d, j]),
                                         float(self.q_means[d, j])))
        return out


def equilibrium_bids(values, q_means, ids, quality_sd: float, ctr: CtrCurve,
                     reserve: float = 0.0, auctions_per_period: int = 100, seed: int = 0,
                     iterations: int = 8, damping: float = 0.5, table_points: int = 1024,
                     nodes: int = 16, grid: int = 48) -> EquilibriumPanel:
    """Damped best-response iteration on a panel of days.

    Each round the current bids are re-simulated into rank-score densities
    (the estimation protocol), every bidder best-responds, and bids move a
    ``damping`` share of the way to the best response.
    """
    v = np.asarray(values, float)
    qm = np.asarray(q_means, float)
    ids = np.asarray(ids)
    part = v > reserve
    b = np.where(part, np.maximum(0.7 * v, reserve), np.nan)
    dens = None
    change = np.inf
    it = 0
    for it in range(1, iterations + 1):
        recs = [BidRecord(str(ids[d, j]), d, float(b[d, j]), float(qm[d, j]))
                for d in range(v.shape[0]) for j in range(v.shape[1]) if part[d, j]]
        samples, _ = simulate_rank_scores(recs, quality_sd, ctr.K, auctions_per_period,
                                          reserve, seed=seed + 7919 * it)
        dens = fit_rank_densities(samples).tabulated(table_points)
        br = best_response_bids(v[part], qm[part], quality_sd, dens, ctr, reserve,
                                nodes=nodes, grid=grid)
        new = b.copy()
        new[part] = (1 - damping) * b[part] + damping * br.bid
        change = float(np.nanmax(np.abs(new - b))) if part.any() else 0.0
        b = new
        if change < 1e-3:
            break
    return EquilibriumPanel(ids, v, qm, b, dens, it, change)


def constructing_panel(market: MarketConfig, seed: int, bidders_per_day: int, days: int):
    """Random daily line-ups of constructing bidders with drawn values."""
    rng = stream(seed, "constructing-panel")
    pool = np.array(market.ids(Group.CONSTRUCTING))
    n = min(bidders_per_day, len(pool))
    ids = np.stack([np.sort(rng.choice(pool, n, replace=False)) for _ in range(days)])
    src = market.valuations["constructing"]
    vals = src.sample_from(rng.random((days, n)), rng.standard_normal((days, n)))
    qm = np.vectorize(market.quality.mean)(ids)
    return ids, vals, qm


def implied_equilibrium_bids(market: MarketConfig, seed: int = 0, bidders_per_day: int = 25,
                             days: int = 30, **kw) -> np.ndarray:
    """Flat array of equilibrium bids implied by the market's constructing values."""
    ids, vals, qm = constructing_panel(market, seed, bidders_per_day, days)
    eq = equilibrium_bids(vals, qm, ids, market.quality.shared_sd, market.ctr,
                          market.reserve_price, market.auctions_per_period, seed, **kw)
    b = eq.bids.ravel()
    return b[np.isfinite(b)]


# --------------------------------------------------------------------------
# recommendation coincidence test


@dataclass(frozen=True)
class Theorem1Result:
    trials: int
    coincidences: int
    near_misses: int
    tolerance: float
    near_tolerance: float


def market_rank_densities(market: MarketConfig, seed: int = 0, bidders_per_day: int = 25,
                          days: int = 30, bid_model=LOWER_BOUND_POLYNOMIAL,
                          table_points: int = 2048) -> RankScoreDensities:
    """Rank-score densities of a day-by-day market where everyone bids ``bid_model``."""
    ids, vals, qm = constructing_panel(market, seed, bidders_per_day, days)
    bids = bid_model.bids(vals, reserve=market.reserve_price)
    recs = [BidRecord(str(ids[d, j]), d, float(bids[d, j]), float(qm[d, j]))
            for d in range(days) for j in range(ids.shape[1]) if vals[d, j] > market.reserve_price]
    samples, _ = simulate_rank_scores(recs, market.quality.shared_sd, market.K,
                                      market.auctions_per_period, market.reserve_price, seed)
    return fit_rank_densities(samples).tabulated(table_points)


def theorem1_test(market: MarketConfig, trials: int = 10_000, seed: int = 0,
                  densities: RankScoreDensities | None = None, tolerance: float = 1e-9,
                  near_tolerance: float = 0.5, bidders_per_day: int = 25) -> Theorem1Result:
    """Count exact matches between best responses and recommendations.

    Each trial draws a constructing bidder, a value and a best response
    against the market's rank-score densities, plus yesterday's auction and
    the platform's quality estimate, which give the recommendations
    s_k = max(r_{k+1} / q_hat, reserve).  With an atomless quality law a
    match is a null event.
    """
    if market.quality.shared_sd <= 0:
        raise ValueError("the coincidence test needs an atomless quality model (shared_sd > 0)")
    if market.rec_slots < 1:
        raise ValueError("the market publishes no recommendations")
    rng = stream(seed, "theorem1")
    if densities is None:
        densities = market_rank_densities(market, seed, bidders_per_day)
    pool = np.array(market.ids(Group.CONSTRUCTING))
    who = rng.choice(pool, trials)
    qm = np.vectorize(market.quality.mean)(who)
    src = market.valuations["constructing"]
    v = src.sample_from(rng.random(trials), rng.standard_normal(trials))
    br = best_response_bids(v, qm, market.quality.shared_sd, densities, market.ctr,
                            market.reserve_price)
    # yesterday: a line-up of bidders bidding the fallback polynomial
    n = min(bidders_per_day, len(pool))
    opp = rng.choice(pool, (trials, n))
    oq = truncated_normal(np.vectorize(market.quality.mean)(opp), market.quality.shared_sd, rng)
    ov = src.sample_from(rng.random((trials, n)), rng.standard_normal((trials, n)))
    ob = LOWER_BOUND_POLYNOMIAL.bids(ov, reserve=market.reserve_price)
    scores = np.where(ov > market.reserve_price, oq * ob, 0.0)
    scores = -np.sort(-scores, axis=1)
    qhat = truncated_normal(np.repeat(qm[:, None], market.quality_draws, axis=1),
                            market.quality.shared_sd, rng).mean(axis=1)
    L = market.rec_slots
    nxt = np.zeros((trials, L))
    m = min(L, n - 1)
    nxt[:, :m] = scores[:, 1:m + 1]
    s = np.maximum(nxt / qhat[:, None], market.reserve_price)
    b = br.bid[:, None]
    diff = np.abs(b - s)
    valid = np.isfinite(br.bid)
    exact = int(np.sum(valid & np.any(diff <= tolerance, axis=1)))
    near = int(np.sum(valid & np.any(diff <= near_tolerance, axis=1)))
    return Theorem1Result(trials, exact, near, tolerance, near_tolerance)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationResult:
    p_star: float
    rate: float
    target: float
    grid: np.ndarray
    rates: np.ndarray
    attainable: tuple[float, float]
    monotone: bool
    reachable: bool
    events: int


class UnreachableTarget(ValueError):
    def __init__(self, target, attainable):
        super().__init__(f"target rate {target:.4f} outside attainable range "
                         f"[{attainable[0]:.4f}, {attainable[1]:.4f}]")
        self.target = target
        self.attainable = attainable


def calibrate_adherence(market: MarketConfig, target_rate: float, grid_step: float = 0.005,
                        fallback: Fallback | str = Fallback.POLYNOMIAL, bound=None,
                        periods: int | None = None, seed: int | None = None,
                        tolerance: float = 0.005, strict: bool = True) -> CalibrationResult:
    """Grid search for the adherence probability matching ``target_rate``.

    Every grid value of p is simulated under the market's current disclosure
    regime with common random numbers, so the rate curve is a paired
    comparison across p.  Raises ``UnreachableTarget`` (carrying the
    attainable range) when no p comes within ``tolerance`` and ``strict``.
    """
    if not 0 <= target_rate < 1:
        raise ValueError("target_rate must lie in [0, 1)")
    if not 0 < grid_step <= 1:
        raise ValueError("grid_step must lie in (0, 1]")
    from .counterfactual import simulate_batch
    from .market import Bound
    grid = np.round(np.arange(0.0, 1.0 + grid_step / 2, grid_step), 10)
    grid = np.minimum(grid, 1.0)
    res = simulate_batch(market, rec_slots=[market.rec_slots] * len(grid), adherence=grid,
                         fallback=fallback, bound=bound or Bound.LOWER,
                         periods=periods or market.periods,
                         seed=market.rng_seed if seed is None else seed)
    rates = res.adherence_rate
    j = int(np.argmin(np.abs(rates - target_rate)))
    attainable = (float(rates.min()), float(rates.max()))
    reachable = abs(rates[j] - target_rate) <= tolerance
    if strict and not reachable:
        raise UnreachableTarget(target_rate, attainable)
    monotone = bool(np.all(np.diff(rates) >= 0))
    return CalibrationResult(float(grid[j]), float(rates[j]), target_rate, grid, rates,
                             attainable, monotone, bool(reachable), int(res.adhering_events[j]))
