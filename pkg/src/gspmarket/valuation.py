"""Structural valuation estimates from observed bids.

Bid-constructing bidders: each observed bid is inverted through the
first-order condition of the expected GSP payoff,

    v = b + N(b) / D(b)
    N(b) = int sum_k alpha_k g_{k-1}(qb) E[qb - r_k | r_k < qb] dQ(q)
    D(b) = int sum_k q g_k(qb) (alpha_k - alpha_{k+1}) dQ(q)

with g_0 = 0 and alpha_{K+1} = 0, and a kernel density is fitted to the
resulting pseudo values.  Bid-adhering bidders only give bounds: the bid
itself from below, the next recommendation above it from above.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._rng import stream
from .density import (KdeModel, RankScoreDensities, DegenerateSampleError, _Phi,
                      fit_kde, fit_rank_densities, quality_nodes)
from .market import CtrCurve, MarketConfig, QualityModel, truncated_normal

DENOMINATOR_FLOOR = 1e-12


class EstimationSupportError(ValueError):
    """The bid lies where no slot density has mass, so D(b) vanishes."""


class EmptySampleError(ValueError):
    pass


# --------------------------------------------------------------------------
# first-order condition


def foc_terms(bids, qualities, weights, densities: RankScoreDensities, ctr: CtrCurve):
    """N(b) and D(b) for an array of bids.

    ``qualities`` and ``weights`` are quadrature nodes, either shared (1-d)
    or one row per bid (2-d, same leading length as ``bids``).
    """
    b = np.atleast_1d(np.asarray(bids, float))
    q = np.asarray(qualities, float)
    w = np.asarray(weights, float)
    if q.ndim == 1:
        q = np.broadcast_to(q, (len(b), len(q)))
        w = np.broadcast_to(w, q.shape)
    x = b[:, None] * q
    alpha = ctr.padded()
    num = np.zeros_like(x)
    den = np.zeros_like(x)
    g_prev = np.zeros_like(x)
    for k in range(1, ctr.K + 1):
        g_k, mass, part = densities.evaluate(k, x)
        den += q * g_k * (alpha[k - 1] - alpha[k])
        # conditional mean E[x - r_k | r_k < x], zero where slot k has no mass below
        cm = np.where(mass >= 1e-8, part / np.maximum(mass, 1e-300), 0.0)
        num += alpha[k - 1] * g_prev * cm
        g_prev = g_k
    return (w * num).sum(axis=1), (w * den).sum(axis=1)


def _nodes_for(quality: QualityModel, bidder: str, nodes: int):
    return quality_nodes(quality.mean(bidder), quality.shared_sd, nodes)


def invert_bid(b: float, quality: QualityModel, bidder: str, densities: RankScoreDensities,
               ctr: CtrCurve, nodes: int = 32) -> float:
    """Pseudo value of a single bid; raises when the bid is outside the estimable support."""
    q, w = _nodes_for(quality, bidder, nodes)
    num, den = foc_terms([b], q, w, densities, ctr)
    if not den[0] > DENOMINATOR_FLOOR:
        raise EstimationSupportError(f"bid {b:.6g} lies outside the estimable support")
    return float(b + num[0] / den[0])


def invert_bids(bids, q_means, quality_sd: float, densities: RankScoreDensities,
                ctr: CtrCurve, nodes: int = 32):
    """Vectorised inversion.  Returns (values, numerators, denominators);
    values are NaN where the denominator vanishes."""
    b = np.asarray(bids, float)
    qm = np.broadcast_to(np.asarray(q_means, float), b.shape)
    Q = np.empty((len(b), 0))
    W = Q
    if len(b):
        rows = [quality_nodes(m, quality_sd, nodes) for m in qm]
        width = max(len(r[0]) for r in rows)
        Q = np.ones((len(b), width))
        W = np.zeros((len(b), width))
        for i, (qq, ww) in enumerate(rows):
            Q[i, :len(qq)] = qq
            W[i, :len(ww)] = ww
    num, den = foc_terms(b, Q, W, densities, ctr) if len(b) else (b, b)
    ok = den > DENOMINATOR_FLOOR
    v = np.full(b.shape, np.nan)
    v[ok] = b[ok] + num[ok] / den[ok]
    return v, num, den


def payoff_derivative(b, v, quality: QualityModel, bidder: str, densities: RankScoreDensities,
                      ctr: CtrCurve, nodes: int = 32):
    """d/db of the expected payoff, (v - b) D(b) - N(b), vectorised over b (and v)."""
    q, w = _nodes_for(quality, bidder, nodes)
    b = np.atleast_1d(np.asarray(b, float))
    num, den = foc_terms(b, q, w, densities, ctr)
    return (np.asarray(v, float) - b) * den - num


# --------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class BidRecord:
    bidder_id: str
    day: int
    bid: float
    q_mean: float | None = None


def as_bid_records(bids: Iterable) -> list[BidRecord]:
    out = []
    for r in bids:
        if isinstance(r, BidRecord):
            out.append(r)
        elif len(r) == 3:
            out.append(BidRecord(str(r[0]), int(r[1]), float(r[2])))
        else:
            out.append(BidRecord(str(r[0]), int(r[1]), float(r[2]),
                                 None if r[3] is None else float(r[3])))
    return out


@dataclass(frozen=True)
class PseudoValueSample:
    records: tuple[tuple[str, int, float, float], ...]

    @property
    def bids(self) -> np.ndarray:
        return np.array([r[2] for r in self.records])

    @property
    def values(self) -> np.ndarray:
        return np.array([r[3] for r in self.records])

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["bidder_id", "day", "bid", "pseudo_value", "markup"])
        for i, t, b, v in self.records:
            w.writerow([i, t, f"{b:.4f}", f"{v:.4f}", f"{v - b:.4f}"])
        return buf.getvalue()


@dataclass
class EstimationResult:
    pseudo_values: PseudoValueSample
    valuation_kde: KdeModel
    densities: RankScoreDensities
    n_bids: int
    n_qualifying: int
    n_outside_support: int
    numerators: np.ndarray = field(repr=False)
    denominators: np.ndarray = field(repr=False)


# --------------------------------------------------------------------------
# step 1: simulated rank scores


def simulate_rank_scores(records: Sequence[BidRecord], quality_sd: float, K: int,
                         auctions_per_period: int, reserve: float = 0.0, seed: int = 0,
                         q_means: Mapping[str, float] | None = None):
    """Rank-score samples per slot from re-simulating each day's auctions.

    Each day, every listed bidder draws a fresh quality score for each of
    ``auctions_per_period`` auctions; the sorted rank scores give one draw
    of r_1..r_K per auction.  A bid qualifies when it occupied some slot in
    at least one of its day's simulated auctions.

    Returns (list of per-slot sample arrays, boolean mask of qualifying
    records aligned with ``records``).
    """
    by_day: dict[int, list[int]] = {}
    for j, r in enumerate(records):
        by_day.setdefault(r.day, []).append(j)
    samples = [[] for _ in range(K)]
    qualifies = np.zeros(len(records), bool)
    for day in sorted(by_day):
        idx = sorted(by_day[day], key=lambda j: records[j].bidder_id)
        idx = [j for j in idx if records[j].bid >= reserve]
        if not idx:
            continue
        b = np.array([records[j].bid for j in idx])
        qm = np.array([_q_mean(records[j], q_means) for j in idx])
        rng = stream(seed, "rank-scores", day)
        q = truncated_normal(qm, quality_sd, rng, size=(auctions_per_period, len(idx)))
        r = q * b
        order = np.argsort(-r, axis=1, kind="stable")
        r_sorted = np.take_along_axis(r, order, axis=1)
        kk = min(K, len(idx))
        for k in range(kk):
            samples[k].append(r_sorted[:, k])
        won = np.zeros(len(idx), bool)
        won[np.unique(order[:, :kk])] = True
        qualifies[np.asarray(idx)[won]] = True
    return [np.concatenate(s) if s else np.empty(0) for s in samples], qualifies


def _q_mean(rec: BidRecord, q_means):
    if rec.q_mean is not None:
        return rec.q_mean
    if q_means is None or rec.bidder_id not in q_means:
        raise KeyError(f"no quality mean for bidder {rec.bidder_id!r}")
    return q_means[rec.bidder_id]


def estimate_constructing_values(bids: Iterable, market: MarketConfig, seed: int = 0,
                                 nodes: int = 32, tabulate: bool = True,
                                 auctions_per_period: int | None = None) -> EstimationResult:
    """Two-step estimate of the valuation density from pre-disclosure bids.

    Step 1 fits g_k to simulated rank scores and inverts every qualifying
    bid.  Step 2 fits a kernel density to the pseudo values.  Bids whose
    denominator vanishes are dropped and counted in ``n_outside_support``.
    """
    records = as_bid_records(bids)
    if not records:
        raise EmptySampleError("bid panel is empty")
    A = market.auctions_per_period if auctions_per_period is None else auctions_per_period
    sd = market.quality.shared_sd
    qmeans = dict(market.quality.per_bidder_mean)
    samples, qual = simulate_rank_scores(records, sd, market.K, A, market.reserve_price,
                                         seed, qmeans)
    densities = fit_rank_densities(samples)
    fast = densities.tabulated() if tabulate else densities
    sel = np.flatnonzero(qual)
    if len(sel) == 0:
        raise EmptySampleError("no bid occupied a slot in the simulated auctions")
    b = np.array([records[j].bid for j in sel])
    qm = np.array([_q_mean(records[j], qmeans) for j in sel])
    v, num, den = invert_bids(b, qm, sd, fast, market.ctr, nodes)
    ok = np.isfinite(v)
    if not np.any(ok):
        raise EmptySampleError("every qualifying bid lies outside the estimable support")
    recs = sorted((records[j].bidder_id, records[j].day, records[j].bid, float(vj))
                  for j, vj, o in zip(sel, v, ok) if o)
    pv = PseudoValueSample(tuple(recs))
    f = fit_kde(pv.values)
    return EstimationResult(pv, f, densities, len(records), int(len(sel)),
                            int((~ok).sum()), num[ok], den[ok])


# --------------------------------------------------------------------------
# bounds for bid-adhering bidders


class _KernelCdf:
    """Weighted normal-kernel CDF; centres at +inf contribute zero mass.

    With ``bandwidth == 0`` it is the empirical step CDF.
    """

    def __init__(self, centres, bandwidth: float, n_total: int):
        self.centres = np.sort(np.asarray(centres, float))
        self.bandwidth = float(bandwidth)
        self.n_total = n_total

    def __call__(self, x):
        x = np.asarray(x, float)
        if len(self.centres) == 0:
            return np.zeros_like(x)
        if self.bandwidth == 0:
            return np.searchsorted(self.centres, x, side="right") / self.n_total
        z = (x[..., None] - self.centres) / self.bandwidth
        return _Phi(z).sum(axis=-1) / self.n_total


@dataclass
class ValuationBounds:
    records: tuple[tuple[str, int, float, float, float | None], ...]
    lower_samples: np.ndarray
    upper_samples: np.ndarray
    censored_count: int
    bandwidth: float
    lower_cdf: _KernelCdf = field(repr=False)
    upper_cdf: _KernelCdf = field(repr=False)
    lower_kde: KdeModel | None = field(default=None, repr=False)
    upper_kde: KdeModel | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["bidder_id", "day", "bid", "lower", "upper", "censored", "censored_count"])
        for i, t, b, lo, hi in self.records:
            w.writerow([i, t, f"{b:.4f}", f"{lo:.4f}", "" if hi is None else f"{hi:.4f}",
                        int(hi is None), self.censored_count])
        return buf.getvalue()


def value_bounds(bid: float, recs: Sequence[float]) -> tuple[float, float | None]:
    """(lower, upper) for one event; upper is None when no rec exceeds the bid."""
    above = [s for s in recs if s > bid]
    return float(bid), (float(min(above)) if above else None)


def bound_adhering_values(events: Iterable) -> ValuationBounds:
    """Valuation bounds from (id, day, bid, recommendations) events.

    Lower bound is the bid, upper bound the smallest recommendation strictly
    above it.  Events without such a recommendation are censored.  Both
    CDFs share one bandwidth and the upper CDF counts censored events as
    mass at +inf, so lower_cdf >= upper_cdf holds pointwise.
    """
    rows = []
    for ev in events:
        i, t, b, recs = ev
        lo, hi = value_bounds(float(b), list(recs))
        rows.append((str(i), int(t), float(b), lo, hi))
    if not rows:
        raise EmptySampleError("no adhering events")
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    lower = np.array([r[3] for r in rows])
    upper = np.array([r[4] for r in rows if r[4] is not None])
    censored = len(rows) - len(upper)

    def try_fit(x):
        try:
            return fit_kde(x)
        except DegenerateSampleError:
            return None

    lower_kde, upper_kde = try_fit(lower), try_fit(upper)
    if lower_kde is not None:
        h = lower_kde.bandwidth
    elif upper_kde is not None:
        h = upper_kde.bandwidth
    else:
        h = 0.0
    n = len(rows)
    return ValuationBounds(tuple(rows), lower, upper, censored, h,
                           _KernelCdf(lower, h, n), _KernelCdf(upper, h, n),
                           lower_kde, upper_kde)


__all__ = [
    "BidRecord", "EmptySampleError", "EstimationResult", "EstimationSupportError",
    "PseudoValueSample", "ValuationBounds", "bound_adhering_values", "estimate_constructing_values",
    "foc_terms", "invert_bid", "invert_bids", "payoff_derivative", "simulate_rank_scores",
    "value_bounds",
]
