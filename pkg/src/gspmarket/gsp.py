"""Generalized second price clearing and bid recommendations."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .market import CtrCurve, QualityModel, truncated_normal

OUTCOME_SCHEMA_VERSION = 1
OUTCOME_COLUMNS = ("schema_version", "slot", "bidder_id", "rank_score", "price",
                   "clicks", "payment", "surplus")


@dataclass(frozen=True)
class BidProfile:
    """bidder id -> (bid per click, quality score)."""

    entries: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        for i, (b, q) in self.entries.items():
            if not q > 0:
                raise ValueError(f"bidder {i}: quality must be positive")
            if b < 0:
                raise ValueError(f"bidder {i}: negative bid")

    @classmethod
    def from_arrays(cls, ids, bids, qualities) -> "BidProfile":
        return cls({str(i): (float(b), float(q)) for i, b, q in zip(ids, bids, qualities)})


@dataclass(frozen=True)
class AuctionOutcome:
    ranking: tuple[tuple[str, float], ...]
    allocation: tuple[str, ...]
    prices: tuple[float, ...]
    clicks: tuple[float, ...]
    revenue: float
    per_bidder_surplus: Mapping[str, float] = field(default_factory=dict)
    reserve: float = 0.0

    @property
    def empty(self) -> bool:
        """True for the explicit no-auction result (nobody met the reserve)."""
        return not self.ranking

    def rank_scores(self) -> np.ndarray:
        return np.array([r for _, r in self.ranking])

    def slot_of(self, bidder: str) -> int | None:
        try:
            return self.allocation.index(bidder) + 1
        except ValueError:
            return None

    def to_rows(self) -> list[dict]:
        rows = []
        scores = dict(self.ranking)
        for k, (i, p, a) in enumerate(zip(self.allocation, self.prices, self.clicks), start=1):
            rows.append({
                "schema_version": OUTCOME_SCHEMA_VERSION,
                "slot": k,
                "bidder_id": i,
                "rank_score": f"{scores[i]:.6f}",
                "price": f"{p:.4f}",
                "clicks": f"{a:.4f}",
                "payment": f"{a * p:.4f}",
                "surplus": "" if i not in self.per_bidder_surplus
                else f"{self.per_bidder_surplus[i]:.4f}",
            })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=OUTCOME_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        w.writerows(self.to_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": OUTCOME_SCHEMA_VERSION,
            "reserve": self.reserve,
            "ranking": [[i, r] for i, r in self.ranking],
            "allocation": list(self.allocation),
            "prices": list(self.prices),
            "clicks": list(self.clicks),
            "revenue": self.revenue,
            "per_bidder_surplus": dict(self.per_bidder_surplus),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuctionOutcome":
        if d.get("schema_version") != OUTCOME_SCHEMA_VERSION:
            raise ValueError(f"unsupported outcome schema {d.get('schema_version')!r}")
        return cls(tuple((str(i), float(r)) for i, r in d["ranking"]),
                   tuple(d["allocation"]), tuple(d["prices"]), tuple(d["clicks"]),
                   float(d["revenue"]), dict(d["per_bidder_surplus"]), float(d["reserve"]))


def clear_auction(bids: BidProfile, ctr: CtrCurve, reserve: float = 0.0,
                  values: Mapping[str, float] | None = None) -> AuctionOutcome:
    """Rank by q*b and price each slot at the next rank score over own quality.

    Bids below ``reserve`` are excluded.  The winner of slot k pays
    ``max(r_{k+1} / q_i, reserve)`` per click; with nobody ranked below, the
    price is the reserve.  Ties in rank score go to the smaller bidder id.
    If nobody meets the reserve the returned outcome has ``empty == True``.
    """
    eligible = [(i, b, q) for i, (b, q) in bids.entries.items() if b >= reserve]
    eligible.sort(key=lambda e: (-e[1] * e[2], e[0]))
    ranking = tuple((i, b * q) for i, b, q in eligible)
    n_slots = min(ctr.K, len(eligible))
    allocation, prices, clicks, surplus = [], [], [], {}
    revenue = 0.0
    for k in range(n_slots):
        i, b, q = eligible[k]
        below = ranking[k + 1][1] if k + 1 < len(ranking) else 0.0
        p = max(below / q, reserve)
        a = ctr.alpha[k]
        allocation.append(i)
        prices.append(p)
        clicks.append(a)
        revenue += a * p
        if values is not None and i in values:
            surplus[i] = a * (values[i] - p)
    return AuctionOutcome(ranking, tuple(allocation), tuple(prices), tuple(clicks),
                          revenue, surplus, reserve)


@dataclass(frozen=True)
class RecommendationSet:
    """(bidder id, slot k) -> recommended bid s_{i,k}, k = 1..rec_slots."""

    recs: Mapping[tuple[str, int], float]
    rec_slots: int

    def row(self, bidder: str) -> tuple[float, ...]:
        return tuple(self.recs[(bidder, k)] for k in range(1, self.rec_slots + 1))

    def bidders(self) -> list[str]:
        return sorted({i for i, _ in self.recs})


def make_recommendations(yesterday: AuctionOutcome, sim_quality: Mapping[str, float],
                         rec_slots: int, reserve: float | None = None) -> RecommendationSet:
    """s_{i,k} = r_{k+1} (yesterday) / q_hat_i, floored at the reserve.

    A missing r_{k+1} (fewer than k+1 ranked bidders yesterday) means slot k
    was available at the reserve, so the recommendation is the reserve.
    """
    if rec_slots < 0:
        raise ValueError("rec_slots must be >= 0")
    reserve = yesterday.reserve if reserve is None else reserve
    scores = yesterday.rank_scores()
    recs = {}
    for i, qhat in sim_quality.items():
        if not qhat > 0:
            raise ValueError(f"bidder {i}: simulated quality must be positive")
        for k in range(1, rec_slots + 1):
            r_next = scores[k] if k < len(scores) else 0.0
            recs[(i, k)] = max(r_next / qhat, reserve)
    return RecommendationSet(recs, rec_slots)


def simulate_platform_quality(model: QualityModel, bidder: str, M: int = 5, rng=None) -> float:
    """Platform estimate q_hat: average of ``M`` simulated quality draws."""
    if M < 1:
        raise ValueError("M must be >= 1")
    draws = truncated_normal(model.mean(bidder), model.shared_sd, rng, size=M)
    return float(np.mean(draws))


# --------------------------------------------------------------------------
# batched clearing used by the simulators


def clear_batch(scores: np.ndarray, qualities: np.ndarray, values: np.ndarray,
                alpha: np.ndarray, reserve: float, active: np.ndarray):
    """Clear B independent auctions at once.

    ``scores``, ``qualities``, ``values`` and ``active`` have shape (B, n);
    inactive entries never rank.  Ties are broken by column index, which the
    callers keep aligned with sorted bidder ids.  Returns the rank order
    (B, n), per-slot prices (B, K) with NaN for empty slots, and per-row
    revenue, bidder surplus and social surplus.
    """
    B, n = scores.shape
    K = len(alpha)
    key = np.where(active, scores, -np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(n), (B, n)), -key), axis=-1)
    s_sorted = np.take_along_axis(key, order, axis=1)
    q_sorted = np.take_along_axis(qualities, order, axis=1)
    v_sorted = np.take_along_axis(values, order, axis=1)
    kk = min(K, n)
    occupied = np.isfinite(s_sorted[:, :kk])
    below = np.zeros((B, kk))
    if n > 1:
        nxt = s_sorted[:, 1:kk + 1]
        below[:, :nxt.shape[1]] = np.where(np.isfinite(nxt), nxt, 0.0)
    price = np.maximum(below / q_sorted[:, :kk], reserve)
    price = np.where(occupied, price, np.nan)
    a = alpha[:kk]
    pay = np.where(occupied, a * price, 0.0)
    worth = np.where(occupied, a * v_sorted[:, :kk], 0.0)
    revenue = pay.sum(axis=1)
    social = worth.sum(axis=1)
    return order, price, revenue, social - revenue, social
