"""Day-by-day market simulation under different disclosure levels.

Several scenarios (rows) are simulated side by side with common random
numbers: every period draws participation, values, quality scores, the
platform's quality estimates and the adherence/shading uniforms once, with
shapes that do not depend on the scenario.  Rows differ only in how many
recommendation slots are published and in the adherence probability, so
comparisons across rows are paired.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._rng import stream
from .market import Bound, BoundedValuation, Group, MarketConfig, truncated_normal
from .strategies import Fallback, adhering_target, envy_free_scores_batch, fallback_model

WARMUP_PERIODS = 100
DEFAULT_SLOTS = (0, 1, 3, 5, 10, 20)
METRICS = ("avg_price", "revenue", "bidder_surplus", "social_surplus")


def settle_period(key, qual, val, fixed, alpha, reserve):
    """Envy-free response of constructing bidders, then GSP clearing.

    Arrays are (B, n): ``key`` is q*v for constructing entries and the
    realised rank score for fixed (adhering) entries, -inf when inactive.
    Returns a dict with the ladder order, final rank scores in ladder order,
    per-slot prices and per-row revenue, bidder surplus and social surplus.
    """
    B, n = key.shape
    order = np.lexsort((np.broadcast_to(np.arange(n), (B, n)), -key), axis=-1)
    k_s = np.take_along_axis(key, order, axis=1)
    q_s = np.take_along_axis(qual, order, axis=1)
    v_s = np.take_along_axis(val, order, axis=1)
    f_s = np.take_along_axis(fixed, order, axis=1)
    scores = envy_free_scores_batch(k_s, q_s, v_s, f_s, alpha, reserve)
    K = len(alpha)
    kk = min(K, n)
    occupied = np.isfinite(scores[:, :kk])
    nxt = np.zeros((B, kk))
    if n > 1:
        tail = scores[:, 1:kk + 1]
        nxt[:, :tail.shape[1]] = np.where(np.isfinite(tail), tail, 0.0)
    with np.errstate(invalid="ignore"):
        price = np.where(occupied, np.maximum(nxt / q_s[:, :kk], reserve), 0.0)
    a = alpha[:kk]
    pay = np.where(occupied, a * price, 0.0)
    worth = np.where(occupied, a * np.where(occupied, v_s[:, :kk], 0.0), 0.0)
    gain = np.where(occupied, a * (np.where(occupied, v_s[:, :kk], 0.0) - price), 0.0)
    return {
        "order": order, "scores": scores, "price": price, "occupied": occupied,
        "revenue": pay.sum(axis=1), "bidder_surplus": gain.sum(axis=1),
        "social_surplus": worth.sum(axis=1), "clicks": np.where(occupied, a, 0.0).sum(axis=1),
    }


@dataclass
class BatchResult:
    rec_slots: np.ndarray
    adherence: np.ndarray
    periods: int
    revenue: np.ndarray          # per-period means
    bidder_surplus: np.ndarray
    social_surplus: np.ndarray
    clicks: np.ndarray
    adhering_events: np.ndarray
    adhered: np.ndarray
    max_identity_residual: float
    trace: dict | None = field(default=None, repr=False)

    @property
    def adherence_rate(self) -> np.ndarray:
        return self.adhered / np.maximum(self.adhering_events, 1)

    @property
    def avg_price(self) -> np.ndarray:
        return self.revenue / np.where(self.clicks > 0, self.clicks, np.nan)


def _draw_block(rng, T, n, qm, sd, M):
    return {
        "u_part": rng.random((T, n)),
        "u_val": rng.random((T, n)),
        "z_val": rng.standard_normal((T, n)),
        "q": truncated_normal(np.broadcast_to(qm, (T, n)), sd, rng),
        "qhat": truncated_normal(np.broadcast_to(qm[:, None], (T, n, M)), sd, rng).mean(axis=2),
        "u_adh": rng.random((T, n)),
        "u_shade": rng.random((T, n)),
    }


def simulate_batch(market: MarketConfig, rec_slots: Sequence[int], adherence=None,
                   fallback: Fallback | str = Fallback.POLYNOMIAL,
                   bound: Bound | str = Bound.LOWER, periods: int | None = None,
                   seed: int | None = None, warmup: int = WARMUP_PERIODS,
                   persistent_values: bool = False, disclosure_start: int = 0,
                   trace: bool = False, block: int = 256) -> BatchResult:
    """Simulate one row per entry of ``rec_slots`` (paired across rows).

    ``adherence`` is one probability per row (default: the market's).
    Periods before ``disclosure_start`` (counted after warm-up) publish no
    recommendations in any row.  Returns per-period means of the metrics.
    """
    L = np.asarray(rec_slots, int)
    B = len(L)
    if B == 0:
        raise ValueError("need at least one scenario row")
    if np.any(L < 0) or np.any(L > market.K):
        raise ValueError(f"rec_slots must lie in [0, {market.K}]")
    p = np.full(B, market.adherence_prob) if adherence is None else np.asarray(adherence, float)
    if p.shape != (B,):
        raise ValueError("one adherence probability per row")
    periods = market.periods if periods is None else int(periods)
    if periods < 1:
        raise ValueError("periods must be >= 1")
    seed = market.rng_seed if seed is None else seed
    bound = Bound(bound)
    fb = fallback_model(fallback, bound)

    bidders = sorted(market.bidders, key=lambda b: b.id)
    ids = [b.id for b in bidders]
    n = len(bidders)
    adh = np.array([b.group is Group.ADHERING for b in bidders])
    qm = np.array([b.quality_mean for b in bidders])
    sources = []
    for b in bidders:
        src = market.valuations[b.valuation_source]
        if isinstance(src, BoundedValuation):
            src = src.select(bound)
        sources.append(src)
    # group bidders sharing one source so values are transformed in bulk
    src_groups: dict[int, tuple[object, np.ndarray]] = {}
    for j, s in enumerate(sources):
        src_groups.setdefault(id(s), (s, []))[1].append(j)
    src_groups = {k: (s, np.array(js)) for k, (s, js) in src_groups.items()}

    def values_from(u, z):
        v = np.empty(u.shape)
        for s, js in src_groups.values():
            v[..., js] = s.sample_from(u[..., js], z[..., js])
        return v

    alpha = market.ctr.array()
    K = market.K
    reserve = market.reserve_price
    sd = market.quality.shared_sd
    M = market.quality_draws
    rng = stream(seed, "counterfactual")
    fixed_v = None
    if persistent_values:
        vr = stream(seed, "persistent-values")
        fixed_v = values_from(vr.random(n), vr.standard_normal(n))

    total = warmup + periods
    prev_scores = np.zeros((B, K + 1))
    have_prev = False
    sums = {m: np.zeros(B) for m in ("revenue", "bidder_surplus", "social_surplus", "clicks")}
    events = np.zeros(B, np.int64)
    adhered = np.zeros(B, np.int64)
    worst = 0.0
    rows = np.arange(B)
    kk_all = np.arange(1, K + 1)
    tr = None
    if trace:
        tr = {"ids": ids, "bid": np.full((periods, B, n), np.nan),
              "position": np.zeros((periods, B, n), np.int16),
              "price": np.full((periods, B, n), np.nan),
              "value": np.full((periods, n), np.nan),
              "adhered": np.zeros((periods, B, n), bool),
              # (period, row, bidder index, bid, value, published recommendations)
              "events": []}

    t = 0
    while t < total:
        T = min(block, total - t)
        d = _draw_block(rng, T, n, qm, sd, M)
        for s in range(T):
            measured = t >= warmup
            v = fixed_v if fixed_v is not None else values_from(d["u_val"][s], d["z_val"][s])
            act = (d["u_part"][s] < market.participation) & (v > reserve)
            cols = np.flatnonzero(act)
            if len(cols) == 0:
                t += 1
                continue
            q = d["q"][s, cols]
            vv = v[cols]
            is_adh = adh[cols]
            publish = have_prev and (t - warmup >= disclosure_start)
            # adhering bids: recommendation or fallback
            a_cols = np.flatnonzero(is_adh)
            bids = np.broadcast_to(np.where(is_adh, np.nan, vv), (B, len(cols))).copy()
            took = np.zeros((B, len(cols)), bool)
            if len(a_cols):
                fb_bid = fb.bids(vv[a_cols], d["u_shade"][s, cols[a_cols]], reserve)
                a_bid = np.broadcast_to(fb_bid, (B, len(a_cols))).copy()
                if publish and np.any(L > 0):
                    qh = d["qhat"][s, cols[a_cols]]
                    recs = np.maximum(prev_scores[:, None, 1:] / qh[None, :, None], reserve)
                    recs = np.where(kk_all[None, None, :] <= L[:, None, None], recs, np.inf)
                    target = adhering_target(np.broadcast_to(vv[a_cols], (B, len(a_cols))), recs)
                    go = np.isfinite(target) & (d["u_adh"][s, cols[a_cols]][None, :] < p[:, None])
                    a_bid = np.where(go, target, a_bid)
                    took[:, a_cols] = go
                    if measured:
                        events += np.where(L > 0, len(a_cols), 0)
                        adhered += go.sum(axis=1)
                        if tr is not None:
                            for r, j in zip(*np.nonzero(go)):
                                tr["events"].append((t - warmup, int(r), int(cols[a_cols[j]]),
                                                     float(target[r, j]), float(vv[a_cols[j]]),
                                                     tuple(recs[r, j, :L[r]].tolist())))
                bids[:, a_cols] = a_bid
            qb = np.broadcast_to(q, (B, len(cols)))
            key = np.where(is_adh, qb * bids, qb * vv)
            out = settle_period(key, qb, np.broadcast_to(vv, (B, len(cols))),
                                np.broadcast_to(is_adh, (B, len(cols))), alpha, reserve)
            sc = out["scores"][:, :K + 1]
            prev_scores = np.zeros((B, K + 1))
            prev_scores[:, :sc.shape[1]] = np.where(np.isfinite(sc), sc, 0.0)
            have_prev = True
            if measured:
                for m in sums:
                    sums[m] += out[m]
                resid = np.abs(out["revenue"] + out["bidder_surplus"] - out["social_surplus"])
                worst = max(worst, float(np.max(resid / np.maximum(out["social_surplus"], 1e-300))))
                if tr is not None:
                    i = t - warmup
                    order = out["order"]
                    final_bid = out["scores"] / np.take_along_axis(qb, order, axis=1)
                    gcols = cols[order]
                    tr["value"][i, cols] = vv
                    tr["bid"][i, rows[:, None], gcols] = final_bid
                    pos = np.broadcast_to(np.arange(1, len(cols) + 1), order.shape)
                    tr["position"][i, rows[:, None], gcols] = pos
                    kk = out["price"].shape[1]
                    tr["price"][i, rows[:, None], gcols[:, :kk]] = np.where(
                        out["occupied"], out["price"], np.nan)
                    tr["adhered"][i, rows[:, None], gcols] = np.take_along_axis(took, order, axis=1)
            t += 1
    means = {m: sums[m] / periods for m in sums}
    return BatchResult(L, p, periods, means["revenue"], means["bidder_surplus"],
                       means["social_surplus"], means["clicks"], events, adhered, worst, tr)


# --------------------------------------------------------------------------
# scenario tables


@dataclass(frozen=True)
class ScenarioResult:
    rec_slots: int
    avg_price: float
    revenue: float
    bidder_surplus: float
    social_surplus: float
    periods: int
    bound: str
    fallback: str
    adherence_prob: float = 0.0
    adherence_rate: float = 0.0
    revenue_per_period: float = 0.0
    bidder_surplus_per_period: float = 0.0
    social_surplus_per_period: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _results_from_batch(res: BatchResult, fallback, bound) -> list[ScenarioResult]:
    out = []
    for j in range(len(res.rec_slots)):
        out.append(ScenarioResult(
            int(res.rec_slots[j]), float(res.avg_price[j]),
            float(res.revenue[j] * res.periods), float(res.bidder_surplus[j] * res.periods),
            float(res.social_surplus[j] * res.periods), res.periods, Bound(bound).value,
            Fallback(fallback).value, float(res.adherence[j]), float(res.adherence_rate[j]),
            float(res.revenue[j]), float(res.bidder_surplus[j]), float(res.social_surplus[j])))
    return out


def run_scenario(market: MarketConfig, rec_slots: int, fallback=Fallback.POLYNOMIAL,
                 bound=Bound.LOWER, periods: int | None = None, seed: int | None = None,
                 **kw) -> ScenarioResult:
    """Metrics of one disclosure level (totals are per-period means times periods)."""
    if rec_slots > market.K:
        raise ValueError(f"rec_slots {rec_slots} exceeds the number of slots {market.K}")
    res = simulate_batch(market, [rec_slots], None, fallback, bound, periods, seed, **kw)
    return _results_from_batch(res, fallback, bound)[0]


def _sweep_cell(args):
    market, slots, fallback, bound, periods, seed, p = args
    res = simulate_batch(market, slots, [p] * len(slots), fallback, bound, periods, seed)
    return _results_from_batch(res, fallback, bound)


def sweep(market: MarketConfig, rec_slot_list: Sequence[int] = DEFAULT_SLOTS,
          fallbacks=(Fallback.POLYNOMIAL, Fallback.RANDOM_SHADING),
          bounds=(Bound.LOWER, Bound.UPPER), periods: int | None = None,
          seed: int | None = None, adherence: dict | None = None,
          threads: int = 1) -> list[ScenarioResult]:
    """One result per (slot count, fallback, bound) cell.

    ``adherence`` optionally maps (fallback, bound) to a calibrated p for
    that cell; otherwise the market's probability is used everywhere.
    """
    slots = list(rec_slot_list)
    if not slots:
        raise ValueError("empty slot list")
    for s in slots:
        if not 0 <= s <= market.K:
            raise ValueError(f"rec_slots {s} outside [0, {market.K}]")
    cells = []
    for f in fallbacks:
        for b in bounds:
            p = market.adherence_prob
            if adherence is not None:
                p = adherence.get((Fallback(f), Bound(b)), p)
            cells.append((market, slots, Fallback(f), Bound(b), periods, seed, p))
    if threads > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_sweep_cell, cells))
    else:
        parts = [_sweep_cell(c) for c in cells]
    return [r for part in parts for r in part]


def calibrate_cells(market: MarketConfig, target_rate: float,
                    fallbacks=(Fallback.POLYNOMIAL, Fallback.RANDOM_SHADING),
                    bounds=(Bound.LOWER, Bound.UPPER), periods: int | None = None,
                    grid_step: float = 0.005, threads: int = 1) -> dict:
    """Calibrated adherence probability for every (fallback, bound) cell."""
    jobs = [(market, target_rate, grid_step, Fallback(f), Bound(b), periods)
            for f in fallbacks for b in bounds]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(_calibrate_job, jobs))
    else:
        out = [_calibrate_job(j) for j in jobs]
    return {(j[3], j[4]): r for j, r in zip(jobs, out)}


def _calibrate_job(job):
    from .strategies import calibrate_adherence
    market, target, step, f, b, periods = job
    return calibrate_adherence(market, target, step, f, b, periods)


def results_table(results: Sequence[ScenarioResult]) -> str:
    """CSV with one row per cell; columns mirror the counterfactual tables."""
    buf = io.StringIO()
    cols = ["fallback", "bound", "rec_slots", "avg_price", "revenue", "bidder_surplus",
            "social_surplus", "periods", "adherence_prob", "adherence_rate",
            "revenue_per_period", "bidder_surplus_per_period", "social_surplus_per_period"]
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for r in results:
        d = r.to_dict()
        w.writerow([d[c] if isinstance(d[c], (str, int)) else f"{d[c]:.4f}" for c in cols])
    return buf.getvalue()


def format_table(results: Sequence[ScenarioResult]) -> str:
    """Text layout: rows = slot counts, lower bound value with upper bound in brackets."""
    lines = []
    for f in dict.fromkeys(r.fallback for r in results):
        lines.append(f"fallback: {f}")
        lines.append(f"{'slots':>5}  " + "  ".join(f"{m:>26}" for m in METRICS))
        rows = [r for r in results if r.fallback == f]
        for s in dict.fromkeys(r.rec_slots for r in rows):
            lo = next((r for r in rows if r.rec_slots == s and r.bound == "lower"), None)
            hi = next((r for r in rows if r.rec_slots == s and r.bound == "upper"), None)
            cells = []
            for m in METRICS:
                a = f"{getattr(lo, m):.2f}" if lo else "-"
                b = f"[{getattr(hi, m):.2f}]" if hi else ""
                cells.append(f"{a + ' ' + b:>26}")
            lines.append(f"{s:>5}  " + "  ".join(cells))
        lines.append("")
    return "\n".join(lines)


def ordinal_pattern(results: Sequence[ScenarioResult]) -> dict:
    """Check revenue up, bidder surplus down and an interior social-surplus peak per cell."""
    out = {}
    for f in dict.fromkeys(r.fallback for r in results):
        for b in dict.fromkeys(r.bound for r in results):
            rows = sorted((r for r in results if r.fallback == f and r.bound == b),
                          key=lambda r: r.rec_slots)
            if not rows:
                continue
            rev = np.array([r.revenue for r in rows])
            bs = np.array([r.bidder_surplus for r in rows])
            ss = np.array([r.social_surplus for r in rows])
            peak = int(np.argmax(ss))
            out[(f, b)] = {
                "revenue_increasing": bool(np.all(np.diff(rev) > 0)),
                "surplus_decreasing": bool(np.all(np.diff(bs) < 0)),
                "social_interior_peak": 0 < peak < len(rows) - 1,
                "social_peak_slots": rows[peak].rec_slots,
            }
    return out


def trace_csv(res: BatchResult, row: int = 0) -> str:
    """Per-period, per-bidder trace of one scenario row."""
    if res.trace is None:
        raise ValueError("simulation was run without trace=True")
    tr = res.trace
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["period", "bidder_id", "value", "bid", "position", "price", "adhered"])
    T, _, n = tr["bid"].shape
    for t in range(T):
        for j in range(n):
            b = tr["bid"][t, row, j]
            if not np.isfinite(b):
                continue
            pr = tr["price"][t, row, j]
            w.writerow([t, tr["ids"][j], f"{tr['value'][t, j]:.4f}", f"{b:.4f}",
                        int(tr["position"][t, row, j]), "" if not np.isfinite(pr) else f"{pr:.4f}",
                        int(tr["adhered"][t, row, j])])
    return buf.getvalue()


def adhering_events(res: BatchResult, row: int = 0):
    """Adhered bids of one row as (bidder_id, period, bid, recs, value) tuples."""
    if res.trace is None:
        raise ValueError("simulation was run without trace=True")
    ids = res.trace["ids"]
    return [(ids[j], t, b, recs, v) for t, r, j, b, v, recs in res.trace["events"] if r == row]


def manifest(results: Sequence[ScenarioResult], market: MarketConfig, extra: dict | None = None) -> str:
    d = {"seed": market.rng_seed, "periods": results[0].periods if results else market.periods,
         "warmup_periods": WARMUP_PERIODS,
         "cells": sorted({(r.fallback, r.bound, r.adherence_prob) for r in results})}
    d["cells"] = [{"fallback": f, "bound": b, "adherence_prob": p} for f, b, p in d["cells"]]
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)
