"""Two-way fixed-effects difference-in-differences on ad-by-day panels.

The estimator absorbs ad and day effects by alternating demeaning, runs OLS
on the demeaned regressors and reports standard errors clustered by ad.
Panels come from a CSV file, from two simulated "cities" (disclosure on and
off) or from a planted data-generating process used to check coverage.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from ._rng import as_generator

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000


class PositionGroup(str, enum.Enum):
    TOP5 = "Top5"
    MID6TO25 = "Mid6to25"
    BELOW25 = "Below25"


GROUP_ORDER = (PositionGroup.TOP5, PositionGroup.MID6TO25, PositionGroup.BELOW25)


def group_for_position(avg_position: float) -> PositionGroup:
    """Top 5 slots, slots 6 to 25, everything lower."""
    if avg_position <= 5:
        return PositionGroup.TOP5
    if avg_position <= 25:
        return PositionGroup.MID6TO25
    return PositionGroup.BELOW25


class RankDeficientDesign(ValueError):
    """The demeaned regressors are collinear (e.g. every ad treated)."""


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class PanelObservation:
    ad_id: str
    day: int
    treated: bool
    post: bool
    group: PositionGroup
    outcome: float


@dataclass
class Panel:
    """Column store for a panel; rows are ad-days."""

    ad_id: np.ndarray
    day: np.ndarray
    treated: np.ndarray
    post: np.ndarray
    group: np.ndarray       # index into GROUP_ORDER
    outcome: np.ndarray

    def __post_init__(self):
        self.ad_id = np.asarray(self.ad_id).astype(str)
        self.day = np.asarray(self.day, np.int64)
        self.treated = np.asarray(self.treated, bool)
        self.post = np.asarray(self.post, bool)
        self.group = np.asarray(self.group, np.int64)
        self.outcome = np.asarray(self.outcome, float)
        n = len(self.ad_id)
        for name in ("day", "treated", "post", "group", "outcome"):
            if len(getattr(self, name)) != n:
                raise PanelError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")
        if n and (self.group.min() < 0 or self.group.max() >= len(GROUP_ORDER)):
            raise PanelError("group index out of range")

    def __len__(self):
        return len(self.ad_id)

    @classmethod
    def from_observations(cls, obs: Iterable[PanelObservation]) -> "Panel":
        obs = list(obs)
        gi = {g: j for j, g in enumerate(GROUP_ORDER)}
        return cls([o.ad_id for o in obs], [o.day for o in obs], [o.treated for o in obs],
                   [o.post for o in obs], [gi[PositionGroup(o.group)] for o in obs],
                   [o.outcome for o in obs])

    def observations(self) -> list[PanelObservation]:
        return [PanelObservation(str(a), int(d), bool(t), bool(p), GROUP_ORDER[g], float(y))
                for a, d, t, p, g, y in zip(self.ad_id, self.day, self.treated, self.post,
                                            self.group, self.outcome)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["ad_id", "day", "treated", "post", "group", "outcome"])
        for a, d, t, p, g, y in zip(self.ad_id, self.day, self.treated, self.post,
                                    self.group, self.outcome):
            w.writerow([a, int(d), int(t), int(p), GROUP_ORDER[g].value, repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Panel":
        """Parse panel CSV; errors name the offending row and column."""
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        cols = ["ad_id", "day", "treated", "post", "group", "outcome"]
        if header is None:
            raise PanelError("row 1: missing header")
        missing = [c for c in cols if c not in header]
        if missing:
            raise PanelError(f"row 1: header lacks column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in cols}
        gi = {g.value: j for j, g in enumerate(GROUP_ORDER)}
        out = {c: [] for c in cols}
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise PanelError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            for c in cols:
                raw = row[pos[c]]
                try:
                    if c == "ad_id":
                        if raw == "":
                            raise ValueError("empty")
                        val = raw
                    elif c == "day":
                        val = int(raw)
                    elif c in ("treated", "post"):
                        if raw not in ("0", "1"):
                            raise ValueError("not 0/1")
                        val = raw == "1"
                    elif c == "group":
                        val = gi[raw]
                    else:
                        val = float(raw)
                        if not np.isfinite(val):
                            raise ValueError("not finite")
                except (ValueError, KeyError) as exc:
                    raise PanelError(f"row {rownum}, column {c!r}: invalid value {raw!r} ({exc})") from None
                out[c].append(val)
        return cls(*(out[c] for c in cols))


# --------------------------------------------------------------------------
# estimator


@dataclass
class DidEstimate:
    alpha0: float
    group_mains: dict[str, float]
    group_interactions: dict[str, float]
    clustered_se: dict[str, float]
    n_obs: int
    n_clusters: int
    with_groups: bool = False
    robust_se: dict[str, float] = field(default_factory=dict)
    r2_within: float = float("nan")
    iterations: int = 0

    @property
    def coefficients(self) -> dict[str, float]:
        out = {"T*Post": self.alpha0}
        for g, v in self.group_mains.items():
            out[f"{g}*Post"] = v
        for g, v in self.group_interactions.items():
            out[f"T*Post*{g}"] = v
        return out

    def t_stat(self, name: str) -> float:
        return self.coefficients[name] / self.clustered_se[name]

    def p_value(self, name: str) -> float:
        return float(2 * stats.t.sf(abs(self.t_stat(name)), self.n_clusters - 1))

    def to_dict(self) -> dict:
        return {"coefficients": self.coefficients, "clustered_se": self.clustered_se,
                "robust_se": self.robust_se, "n_obs": self.n_obs,
                "n_clusters": self.n_clusters, "with_groups": self.with_groups,
                "r2_within": self.r2_within,
                "p_values": {k: self.p_value(k) for k in self.coefficients}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _stars(p: float) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


def format_report(estimates: Mapping[str, DidEstimate]) -> str:
    """Side-by-side text table, one column per named estimate."""
    names = list(estimates)
    rows = []
    for est in estimates.values():
        for k in est.coefficients:
            if k not in rows:
                rows.append(k)
    width = max([22] + [len(n) + 2 for n in names])
    lines = ["".ljust(16) + "".join(n.rjust(width) for n in names)]
    lines.append("-" * len(lines[0]))
    for r in rows:
        cells = []
        for est in estimates.values():
            if r in est.coefficients:
                c = est.coefficients[r]
                cells.append(f"{c:.3f}{_stars(est.p_value(r))} ({est.clustered_se[r]:.3f})".rjust(width))
            else:
                cells.append("".rjust(width))
        lines.append(r.ljust(16) + "".join(cells))
    lines.append("-" * len(lines[0]))
    lines.append("N".ljust(16) + "".join(str(e.n_obs).rjust(width) for e in estimates.values()))
    lines.append("clusters".ljust(16) + "".join(str(e.n_clusters).rjust(width) for e in estimates.values()))
    lines.append("Standard errors in parentheses; ad and day fixed effects; clustered by ad.")
    lines.append("* p<0.10, ** p<0.05, *** p<0.01")
    return "\n".join(lines) + "\n"


def demean_two_way(M: np.ndarray, a: np.ndarray, d: np.ndarray, tol: float = DEMEAN_TOL,
                   max_iter: int = DEMEAN_MAX_ITER) -> tuple[np.ndarray, int]:
    """Sweep out ad and day means from the columns of ``M`` by alternating projections.

    ``a`` and ``d`` are integer codes.  Iterates until the largest update
    falls below ``tol`` (one pass suffices for balanced panels).
    """
    M = np.array(M, float, copy=True)
    na, nd = a.max() + 1, d.max() + 1
    ca = np.bincount(a, minlength=na).astype(float)
    cd = np.bincount(d, minlength=nd).astype(float)
    scale = max(1.0, float(np.abs(M).max())) if M.size else 1.0
    for it in range(1, max_iter + 1):
        step = 0.0
        for codes, counts, m in ((a, ca, na), (d, cd, nd)):
            means = np.stack([np.bincount(codes, weights=M[:, j], minlength=m)
                              for j in range(M.shape[1])], axis=1) / counts[:, None]
            M -= means[codes]
            step = max(step, float(np.abs(means).max()))
        if step <= tol * scale:
            return M, it
    raise FloatingPointError(f"two-way demeaning did not converge in {max_iter} iterations")


def _design(p: Panel, with_groups: bool):
    tp = (p.treated & p.post).astype(float)
    cols, names = [tp], ["T*Post"]
    if with_groups:
        # group dummies are constant within an ad and so absorbed by the ad
        # effect; their post-period shifts are identified and reported instead
        for j, g in enumerate(GROUP_ORDER[:-1]):
            gj = (p.group == j).astype(float)
            cols.append(gj * p.post)
            names.append(f"{g.value}*Post")
        for j, g in enumerate(GROUP_ORDER[:-1]):
            gj = (p.group == j).astype(float)
            cols.append(gj * tp)
            names.append(f"T*Post*{g.value}")
    return np.column_stack(cols), names


def did_fit(panel, with_groups: bool = False) -> DidEstimate:
    """Fit Y = a0 T*Post [+ group terms] + ad FE + day FE by within transformation.

    ``panel`` is a :class:`Panel` or a sequence of :class:`PanelObservation`.
    Standard errors are cluster-robust by ad with the usual
    G/(G-1) * (N-1)/(N-k) small-sample factor.
    """
    p = panel if isinstance(panel, Panel) else Panel.from_observations(panel)
    if len(p) == 0:
        raise PanelError("panel is empty")
    ads, a = np.unique(p.ad_id, return_inverse=True)
    _, d = np.unique(p.day, return_inverse=True)
    G = len(ads)
    if G < 2:
        raise PanelError("need at least 2 clusters (ads)")
    for flag, label in ((True, "treated"), (False, "control")):
        unit = p.treated == flag
        if not (unit & p.post).any() or not (unit & ~p.post).any():
            raise PanelError(f"{label} units must be observed both before and after")
    if np.any(np.bincount(a, weights=p.treated.astype(float)) % np.bincount(a)):
        raise PanelError("treatment status varies within an ad")
    X, names = _design(p, with_groups)
    Z, iters = demean_two_way(np.column_stack([p.outcome, X]), a, d)
    y, Xd = Z[:, 0], Z[:, 1:]
    k = Xd.shape[1]
    col_norm = np.linalg.norm(Xd, axis=0)
    if np.any(col_norm <= 1e-9 * np.sqrt(len(p))) or np.linalg.matrix_rank(Xd) < k:
        raise RankDeficientDesign(
            "regressors are collinear with the fixed effects; "
            "need both treated and control ads before and after the switch")
    XtX = Xd.T @ Xd
    bread = np.linalg.inv(XtX)
    beta = bread @ (Xd.T @ y)
    u = y - Xd @ beta
    N = len(p)
    scores = np.zeros((G, k))
    np.add.at(scores, a, Xd * u[:, None])
    meat = scores.T @ scores
    c = G / (G - 1) * (N - 1) / (N - k)
    V = c * bread @ meat @ bread
    hc = (N / (N - k)) * bread @ ((Xd * u[:, None] ** 2).T @ Xd) @ bread
    se = np.sqrt(np.diag(V))
    rse = np.sqrt(np.diag(hc))
    tss = float(y @ y)
    r2 = 1 - float(u @ u) / tss if tss > 0 else float("nan")
    coef = dict(zip(names, beta.tolist()))
    mains = {g.value: coef[f"{g.value}*Post"] for g in GROUP_ORDER[:-1]} if with_groups else {}
    inter = {g.value: coef[f"T*Post*{g.value}"] for g in GROUP_ORDER[:-1]} if with_groups else {}
    return DidEstimate(coef["T*Post"], mains, inter, dict(zip(names, se.tolist())), N, G,
                       with_groups, dict(zip(names, rse.tolist())), r2, iters)


# --------------------------------------------------------------------------
# panels


def planted_panel(n_ads: int = 400, n_days: int = 30, switch_day: int = 15,
                  effect: float = 2.193, group_effects: Sequence[float] | None = None,
                  noise_sd: float = 1.0, rho: float = 0.0, treated_share: float = 0.5,
                  group_shares: Sequence[float] = (0.2, 0.4, 0.4), rng=None) -> Panel:
    """Balanced panel with a known treatment effect.

    Without ``group_effects`` every treated post cell is shifted by
    ``effect``.  With ``group_effects`` (one per position group) the shift
    depends on the ad's group.  ``rho`` adds AR(1) serial correlation to the
    noise within an ad.
    """
    if not 0 < switch_day < n_days:
        raise ValueError("switch_day must fall strictly inside the window")
    rng = as_generator(rng)
    ids = np.array([f"ad{j:05d}" for j in range(n_ads)])
    treated = np.zeros(n_ads, bool)
    treated[rng.permutation(n_ads)[:int(round(treated_share * n_ads))]] = True
    group = rng.choice(len(GROUP_ORDER), n_ads, p=np.asarray(group_shares) / np.sum(group_shares))
    ad_fe = rng.normal(10.0, 3.0, n_ads)
    day_fe = rng.normal(0.0, 1.0, n_days)
    e = rng.normal(0.0, noise_sd, (n_ads, n_days))
    if rho:
        for t in range(1, n_days):
            e[:, t] = rho * e[:, t - 1] + np.sqrt(1 - rho ** 2) * e[:, t]
    post = np.arange(n_days) >= switch_day
    shift = np.full(n_ads, effect) if group_effects is None else np.asarray(group_effects, float)[group]
    y = ad_fe[:, None] + day_fe[None, :] + e + (treated[:, None] & post[None, :]) * shift[:, None]
    A, D = np.meshgrid(np.arange(n_ads), np.arange(n_days), indexing="ij")
    return Panel(ids[A.ravel()], D.ravel(), treated[A.ravel()], post[D.ravel()],
                 group[A.ravel()], y.ravel())


def _city_rows(trace, row: int, post_start: int, treated: bool, prefix: str, outcome: str):
    bid = trace["bid"][:, row, :]
    pos = trace["position"][:, row, :].astype(float)
    price = trace["price"][:, row, :]
    ids = trace["ids"]
    T, n = bid.shape
    active = np.isfinite(bid)
    pre = np.arange(T) < post_start
    rows = []
    for j in range(n):
        act_pre = active[pre, j]
        if not act_pre.any():
            continue
        g = group_for_position(float(pos[pre, j][act_pre].mean()))
        vals = bid[:, j] if outcome == "bid" else price[:, j]
        for t in np.flatnonzero(active[:, j] & np.isfinite(vals)):
            rows.append(PanelObservation(f"{prefix}{ids[j]}", int(t), treated, bool(t >= post_start),
                                         g, float(vals[t])))
    return rows


def make_synthetic_panel(control_trace: Mapping, treated_trace: Mapping, post_start: int,
                         control_row: int = 0, treated_row: int = 0,
                         outcome: str = "bid") -> list[PanelObservation]:
    """Ad-by-day observations from two simulated cities.

    Each trace is the ``trace`` dict of a simulation run; ``post_start``
    is the first period (after warm-up) with disclosure in the treated
    city.  Ads are tagged by their average pre-period position.  Outcome
    is the bid or, with ``outcome="cpc"``, the price per click (ad-days
    without a slot are skipped).
    """
    if outcome not in ("bid", "cpc"):
        raise ValueError("outcome must be 'bid' or 'cpc'")
    if list(control_trace["ids"]) != list(treated_trace["ids"]):
        raise PanelError("the two cities do not have the same bidder set")
    if not 0 < post_start < control_trace["bid"].shape[0]:
        raise ValueError("post_start must fall strictly inside the simulated window")
    return (_city_rows(control_trace, control_row, post_start, False, "ctl:", outcome)
            + _city_rows(treated_trace, treated_row, post_start, True, "trt:", outcome))


def disclosure_panel(market, rec_slots: int = 3, pre_periods: int = 30, post_periods: int = 30,
                     seed: int | None = None, outcome: str = "bid",
                     adherence: float | None = None) -> list[PanelObservation]:
    """Simulate a control city (no disclosure) and a treated city that starts
    publishing ``rec_slots`` recommendations after ``pre_periods``."""
    from .counterfactual import simulate_batch
    p = market.adherence_prob if adherence is None else adherence
    res = simulate_batch(market, [0, rec_slots], [p, p], periods=pre_periods + post_periods,
                         seed=seed, disclosure_start=pre_periods, trace=True,
                         persistent_values=True)
    return make_synthetic_panel(res.trace, res.trace, pre_periods, 0, 1, outcome)


__all__ = [
    "DidEstimate", "GROUP_ORDER", "Panel", "PanelError", "PanelObservation", "PositionGroup",
    "RankDeficientDesign", "demean_two_way", "did_fit", "disclosure_panel", "format_report",
    "group_for_position", "make_synthetic_panel", "planted_panel",
]
