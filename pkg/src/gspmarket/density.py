"""Kernel densities, conditional means below a cutoff, and quality quadrature.

Every density object here answers three queries, all vectorised over x:

    pdf(x)            f(x)
    cdf(x)            P(X <= x)
    partial_below(x)  E[(x - X)^+] = int_{-inf}^x F(t) dt

``conditional_mean_below`` combines the last two.  The pseudo-value
inversion and the best-response solver only rely on this interface, so
analytic densities can stand in for fitted ones.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

from ._rng import as_generator

MASS_FLOOR = 1e-8
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DegenerateSampleError(ValueError):
    pass


class UndefinedConditionalMean(ValueError):
    pass


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, float)
    return 1.06 * float(np.std(x, ddof=1)) * len(x) ** (-0.2)


def _phi(z):
    return _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _Phi(z):
    return 0.5 * special.erfc(-z / _SQRT2)


class KdeModel:
    """Normal-kernel density estimate.

    Evaluation is the exact kernel sum, done in chunks so memory stays
    bounded for large sample sets.
    """

    kernel = "normal"

    def __init__(self, samples, bandwidth: float, kernel: str = "normal"):
        x = np.asarray(samples, float).ravel()
        if kernel != "normal":
            raise ValueError(f"unsupported kernel {kernel!r}")
        if len(x) < 2:
            raise DegenerateSampleError("a kernel density needs at least 2 samples")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if not bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.samples = np.sort(x)
        self.samples.flags.writeable = False
        self.bandwidth = float(bandwidth)

    def __repr__(self):
        return f"KdeModel(n={len(self.samples)}, bandwidth={self.bandwidth:.6g})"

    def __eq__(self, other):
        return (isinstance(other, KdeModel) and self.bandwidth == other.bandwidth
                and np.array_equal(self.samples, other.samples))

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def support(self) -> tuple[float, float]:
        """Interval outside which the density is below double precision."""
        return self.samples[0] - 8 * self.bandwidth, self.samples[-1] + 8 * self.bandwidth

    def _reduce(self, x, fn, chunk_elems=4_000_000):
        x = np.asarray(x, float)
        flat = x.ravel()
        out = np.empty_like(flat)
        step = max(1, chunk_elems // self.n)
        h = self.bandwidth
        for s in range(0, len(flat), step):
            z = (flat[s:s + step, None] - self.samples[None, :]) / h
            out[s:s + step] = fn(z).mean(axis=1)
        return out.reshape(x.shape)

    def pdf(self, x):
        return self._reduce(x, _phi) / self.bandwidth

    def cdf(self, x):
        return self._reduce(x, _Phi)

    def partial_below(self, x):
        # E[(x - X)^+] for X a normal centred on each sample, averaged
        return self.bandwidth * self._reduce(x, lambda z: z * _Phi(z) + _phi(z))

    def mean(self) -> float:
        return float(self.samples.mean())

    def std(self) -> float:
        return float(np.sqrt(self.samples.var() + self.bandwidth ** 2))

    def sample_from(self, u, z):
        """Draw by picking a sample with uniform ``u`` and adding ``h * z``."""
        idx = np.minimum((np.asarray(u) * self.n).astype(np.int64), self.n - 1)
        return self.samples[idx] + self.bandwidth * np.asarray(z)

    def sample(self, rng, size):
        rng = as_generator(rng)
        return self.sample_from(rng.random(size), rng.standard_normal(size))

    def to_dict(self) -> dict:
        return {"kind": "kde", "kernel": self.kernel, "bandwidth": self.bandwidth,
                "samples": self.samples.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KdeModel":
        return cls(d["samples"], float(d["bandwidth"]), d.get("kernel", "normal"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "KdeModel":
        return cls.from_dict(json.loads(text))


def fit_kde(samples) -> KdeModel:
    """Normal-kernel KDE with bandwidth 1.06 * sd * N^(-1/5) (sd with N-1)."""
    x = np.asarray(samples, float).ravel()
    if len(x) < 2:
        raise DegenerateSampleError(f"need at least 2 samples, got {len(x)}")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("all samples are equal; the bandwidth would be zero")
    return KdeModel(x, silverman_bandwidth(x))


def density(model, x):
    return model.pdf(x)


def conditional_mean_below(model, c, method: str = "exact", grid_points: int = 2048):
    """E[c - X | X < c].

    ``method="exact"`` uses the closed-form partial moment of the normal
    mixture; ``method="trapezoid"`` integrates the density on a fixed grid
    from ``min(sample) - 8h`` to ``c``.  Raises if P(X < c) < 1e-8.
    """
    c_arr = np.asarray(c, float)
    if method == "exact":
        mass = model.cdf(c_arr)
        if np.any(mass < MASS_FLOOR):
            raise UndefinedConditionalMean(
                f"probability mass below {c} is under {MASS_FLOOR:g}")
        return model.partial_below(c_arr) / mass
    if method != "trapezoid":
        raise ValueError(f"unknown method {method!r}")
    lo = model.support[0]
    out = []
    for ci in np.atleast_1d(c_arr):
        t = np.linspace(lo, ci, grid_points) if ci > lo else np.array([ci, ci])
        f = model.pdf(t)
        mass = np.trapezoid(f, t) if hasattr(np, "trapezoid") else np.trapz(f, t)
        if mass < MASS_FLOOR:
            raise UndefinedConditionalMean(
                f"probability mass below {ci} is under {MASS_FLOOR:g}")
        g = (ci - t) * f
        num = np.trapezoid(g, t) if hasattr(np, "trapezoid") else np.trapz(g, t)
        out.append(num / mass)
    out = np.array(out)
    return out.reshape(c_arr.shape)


class TabulatedDensity:
    """Fast stand-in for a density: exact values on a grid, linear in between.

    Below the grid the density, CDF and partial moment are 0; above it the
    CDF is 1 and the partial moment grows linearly.
    """

    def __init__(self, grid, pdf, cdf, partial):
        self.grid = np.asarray(grid, float)
        self._pdf = np.asarray(pdf, float)
        self._cdf = np.asarray(cdf, float)
        self._partial = np.asarray(partial, float)

    @classmethod
    def from_density(cls, model, lo: float | None = None, hi: float | None = None,
                     points: int = 4096) -> "TabulatedDensity":
        if lo is None or hi is None:
            s_lo, s_hi = model.support
            lo = s_lo if lo is None else lo
            hi = s_hi if hi is None else hi
        grid = np.linspace(lo, hi, points)
        return cls(grid, model.pdf(grid), model.cdf(grid), model.partial_below(grid))

    @property
    def support(self):
        return float(self.grid[0]), float(self.grid[-1])

    def evaluate(self, x):
        """(pdf, cdf, partial_below) at ``x`` with one index computation."""
        x = np.asarray(x, float)
        lo, hi = self.grid[0], self.grid[-1]
        m = len(self.grid) - 1
        pos = (x - lo) * (m / (hi - lo))
        j = np.clip(np.floor(pos), 0, m - 1).astype(np.intp)
        t = np.clip(pos - j, 0.0, 1.0)
        below, above = x < lo, x > hi

        def lerp(tab):
            return tab[j] + t * (tab[j + 1] - tab[j])

        pdf = np.where(below | above, 0.0, lerp(self._pdf))
        cdf = np.where(below, 0.0, np.where(above, 1.0, lerp(self._cdf)))
        part = np.where(below, 0.0, np.where(above, self._partial[-1] + (x - hi),
                                             lerp(self._partial)))
        return pdf, cdf, part

    def pdf(self, x):
        return np.interp(x, self.grid, self._pdf, left=0.0, right=0.0)

    def cdf(self, x):
        return np.interp(x, self.grid, self._cdf, left=0.0, right=1.0)

    def partial_below(self, x):
        x = np.asarray(x, float)
        out = np.interp(x, self.grid, self._partial, left=0.0)
        hi = self.grid[-1]
        return np.where(x > hi, self._partial[-1] + (x - hi), out)


class ZeroDensity:
    """Placeholder for a slot that was never occupied."""

    support = (0.0, 0.0)

    def evaluate(self, x):
        z = np.zeros_like(np.asarray(x, float))
        return z, z, z

    def pdf(self, x):
        return np.zeros_like(np.asarray(x, float))

    def cdf(self, x):
        return np.zeros_like(np.asarray(x, float))

    def partial_below(self, x):
        return np.zeros_like(np.asarray(x, float))

    def to_dict(self):
        return {"kind": "zero"}


@dataclass(frozen=True)
class RankScoreDensities:
    """g_k for slots k = 1..K, with g_0 identically zero."""

    per_slot: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_slot", tuple(self.per_slot))

    @property
    def K(self) -> int:
        return len(self.per_slot)

    def slot(self, k: int):
        if k == 0 or k > self.K:
            return ZeroDensity()
        if k < 0:
            raise IndexError("slot index must be >= 0")
        return self.per_slot[k - 1]

    def pdf(self, k: int, x):
        return self.slot(k).pdf(x)

    def cdf(self, k: int, x):
        return self.slot(k).cdf(x)

    def partial_below(self, k: int, x):
        return self.slot(k).partial_below(x)

    def evaluate(self, k: int, x):
        """(g_k, G_k, partial moment) at ``x``."""
        d = self.slot(k)
        if hasattr(d, "evaluate"):
            return d.evaluate(x)
        return d.pdf(x), d.cdf(x), d.partial_below(x)

    def tabulated(self, points: int = 4096) -> "RankScoreDensities":
        return RankScoreDensities(tuple(
            d if isinstance(d, (ZeroDensity, TabulatedDensity))
            else TabulatedDensity.from_density(d, points=points)
            for d in self.per_slot))

    def support(self) -> tuple[float, float]:
        spans = [d.support for d in self.per_slot if not isinstance(d, ZeroDensity)]
        if not spans:
            return 0.0, 0.0
        return min(s[0] for s in spans), max(s[1] for s in spans)

    def to_dict(self) -> dict:
        return {"kind": "rank_score_densities",
                "per_slot": [d.to_dict() for d in self.per_slot]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RankScoreDensities":
        slots = []
        for s in d["per_slot"]:
            slots.append(ZeroDensity() if s["kind"] == "zero" else KdeModel.from_dict(s))
        return cls(tuple(slots))


def fit_rank_densities(samples_per_slot: Sequence[Sequence[float]]) -> RankScoreDensities:
    """Fit g_k on each slot's rank-score sample; slots without spread get zero density."""
    slots = []
    for s in samples_per_slot:
        s = np.asarray(s, float)
        slots.append(fit_kde(s) if len(s) >= 2 and np.ptp(s) > 0 else ZeroDensity())
    return RankScoreDensities(tuple(slots))


# --------------------------------------------------------------------------
# quadrature over the daily quality score


def quality_nodes(mean: float, sd: float, nodes: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes and weights for q ~ N(mean, sd), q > 0 only.

    Nodes at or below zero are dropped and the remaining weights
    renormalised.  ``sd == 0`` gives the single node ``mean``.
    """
    if nodes < 1:
        raise ValueError("need at least one node")
    if sd == 0:
        return np.array([float(mean)]), np.array([1.0])
    x, w = np.polynomial.hermite.hermgauss(nodes)
    q = mean + _SQRT2 * sd * x
    w = w / np.sqrt(np.pi)
    keep = q > 0
    if not np.any(keep):
        raise ValueError("no quadrature node has positive quality")
    return q[keep], w[keep] / w[keep].sum()


def quadrature_over_quality(f: Callable, model, bidder: str, nodes: int = 32) -> float:
    """Integrate ``f(q)`` against bidder's quality distribution."""
    q, w = quality_nodes(model.mean(bidder), model.shared_sd, nodes)
    vals = np.array([f(qi) for qi in q], dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise FloatingPointError(
            f"integrand not finite at quality nodes {q[bad].tolist()} (values {vals[bad].tolist()})")
    return float(np.dot(w, vals))
