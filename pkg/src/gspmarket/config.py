"""Run configuration: one YAML file with a section per pipeline stage.

Validation errors carry the file, line and column of the offending key or
value.  Money amounts (RMB) are written with four decimals.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .market import (Bound, BidderProfile, CtrCurve, Group, MarketConfig, MarketTargets,
                     QualityModel, default_ctr, generate_market, valuation_from_dict)
from .strategies import Fallback

DEFAULT_SLOTS = (0, 1, 3, 5, 10, 20)


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None,
                 column: int | None = None):
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {message}")
        self.source, self.line, self.column, self.detail = source, line, column, message


# --------------------------------------------------------------------------
# YAML with positions


class _Doc:
    """Plain Python view of a YAML document plus the position of every path."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.marks: dict[tuple, tuple[int, int]] = {}
        self._loader = yaml.SafeLoader("")
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.MarkedYAMLError as exc:
            m = exc.problem_mark
            raise ConfigError(f"YAML syntax error: {exc.problem}", source,
                              m.line + 1 if m else None, m.column + 1 if m else None) from None
        self.data = {} if node is None else self._convert(node, ())

    def _mark(self, path, node):
        self.marks[path] = (node.start_mark.line + 1, node.start_mark.column + 1)

    def _convert(self, node, path):
        self._mark(path, node)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = self._scalar(k)
                if not isinstance(key, str):
                    self.fail(path, f"keys must be strings, got {key!r}", k)
                if key in out:
                    self.fail(path + (key,), f"duplicate key {key!r}", k)
                self.marks[path + (key, "<key>")] = (k.start_mark.line + 1, k.start_mark.column + 1)
                out[key] = self._convert(v, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._convert(v, path + (j,)) for j, v in enumerate(node.value)]
        return self._scalar(node)

    def _scalar(self, node):
        # composed nodes already carry resolved tags
        return self._loader.construct_object(node, deep=True)

    def where(self, path):
        path = tuple(path)
        while path and path not in self.marks:
            path = path[:-1]
        return self.marks.get(path, (None, None))

    def fail(self, path, message, node=None):
        if node is not None:
            line, col = node.start_mark.line + 1, node.start_mark.column + 1
        else:
            line, col = self.where(path)
        dotted = ".".join(str(p) for p in path if p != "<key>")
        raise ConfigError(f"{dotted}: {message}" if dotted else message, self.source, line, col)

    def fail_key(self, path, message):
        line, col = self.marks.get(tuple(path) + ("<key>",), self.where(path))
        dotted = ".".join(str(p) for p in path)
        raise ConfigError(f"{dotted}: {message}", self.source, line, col)


# --------------------------------------------------------------------------
# settings


@dataclass(frozen=True)
class EstimationSettings:
    nodes: int = 32
    auctions_per_period: int | None = None
    tabulate: bool = True


@dataclass(frozen=True)
class CounterfactualSettings:
    slots: tuple[int, ...] = DEFAULT_SLOTS
    fallbacks: tuple[str, ...] = ("polynomial", "random_shading")
    bounds: tuple[str, ...] = ("lower", "upper")
    periods: int | None = None
    adherence_prob: float | None = None
    target_rate: float = 0.135
    grid_step: float = 0.005


@dataclass(frozen=True)
class CalibrationSettings:
    target_rate: float = 0.135
    grid_step: float = 0.005
    fallback: str = "polynomial"
    bound: str = "lower"
    periods: int | None = None


@dataclass(frozen=True)
class DidSettings:
    with_groups: bool = True
    outcome: str = "bid"
    rec_slots: int = 3
    pre_periods: int = 30
    post_periods: int = 30
    adherence_prob: float | None = 0.5


@dataclass(frozen=True)
class SimulateSettings:
    periods: int = 1
    rec_slots: int | None = None
    fallback: str = "polynomial"
    bound: str = "lower"
    adherence_prob: float | None = 0.5
    fixture_days: int = 40


@dataclass(frozen=True)
class RunConfig:
    market: MarketConfig
    seed: int = 0
    estimation: EstimationSettings = field(default_factory=EstimationSettings)
    counterfactual: CounterfactualSettings = field(default_factory=CounterfactualSettings)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    did: DidSettings = field(default_factory=DidSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    source: str = "<config>"


# --------------------------------------------------------------------------
# field checks


def _check(doc: _Doc, path, value, kind, *, low=None, high=None, low_open=False, choices=None,
           optional=False):
    if value is None and optional:
        return None
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            doc.fail(path, f"expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            doc.fail(path, f"expected a number, got {value!r}")
        value = float(value)
    elif kind is bool:
        if not isinstance(value, bool):
            doc.fail(path, f"expected true or false, got {value!r}")
    elif kind is str:
        if not isinstance(value, str):
            doc.fail(path, f"expected a string, got {value!r}")
    if choices is not None and value not in choices:
        doc.fail(path, f"must be one of {', '.join(map(str, choices))}; got {value!r}")
    if low is not None and (value <= low if low_open else value < low):
        doc.fail(path, f"must be {'>' if low_open else '>='} {low}; got {value!r}")
    if high is not None and value > high:
        doc.fail(path, f"must be <= {high}; got {value!r}")
    return value


def _section(doc: _Doc, data, path, allowed):
    if data is None:
        return {}
    if not isinstance(data, dict):
        doc.fail(path, "expected a mapping")
    for k in data:
        if k not in allowed:
            doc.fail_key(tuple(path) + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return data


def _settings(doc, data, path, cls, schema):
    """Build a settings dataclass; ``schema`` maps field -> check kwargs."""
    d = _section(doc, data, path, set(schema))
    kwargs = {}
    for name, chk in schema.items():
        if name in d:
            chk = dict(chk)
            if chk.pop("list", False):
                items = d[name]
                if not isinstance(items, list) or not items:
                    doc.fail(path + (name,), "expected a non-empty list")
                kwargs[name] = tuple(_check(doc, path + (name, j), x, **chk)
                                     for j, x in enumerate(items))
            else:
                kind = chk.pop("kind")
                kwargs[name] = _check(doc, path + (name,), d[name], kind, **chk)
    return cls(**kwargs)


FALLBACKS = tuple(f.value for f in Fallback)
BOUNDS = tuple(b.value for b in Bound)

_ESTIMATION = {"nodes": {"kind": int, "low": 1},
               "auctions_per_period": {"kind": int, "low": 1, "optional": True},
               "tabulate": {"kind": bool}}
_COUNTERFACTUAL = {"slots": {"list": True, "kind": int, "low": 0},
                   "fallbacks": {"list": True, "kind": str, "choices": FALLBACKS},
                   "bounds": {"list": True, "kind": str, "choices": BOUNDS},
                   "periods": {"kind": int, "low": 1, "optional": True},
                   "adherence_prob": {"kind": float, "low": 0, "high": 1, "optional": True},
                   "target_rate": {"kind": float, "low": 0, "high": 1},
                   "grid_step": {"kind": float, "low": 0, "low_open": True, "high": 1}}
_CALIBRATION = {"target_rate": {"kind": float, "low": 0, "high": 1},
                "grid_step": {"kind": float, "low": 0, "low_open": True, "high": 1},
                "fallback": {"kind": str, "choices": FALLBACKS},
                "bound": {"kind": str, "choices": BOUNDS},
                "periods": {"kind": int, "low": 1, "optional": True}}
_DID = {"with_groups": {"kind": bool}, "outcome": {"kind": str, "choices": ("bid", "cpc")},
        "rec_slots": {"kind": int, "low": 0},
        "pre_periods": {"kind": int, "low": 1}, "post_periods": {"kind": int, "low": 1},
        "adherence_prob": {"kind": float, "low": 0, "high": 1, "optional": True}}
_SIMULATE = {"periods": {"kind": int, "low": 1},
             "rec_slots": {"kind": int, "low": 0, "optional": True},
             "fallback": {"kind": str, "choices": FALLBACKS},
             "bound": {"kind": str, "choices": BOUNDS},
             "adherence_prob": {"kind": float, "low": 0, "high": 1, "optional": True},
             "fixture_days": {"kind": int, "low": 1}}

_MARKET_SCALARS = {"reserve_price": {"kind": float, "low": 0},
                   "rec_slots": {"kind": int, "low": 0},
                   "adherence_prob": {"kind": float, "low": 0, "high": 1},
                   "periods": {"kind": int, "low": 1},
                   "auctions_per_period": {"kind": int, "low": 1},
                   "participation": {"kind": float, "low": 0, "low_open": True, "high": 1},
                   "quality_draws": {"kind": int, "low": 1}}

_TARGET_FIELDS = {f.name: f for f in dataclasses.fields(MarketTargets)}


def _targets(doc, data, path) -> MarketTargets:
    from .market import CALIBRATED_TARGETS
    d = _section(doc, data, path, set(_TARGET_FIELDS) | {"preset"})
    preset = d.get("preset", "default")
    presets = {"default": MarketTargets(), "calibrated": CALIBRATED_TARGETS}
    if preset not in presets:
        doc.fail(path + ("preset",), f"unknown preset {preset!r} (choose default or calibrated)")
    base = presets[preset]
    changes = {}
    for k, v in d.items():
        if k == "preset":
            continue
        default = getattr(MarketTargets(), k)
        if k == "value_shape":
            if (not isinstance(v, list) or len(v) != 3
                    or not all(isinstance(r, list) and r and all(
                        isinstance(x, (int, float)) and not isinstance(x, bool) for x in r) for r in v)):
                doc.fail(path + (k,), "expected three lists: weights, log means, log sds")
            changes[k] = tuple(tuple(float(x) for x in r) for r in v)
        elif isinstance(default, bool):
            changes[k] = _check(doc, path + (k,), v, bool)
        elif isinstance(default, int):
            changes[k] = _check(doc, path + (k,), v, int, low=0)
        else:
            changes[k] = _check(doc, path + (k,), v, float, optional=default is None)
    return dataclasses.replace(base, **changes)


def _market(doc, data, path, seed) -> MarketConfig:
    allowed = set(_MARKET_SCALARS) | {"generate", "bidders", "valuations", "ctr", "quality_sd"}
    d = _section(doc, data, path, allowed)
    if "generate" in d and "bidders" in d:
        doc.fail_key(path + ("bidders",), "give either 'generate' or 'bidders', not both")
    scalars = {k: _check(doc, path + (k,), d[k], **_MARKET_SCALARS[k]) for k in _MARKET_SCALARS if k in d}
    try:
        if "bidders" not in d:
            targets = _targets(doc, d.get("generate"), path + ("generate",))
            market = generate_market(targets, seed=seed)
            ctr = _ctr(doc, d["ctr"], path + ("ctr",)) if "ctr" in d else None
            changes = dict(scalars)
            if ctr is not None:
                changes["ctr"] = ctr
            if "quality_sd" in d:
                sd = _check(doc, path + ("quality_sd",), d["quality_sd"], float, low=0)
                changes["quality"] = QualityModel(market.quality.per_bidder_mean, sd)
            return market.with_(**changes) if changes else market
        return _explicit_market(doc, d, path, scalars, seed)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        doc.fail(path, str(exc).strip("'\""))


def _ctr(doc, data, path) -> CtrCurve:
    if isinstance(data, list):
        vals = [_check(doc, path + (j,), x, float, low=0, low_open=True) for j, x in enumerate(data)]
        try:
            return CtrCurve(tuple(vals))
        except ValueError as exc:
            doc.fail(path, str(exc))
    d = _section(doc, data, path, {"K", "decay", "top_clicks", "total_clicks"})
    K = _check(doc, path + ("K",), d.get("K", 20), int, low=1)
    decay = _check(doc, path + ("decay",), d.get("decay", 0.75), float, low=0, low_open=True, high=0.999999)
    top = _check(doc, path + ("top_clicks",), d.get("top_clicks"), float, low=0, low_open=True, optional=True)
    total = _check(doc, path + ("total_clicks",), d.get("total_clicks", 75.88), float, low=0, low_open=True)
    return default_ctr(K, top, decay, total)


def _explicit_market(doc, d, path, scalars, seed) -> MarketConfig:
    vals = _section(doc, d.get("valuations"), path + ("valuations",), set(d.get("valuations") or {}))
    if not vals:
        doc.fail(path, "an explicit market needs a 'valuations' mapping")
    sources = {}
    for name, entry in vals.items():
        p = path + ("valuations", name)
        if not isinstance(entry, dict):
            doc.fail(p, "expected a mapping with a 'kind' key")
        try:
            sources[name] = valuation_from_dict(entry)
        except (ValueError, KeyError, TypeError) as exc:
            doc.fail(p, f"invalid valuation: {exc}")
    rows = d["bidders"]
    if not isinstance(rows, list) or not rows:
        doc.fail(path + ("bidders",), "expected a non-empty list of bidders")
    bidders = []
    for j, row in enumerate(rows):
        p = path + ("bidders", j)
        r = _section(doc, row, p, {"id", "group", "quality_mean", "valuation"})
        for k in ("id", "group", "quality_mean", "valuation"):
            if k not in r:
                doc.fail(p, f"missing key {k!r}")
        bid_id = str(r["id"])
        group = _check(doc, p + ("group",), r["group"], str, choices=tuple(g.value for g in Group))
        qm = _check(doc, p + ("quality_mean",), r["quality_mean"], float, low=0, low_open=True)
        src = _check(doc, p + ("valuation",), r["valuation"], str, choices=tuple(sources))
        bidders.append(BidderProfile(bid_id, Group(group), qm, src))
    ids = [b.id for b in bidders]
    for j, i in enumerate(ids):
        if ids.index(i) != j:
            doc.fail(path + ("bidders", j, "id"), f"duplicate bidder id {i!r}")
    sd = _check(doc, path + ("quality_sd",), d.get("quality_sd", 0.02), float, low=0)
    ctr = _ctr(doc, d["ctr"], path + ("ctr",)) if "ctr" in d else default_ctr()
    quality = QualityModel({b.id: b.quality_mean for b in bidders}, sd)
    if "rec_slots" in scalars and scalars["rec_slots"] > ctr.K:
        doc.fail(path + ("rec_slots",), f"must be <= K = {ctr.K}")
    return MarketConfig(tuple(bidders), quality, ctr, sources, rng_seed=seed, **scalars)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    doc = _Doc(text, source)
    top = _section(doc, doc.data, (), {"seed", "market", "estimation", "counterfactual",
                                       "calibration", "did", "simulate"})
    seed = _check(doc, ("seed",), top.get("seed", 0), int, low=0)
    market = _market(doc, top.get("market"), ("market",), seed)
    cf = _settings(doc, top.get("counterfactual"), ("counterfactual",), CounterfactualSettings,
                   _COUNTERFACTUAL)
    for j, L in enumerate(cf.slots):
        if L > market.K:
            doc.fail(("counterfactual", "slots", j), f"slot count {L} exceeds K = {market.K}")
    sim = _settings(doc, top.get("simulate"), ("simulate",), SimulateSettings, _SIMULATE)
    if sim.rec_slots is not None and sim.rec_slots > market.K:
        doc.fail(("simulate", "rec_slots"), f"must be <= K = {market.K}")
    return RunConfig(
        market=market, seed=seed,
        estimation=_settings(doc, top.get("estimation"), ("estimation",), EstimationSettings, _ESTIMATION),
        counterfactual=cf,
        calibration=_settings(doc, top.get("calibration"), ("calibration",), CalibrationSettings,
                              _CALIBRATION),
        did=_settings(doc, top.get("did"), ("did",), DidSettings, _DID),
        simulate=sim, source=source)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    return parse_config(text, str(p))


# --------------------------------------------------------------------------
# writing


class Rmb(float):
    """Float written with four decimals."""


class _Dumper(yaml.SafeDumper):
    pass


_Dumper.add_representer(Rmb, lambda d, x: d.represent_scalar("tag:yaml.org,2002:float", f"{x:.4f}"))


def _valuation_yaml(entry: Mapping) -> dict:
    entry = dict(entry)
    if entry.get("kind") == "point":
        entry["value"] = Rmb(entry["value"])
    elif entry.get("kind") == "kde":
        entry["samples"] = [Rmb(x) for x in entry["samples"]]
    elif entry.get("kind") == "bounded":
        entry["lower"] = _valuation_yaml(entry["lower"])
        entry["upper"] = _valuation_yaml(entry["upper"])
    return entry


def market_to_dict(m: MarketConfig) -> dict:
    """Explicit-form market section (every bidder listed)."""
    return {
        "reserve_price": Rmb(m.reserve_price),
        "rec_slots": m.rec_slots,
        "adherence_prob": m.adherence_prob,
        "periods": m.periods,
        "auctions_per_period": m.auctions_per_period,
        "participation": m.participation,
        "quality_draws": m.quality_draws,
        "quality_sd": m.quality.shared_sd,
        "ctr": list(m.ctr.alpha),
        "valuations": {k: _valuation_yaml(v.to_dict()) for k, v in sorted(m.valuations.items())},
        "bidders": [{"id": b.id, "group": b.group.value, "quality_mean": b.quality_mean,
                     "valuation": b.valuation_source} for b in m.bidders],
    }


def dump_config(cfg: RunConfig) -> str:
    """YAML text that parses back to an equivalent configuration."""
    def plain(obj):
        d = dataclasses.asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    doc = {"seed": cfg.seed, "market": market_to_dict(cfg.market),
           "estimation": plain(cfg.estimation), "counterfactual": plain(cfg.counterfactual),
           "calibration": plain(cfg.calibration), "did": plain(cfg.did),
           "simulate": plain(cfg.simulate)}
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=False, default_flow_style=None, width=100)


DEFAULT_CONFIG = """\
# gspmarket run configuration.  Every key is optional; the value shown is the default
# except for seed, which is 0 when omitted.
seed: 6                      # master seed; 6 draws the market used for the disclosure sweep

market:
  # Synthetic market from moment targets.  Replace 'generate' by an explicit
  # 'valuations' + 'bidders' list (see configs/minimal.yaml) to fix every bidder.
  generate:
    preset: calibrated       # 'default' (summary-table targets) or 'calibrated' (counterfactual market)
    # constructing: 99       # bid-constructing advertisers
    # adhering: 88           # bid-adhering advertisers
    # qs_mean: 0.12          # mean quality score
    # qs_sd: 0.05            # spread of per-bidder mean quality
    # quality_noise: 0.02    # daily quality sd (epsilon)
    # bid_mean: null         # if set, rescale values until equilibrium bids average this (RMB)
  # reserve_price: 2.5000    # RMB per click
  # rec_slots: 3             # slots with a published recommendation
  # adherence_prob: 0.0      # probability an adhering bidder follows a recommendation
  # periods: 10000           # simulated periods (days)
  # auctions_per_period: 100 # simulated auctions per day when re-estimating rank-score densities
  # participation: 1.0       # chance a bidder enters a given day's auction
  # quality_draws: 5         # draws the platform averages into its quality estimate
  # ctr: {K: 20, decay: 0.75, total_clicks: 75.88}   # or an explicit list of clicks per slot

estimation:
  nodes: 32                  # Gauss-Hermite nodes over the daily quality score
  auctions_per_period: null  # null: use market.auctions_per_period
  tabulate: true             # tabulate the rank-score densities (fast, ~1e-6 accurate)

counterfactual:
  slots: [0, 1, 3, 5, 10, 20]
  fallbacks: [polynomial, random_shading]
  bounds: [lower, upper]
  periods: null              # null: market.periods
  adherence_prob: null       # null: calibrate each cell to target_rate at the market's rec_slots
  target_rate: 0.135
  grid_step: 0.005

calibration:
  target_rate: 0.135
  grid_step: 0.005
  fallback: polynomial
  bound: lower
  periods: null

did:
  with_groups: true
  outcome: bid               # bid or cpc
  rec_slots: 3               # disclosure level of the treated city
  pre_periods: 30
  post_periods: 30
  adherence_prob: 0.5        # null: market.adherence_prob

simulate:
  periods: 1
  rec_slots: null            # null: market.rec_slots
  fallback: polynomial
  bound: lower
  adherence_prob: 0.5        # null: market.adherence_prob
  fixture_days: 40           # days of equilibrium bids written by --fixture (25 bidders a day)
"""


__all__ = [
    "CalibrationSettings", "ConfigError", "CounterfactualSettings", "DEFAULT_CONFIG", "DidSettings",
    "EstimationSettings", "RunConfig", "SimulateSettings", "dump_config", "load_config",
    "market_to_dict", "parse_config",
]
