"""Command-line entry point: ``gspmarket <command> [options]``.

Commands: simulate, estimate, counterfactual, calibrate, did, selftest.
Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.  ``GSPMARKET_OUTPUT_DIR`` and ``GSPMARKET_THREADS``
set the default output directory and worker count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULT_CONFIG, ConfigError, RunConfig, load_config, parse_config
from .files import (CsvSchemaError, bid_panel_csv, events_csv, manifest_json, parse_bid_panel,
                    parse_events, read_text, write_text)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gspmarket")


class UsageError(Exception):
    pass


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("GSPMARKET_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"GSPMARKET_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("GSPMARKET_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _out_dir(arg: str | None, command: str) -> Path:
    base = arg or os.environ.get("GSPMARKET_OUTPUT_DIR") or os.path.join("gspmarket-out", command)
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config(DEFAULT_CONFIG, "<default>")
    if getattr(args, "seed", None) is not None and args.seed != cfg.seed:
        text = read_text(args.config) if args.config else DEFAULT_CONFIG
        cfg = _with_seed(cfg, text, args.seed)
    return cfg


def _with_seed(cfg: RunConfig, text: str, seed: int) -> RunConfig:
    # re-parse so a generated market is drawn with the new seed
    import yaml
    data = yaml.safe_load(text) or {}
    data["seed"] = seed
    return parse_config(yaml.safe_dump(data, sort_keys=False), cfg.source)


def _finish(out: Path, command: str, args, cfg_seed: int, inputs, outputs, extra=None,
            started: float | None = None) -> None:
    man = write_text(out / "manifest.json",
                     manifest_json(command, getattr(args, "config", None), cfg_seed,
                                   [Path(p) for p in inputs], outputs, extra))
    if started is not None:
        log.info("%s finished in %.2f s; manifest %s", command, time.time() - started, man)


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _rate(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 <= x < 1:
        raise argparse.ArgumentTypeError(f"rate must lie in [0, 1), got {x}")
    return x


def _slot_list(text: str) -> list[int]:
    try:
        out = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or any(s < 0 for s in out):
        raise argparse.ArgumentTypeError("slot counts must be nonnegative integers")
    return out


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .counterfactual import adhering_events, simulate_batch, trace_csv
    started = time.time()
    cfg = _config(args)
    m = cfg.market
    s = cfg.simulate
    periods = args.periods or s.periods
    L = s.rec_slots if s.rec_slots is not None else m.rec_slots
    out = _out_dir(args.out, "simulate")
    p = m.adherence_prob if s.adherence_prob is None else s.adherence_prob
    res = simulate_batch(m, [L], [p], s.fallback, s.bound, periods=periods, seed=cfg.seed,
                         trace=True)
    outputs = [write_text(out / "trace.csv", trace_csv(res))]
    bids = res.trace["bid"][:, 0, :]
    finite = bids[np.isfinite(bids)]
    summary = {
        "periods": periods, "rec_slots": L, "bidders": len(m.bidders),
        "bid_mean": float(finite.mean()) if finite.size else None,
        "bid_sd": float(finite.std(ddof=1)) if finite.size > 1 else None,
        "revenue_per_period": float(res.revenue[0]),
        "bidder_surplus_per_period": float(res.bidder_surplus[0]),
        "social_surplus_per_period": float(res.social_surplus[0]),
        "adherence_rate": float(res.adherence_rate[0]),
        "max_identity_residual": res.max_identity_residual,
    }
    outputs.append(write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    if args.fixture:
        from .strategies import constructing_panel, equilibrium_bids
        days = s.fixture_days
        ids, vals, qm = constructing_panel(m, cfg.seed, min(25, m.count("constructing")), days)
        eq = equilibrium_bids(vals, qm, ids, m.quality.shared_sd, m.ctr, m.reserve_price,
                              m.auctions_per_period, seed=cfg.seed)
        ok = np.isfinite(eq.bids)
        records = eq.records()
        outputs.append(write_text(out / "bids.csv", bid_panel_csv(records, vals[ok].tolist())))
        ev = adhering_events(res)
        outputs.append(write_text(out / "events.csv", events_csv(
            [(i, t, b, recs) for i, t, b, recs, v in ev], [v for *_, v in ev])))
    _finish(out, "simulate", args, cfg.seed, [args.config] if args.config else [], outputs,
            {"periods": periods, "rec_slots": L}, started)
    print(f"simulated {periods} period(s); revenue per period {summary['revenue_per_period']:.4f}; "
          f"outputs in {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .valuation import bound_adhering_values, estimate_constructing_values
    started = time.time()
    cfg = _config(args)
    out = _out_dir(args.out, "estimate")
    records, truth = parse_bid_panel(read_text(args.bids), str(args.bids))
    e = cfg.estimation
    est = estimate_constructing_values(records, cfg.market, seed=cfg.seed, nodes=e.nodes,
                                       tabulate=e.tabulate,
                                       auctions_per_period=e.auctions_per_period)
    outputs = [write_text(out / "pseudo-values.csv", est.pseudo_values.to_csv()),
               write_text(out / "valuation-kde.json", est.valuation_kde.to_json() + "\n")]
    inputs = [args.bids] + ([args.config] if args.config else [])
    metrics = {"n_bids": est.n_bids, "n_qualifying": est.n_qualifying,
               "n_outside_support": est.n_outside_support,
               "bandwidth": est.valuation_kde.bandwidth}
    if truth is not None:
        from scipy import stats
        key = {(r.bidder_id, r.day, r.bid): v for r, v in zip(records, truth)}
        pv = est.pseudo_values
        planted = np.array([key[(i, t, b)] for i, t, b, _ in pv.records])
        rel = np.abs(pv.values - planted) / planted
        ks = stats.kstest(np.asarray(truth), lambda x: est.valuation_kde.cdf(x)).statistic
        metrics.update({"median_relative_error": float(np.median(rel)),
                        "p95_relative_error": float(np.quantile(rel, 0.95)),
                        "ks_distance": float(ks)})
    if args.events:
        events, ev_truth = parse_events(read_text(args.events), str(args.events))
        bounds = bound_adhering_values(events)
        inputs.append(args.events)
        metrics["censored_count"] = bounds.censored_count
        if ev_truth is not None:
            order = sorted(range(len(events)), key=lambda j: (events[j][0], events[j][1], events[j][2]))
            inside = [lo <= ev_truth[j] and (hi is None or ev_truth[j] <= hi)
                      for (_, _, _, lo, hi), j in zip(bounds.records, order)]
            metrics["bounds_coverage"] = float(np.mean(inside))
        outputs.append(write_text(out / "bounds.csv", bounds.to_csv()))
    else:
        outputs.append(write_text(out / "bounds.csv",
                                  "bidder_id,day,bid,lower,upper,censored,censored_count\r\n"))
    outputs.append(write_text(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n"))
    _finish(out, "estimate", args, cfg.seed, inputs, outputs, None, started)
    for k in sorted(metrics):
        v = metrics[k]
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    from .counterfactual import (calibrate_cells, format_table, ordinal_pattern, results_table,
                                 sweep)
    from .market import Bound
    from .strategies import Fallback
    started = time.time()
    cfg = _config(args)
    c = cfg.counterfactual
    m = cfg.market.with_(rng_seed=cfg.seed)
    slots = args.slots or list(c.slots)
    for s in slots:
        if s > m.K:
            raise UsageError(f"--slots: {s} exceeds the number of slots K = {m.K}")
    fallbacks = [args.fallback] if args.fallback else list(c.fallbacks)
    bounds = [args.bound] if args.bound else list(c.bounds)
    periods = args.periods or c.periods or m.periods
    threads = _threads(args.threads)
    out = _out_dir(args.out, "counterfactual")
    if c.adherence_prob is None:
        cal = calibrate_cells(m, c.target_rate, fallbacks, bounds, periods, c.grid_step, threads)
        adherence = {k: v.p_star for k, v in cal.items()}
        calib = [{"fallback": f.value, "bound": b.value, "p_star": r.p_star, "rate": r.rate,
                  "monotone": r.monotone} for (f, b), r in cal.items()]
    else:
        adherence = {(Fallback(f), Bound(b)): c.adherence_prob for f in fallbacks for b in bounds}
        calib = []
    res = sweep(m, slots, fallbacks, bounds, periods, cfg.seed, adherence, threads)
    pattern = {f"{f}/{b}": v for (f, b), v in ordinal_pattern(res).items()}
    outputs = [write_text(out / "counterfactual.csv", results_table(res)),
               write_text(out / "counterfactual.txt", format_table(res)),
               write_text(out / "calibration.json", json.dumps(calib, indent=2, sort_keys=True) + "\n"),
               write_text(out / "pattern.json", json.dumps(pattern, indent=2, sort_keys=True) + "\n")]
    _finish(out, "counterfactual", args, cfg.seed, [args.config] if args.config else [], outputs,
            {"slots": slots, "periods": periods}, started)
    print(format_table(res), end="")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .strategies import UnreachableTarget, calibrate_adherence
    started = time.time()
    cfg = _config(args)
    c = cfg.calibration
    target = c.target_rate if args.target is None else args.target
    m = cfg.market.with_(rng_seed=cfg.seed)
    out = _out_dir(args.out, "calibrate")
    try:
        r = calibrate_adherence(m, target, args.grid_step or c.grid_step,
                                args.fallback or c.fallback, args.bound or c.bound,
                                args.periods or c.periods)
    except UnreachableTarget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    doc = {"p_star": r.p_star, "rate": r.rate, "target": r.target, "monotone": r.monotone,
           "attainable": list(r.attainable), "events": r.events,
           "grid": r.grid.tolist(), "rates": r.rates.tolist()}
    outputs = [write_text(out / "calibration.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")]
    _finish(out, "calibrate", args, cfg.seed, [args.config] if args.config else [], outputs,
            None, started)
    print(f"p* = {r.p_star:.3f}; achieved rate {r.rate:.4f} (target {target:.4f})")
    return EXIT_OK


def cmd_did(args) -> int:
    from .panel import Panel, did_fit, disclosure_panel, format_report, planted_panel
    from ._rng import stream
    started = time.time()
    cfg = _config(args)
    d = cfg.did
    out = _out_dir(args.out, "did")
    inputs = [args.config] if args.config else []
    if args.panel:
        panel = Panel.from_csv(read_text(args.panel))
        inputs.append(args.panel)
    elif args.planted:
        panel = planted_panel(group_effects=(5.372, 1.705, 0.0) if d.with_groups else None,
                              rng=stream(cfg.seed, "planted-panel"))
    else:
        m = cfg.market.with_(rng_seed=cfg.seed)
        panel = Panel.from_observations(disclosure_panel(
            m, d.rec_slots, d.pre_periods, d.post_periods, cfg.seed, d.outcome, d.adherence_prob))
    estimates = {"(1) pooled": did_fit(panel, with_groups=False)}
    if d.with_groups:
        estimates["(2) by position"] = did_fit(panel, with_groups=True)
    report = format_report(estimates)
    outputs = [write_text(out / "panel.csv", panel.to_csv()),
               write_text(out / "did.json", json.dumps({k: v.to_dict() for k, v in estimates.items()},
                                                       indent=2, sort_keys=True) + "\n"),
               write_text(out / "did.txt", report)]
    _finish(out, "did", args, cfg.seed, inputs, outputs, None, started)
    print(report, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(print)
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gspmarket", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"gspmarket {__version__}")
    p.add_argument("--print-default-config", action="store_true",
                   help="print the documented default configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML run configuration (default: built-in)")
        sp.add_argument("--out", help="output directory (env GSPMARKET_OUTPUT_DIR)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("simulate", help="simulate periods and write an auction trace")
    common(sp)
    sp.add_argument("--periods", type=_positive_int)
    sp.add_argument("--fixture", action="store_true",
                    help="also write bids.csv and events.csv with planted values")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="recover valuations from a bid panel")
    common(sp)
    sp.add_argument("--bids", required=True, help="CSV: bidder_id,day,bid[,q_mean][,true_value]")
    sp.add_argument("--events", help="CSV of adhering events: bidder_id,day,bid,recs[,true_value]")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("counterfactual", help="sweep the number of recommendation slots")
    common(sp)
    sp.add_argument("--slots", type=_slot_list, help="comma-separated slot counts, e.g. 0,1,3")
    sp.add_argument("--fallback", choices=["polynomial", "random_shading"])
    sp.add_argument("--bound", choices=["lower", "upper"])
    sp.add_argument("--periods", type=_positive_int)
    sp.add_argument("--threads", type=_positive_int, help="worker processes (env GSPMARKET_THREADS)")
    sp.set_defaults(func=cmd_counterfactual)

    sp = sub.add_parser("calibrate", help="find the adherence probability matching a target rate")
    common(sp)
    sp.add_argument("--target", type=_rate)
    sp.add_argument("--grid-step", type=float)
    sp.add_argument("--fallback", choices=["polynomial", "random_shading"])
    sp.add_argument("--bound", choices=["lower", "upper"])
    sp.add_argument("--periods", type=_positive_int)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("did", help="difference-in-differences on an ad-by-day panel")
    common(sp)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--panel", help="panel CSV: ad_id,day,treated,post,group,outcome")
    src.add_argument("--planted", action="store_true", help="use a panel with known effects")
    sp.set_defaults(func=cmd_did)

    sp = sub.add_parser("selftest", help="run the invariant checks end to end")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .density import DegenerateSampleError, UndefinedConditionalMean
    from .panel import PanelError, RankDeficientDesign
    from .valuation import EmptySampleError, EstimationSupportError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if args.print_default_config:
            sys.stdout.write(DEFAULT_CONFIG)
            return EXIT_OK
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "threads", None) is not None or args.command == "counterfactual":
            _threads(getattr(args, "threads", None))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CsvSchemaError, PanelError, EmptySampleError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RankDeficientDesign, EstimationSupportError, DegenerateSampleError,
            UndefinedConditionalMean, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
