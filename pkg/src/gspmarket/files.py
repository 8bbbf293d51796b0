"""CSV readers/writers for bid panels and adhering events, and run manifests.

All files are UTF-8 with a mandatory header row and RFC-4180 quoting.
Reader errors name the row (1-based, header = row 1) and the column.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from .valuation import BidRecord

MANIFEST_VERSION = 1


class CsvSchemaError(ValueError):
    def __init__(self, message: str, source: str = "<csv>", row: int | None = None,
                 column: str | None = None):
        where = source
        if row is not None:
            where += f", row {row}"
        if column is not None:
            where += f", column {column!r}"
        super().__init__(f"{where}: {message}")
        self.source, self.row, self.column = source, row, column


def _rows(text: str, source: str, required: Sequence[str], optional: Sequence[str] = ()):
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if not header:
        raise CsvSchemaError("missing header row", source, 1)
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    missing = [c for c in required if c not in header]
    if missing:
        raise CsvSchemaError(f"header lacks required column(s): {', '.join(missing)}", source, 1)
    extra = [c for c in header if c not in required and c not in optional]
    if extra:
        raise CsvSchemaError(f"unexpected column(s): {', '.join(extra)}", source, 1)
    for n, row in enumerate(reader, start=2):
        if not row or row == [""]:
            continue
        if len(row) != len(header):
            raise CsvSchemaError(f"expected {len(header)} fields, found {len(row)}", source, n)
        yield n, dict(zip(header, row))


def _number(raw: str, source, row, col, positive=False, allow_empty=False):
    if raw == "" and allow_empty:
        return None
    try:
        x = float(raw)
    except ValueError:
        raise CsvSchemaError(f"not a number: {raw!r}", source, row, col) from None
    if not math.isfinite(x):
        raise CsvSchemaError(f"not a finite number: {raw!r}", source, row, col)
    if positive and not x > 0:
        raise CsvSchemaError(f"must be positive: {raw!r}", source, row, col)
    return x


def _integer(raw: str, source, row, col):
    try:
        return int(raw)
    except ValueError:
        raise CsvSchemaError(f"not an integer: {raw!r}", source, row, col) from None


def _ident(raw: str, source, row, col):
    if raw == "":
        raise CsvSchemaError("empty identifier", source, row, col)
    return raw


def parse_bid_panel(text: str, source: str = "<bids>"):
    """Bid panel -> (records, planted values or None).

    Columns: bidder_id, day, bid, optional q_mean and true_value.
    """
    recs, truth = [], []
    for n, r in _rows(text, source, ("bidder_id", "day", "bid"), ("q_mean", "true_value")):
        qm = _number(r["q_mean"], source, n, "q_mean", positive=True, allow_empty=True) \
            if "q_mean" in r else None
        recs.append(BidRecord(_ident(r["bidder_id"], source, n, "bidder_id"),
                              _integer(r["day"], source, n, "day"),
                              _number(r["bid"], source, n, "bid", positive=True), qm))
        if "true_value" in r:
            truth.append(_number(r["true_value"], source, n, "true_value", allow_empty=True))
    values = truth if truth and all(v is not None for v in truth) else None
    return recs, values


def parse_events(text: str, source: str = "<events>"):
    """Adhering events -> (events, planted values or None).

    Columns: bidder_id, day, bid, recs (semicolon-separated), optional true_value.
    """
    events, truth = [], []
    for n, r in _rows(text, source, ("bidder_id", "day", "bid", "recs"), ("true_value",)):
        recs = []
        for part in r["recs"].split(";") if r["recs"].strip() else []:
            recs.append(_number(part.strip(), source, n, "recs", positive=True))
        events.append((_ident(r["bidder_id"], source, n, "bidder_id"),
                       _integer(r["day"], source, n, "day"),
                       _number(r["bid"], source, n, "bid", positive=True), recs))
        if "true_value" in r:
            truth.append(_number(r["true_value"], source, n, "true_value", allow_empty=True))
    values = truth if truth and all(v is not None for v in truth) else None
    return events, values


def bid_panel_csv(records: Iterable[BidRecord], values: Sequence[float] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    records = list(records)
    cols = ["bidder_id", "day", "bid", "q_mean"] + (["true_value"] if values is not None else [])
    w.writerow(cols)
    for j, r in enumerate(records):
        row = [r.bidder_id, r.day, repr(float(r.bid)), "" if r.q_mean is None else repr(float(r.q_mean))]
        if values is not None:
            row.append(repr(float(values[j])))
        w.writerow(row)
    return buf.getvalue()


def events_csv(events: Iterable, values: Sequence[float] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    events = list(events)
    w.writerow(["bidder_id", "day", "bid", "recs"] + (["true_value"] if values is not None else []))
    for j, (i, t, b, recs) in enumerate(events):
        row = [i, t, repr(float(b)), ";".join(repr(float(s)) for s in recs)]
        if values is not None:
            row.append(repr(float(values[j])))
        w.writerow(row)
    return buf.getvalue()


def read_text(path: str | Path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def write_text(path: str | Path, text: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return p


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_json(command: str, config_path: str | None, seed: int, inputs: Sequence[Path],
                  outputs: Sequence[Path], extra: dict | None = None) -> str:
    """Deterministic manifest: command, config, seed and content hashes.

    Paths are recorded by file name so moving the output directory does not
    change the manifest.  Wall-clock timing is kept out of it on purpose.
    """
    d = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": None if config_path is None else Path(config_path).name,
        "seed": seed,
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    if extra:
        d["details"] = extra
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


__all__ = [
    "CsvSchemaError", "bid_panel_csv", "events_csv", "manifest_json", "parse_bid_panel",
    "parse_events", "read_text", "sha256_file", "write_text",
]
