import json

import pytest

from gspmarket.files import (CsvSchemaError, bid_panel_csv, events_csv, manifest_json,
                             parse_bid_panel, parse_events, sha256_file, write_text)
from gspmarket.valuation import BidRecord


def test_bid_panel_round_trip():
    recs = [BidRecord("a", 0, 3.25, 0.1), BidRecord("b,x", 1, 7.0, None)]
    text = bid_panel_csv(recs, [4.0, 9.5])
    assert text.startswith("bidder_id,day,bid,q_mean,true_value\r\n")
    assert '"b,x"' in text
    back, truth = parse_bid_panel(text)
    assert back == recs and truth == [4.0, 9.5]


def test_bid_panel_without_truth():
    back, truth = parse_bid_panel("bidder_id,day,bid\na,0,2.5\n")
    assert back == [BidRecord("a", 0, 2.5, None)] and truth is None


def test_events_round_trip():
    ev = [("a", 3, 5.0, [4.0, 6.5]), ("b", 4, 2.0, [])]
    back, truth = parse_events(events_csv(ev, [5.5, 2.2]))
    assert back == ev and truth == [5.5, 2.2]


@pytest.mark.parametrize("text, row, column", [
    ("bidder_id,day\na,1\n", 1, None),
    ("bidder_id,day,bid,extra\na,1,2,3\n", 1, None),
    ("bidder_id,day,bid\na,1,2\nb,x,2\n", 3, "day"),
    ("bidder_id,day,bid\na,1,-2\n", 2, "bid"),
    ("bidder_id,day,bid\na,1,nan\n", 2, "bid"),
    ("bidder_id,day,bid\n,1,2\n", 2, "bidder_id"),
    ("bidder_id,day,bid\na,1\n", 2, None),
    ("", 1, None),
])
def test_schema_errors_name_row_and_column(text, row, column):
    with pytest.raises(CsvSchemaError) as err:
        parse_bid_panel(text, "bids.csv")
    assert (err.value.row, err.value.column) == (row, column)
    assert str(err.value).startswith(f"bids.csv, row {row}")


def test_event_recs_must_be_numbers():
    with pytest.raises(CsvSchemaError, match="column 'recs'"):
        parse_events("bidder_id,day,bid,recs\na,1,2,3;x\n")


def test_manifest_lists_every_output(tmp_path):
    a = write_text(tmp_path / "a.csv", "x\r\n1\r\n")
    b = write_text(tmp_path / "b.json", "{}\n")
    cfg = write_text(tmp_path / "run.yaml", "seed: 1\n")
    m = json.loads(manifest_json("simulate", str(cfg), 1, [cfg], [a, b]))
    assert m["outputs"] == {"a.csv": sha256_file(a), "b.json": sha256_file(b)}
    assert m["inputs"] == {"run.yaml": sha256_file(cfg)}
    assert m["config"] == "run.yaml" and m["seed"] == 1
    assert (tmp_path / "a.csv").read_bytes() == b"x\r\n1\r\n"
