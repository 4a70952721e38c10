import json

import pytest

from hteml.report import (ReportError, ReportTable, emit_gates_plot_data, fmt_number,
                          read_gates_plot_data, write_tables)
from hteml.summary import EstimateSummary


def table():
    est = EstimateSummary.from_normal(0.123456, 0.0456789, n=10)
    return ReportTable("Demo", ["a", "b"], ["lasso", "note"],
                       [[est, "ok"], [(1.5, 0.25), None]], ["footnote one"])


def test_fmt_number():
    assert fmt_number(0.123456) == "0.123"
    assert fmt_number(1234.5) == "1.23e+03"
    assert fmt_number(2.0) == "2.00"
    assert fmt_number(0) == "0"
    assert fmt_number(float("nan")) == "nan"
    assert fmt_number(None) == ""


def test_text_table_puts_se_below_estimate():
    lines = table().to_text().splitlines()
    assert lines[0] == "Demo"
    row = next(i for i, ln in enumerate(lines) if ln.startswith("a "))
    assert "0.123" in lines[row] and "ok" in lines[row]
    assert "(0.0457)" in lines[row + 1]
    assert lines[-1] == "footnote one"


def test_records_keep_full_precision():
    recs = list(table().records())
    assert recs[0]["estimate"] == 0.123456 and recs[0]["se"] == 0.0456789
    assert recs[0]["ci_low"] < recs[0]["estimate"] < recs[0]["ci_high"]
    assert recs[1]["value"] == "ok"
    assert recs[3]["value"] is None
    parsed = [json.loads(line) for line in table().to_jsonl().splitlines()]
    assert parsed == recs


def test_csv_round_trip():
    import csv
    import io

    rows = list(csv.DictReader(io.StringIO(table().to_csv())))
    assert float(rows[0]["estimate"]) == 0.123456
    assert rows[2]["se"] == "0.25"


def test_table_shape_checks():
    with pytest.raises(ValueError):
        ReportTable("t", ["a"], ["x"], [])
    with pytest.raises(ValueError):
        ReportTable("t", ["a"], ["x"], [[1, 2]])


def test_write_tables(tmp_path):
    paths = write_tables([table(), table()], tmp_path, ("text", "csv", "jsonl"))
    assert [p.name for p in paths] == ["tables.txt", "tables.csv", "tables.jsonl"]
    # one CSV header for all tables
    assert (tmp_path / "tables.csv").read_text().count("table,row,column") == 1
    with pytest.raises(ReportError, match="unknown output format"):
        write_tables([table()], tmp_path, ("xml",))


class _Result:
    def __init__(self, gammas, beta1):
        self.gammas = gammas
        self.beta1 = beta1


def test_gates_plot_round_trip(tmp_path):
    es = EstimateSummary.from_normal
    res = _Result([es(0.1, 0.05), None, es(0.7, 0.1)], es(0.4, 0.02))
    path = tmp_path / "gates.csv"
    emit_gates_plot_data(res, path)
    data = read_gates_plot_data(path)
    assert list(data) == ["1", "3", "ate"]
    assert data["3"] == (0.7, res.gammas[2].ci_low, res.gammas[2].ci_high)
    assert data["ate"][0] == 0.4
    with pytest.raises(ReportError, match="no plottable"):
        emit_gates_plot_data(_Result([None], es(0.4, 0.02)), path)
    with pytest.raises(ReportError, match="cannot write"):
        emit_gates_plot_data(res, tmp_path / "missing" / "g.csv")
