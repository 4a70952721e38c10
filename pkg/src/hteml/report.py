"""Result tables and plot-data files.

Text tables put standard errors in parentheses beneath estimates and round
to 3 significant figures; CSV and JSON-lines keep full precision.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .summary import EstimateSummary

FORMATS = ("text", "csv", "jsonl")


class ReportError(RuntimeError):
    pass


def fmt_number(v, sig: int = 3) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if v == 0:
        return "0"
    return f"{v:#.{sig}g}".rstrip(".")


@dataclass
class ReportTable:
    """Rectangular table of estimates.

    A cell is an :class:`EstimateSummary`, an ``(estimate, se)`` pair, a
    plain number, a string, or ``None`` for an empty cell.
    """

    title: str
    row_labels: list
    col_labels: list
    cells: list
    footnotes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cells) != len(self.row_labels):
            raise ValueError("one row of cells per row label")
        for row in self.cells:
            if len(row) != len(self.col_labels):
                raise ValueError("table is not rectangular")

    @staticmethod
    def _pair(cell):
        if isinstance(cell, EstimateSummary):
            return cell.theta, cell.se
        if isinstance(cell, tuple) and len(cell) == 2:
            return float(cell[0]), float(cell[1])
        return None

    def to_text(self) -> str:
        body = []
        for label, row in zip(self.row_labels, self.cells):
            top, bottom, has_se = [], [], False
            for cell in row:
                pair = self._pair(cell)
                if pair is not None:
                    top.append(fmt_number(pair[0]))
                    bottom.append(f"({fmt_number(pair[1])})")
                    has_se = True
                elif isinstance(cell, str):
                    top.append(cell)
                    bottom.append("")
                else:
                    top.append(fmt_number(cell))
                    bottom.append("")
            body.append([str(label)] + top)
            if has_se:
                body.append([""] + bottom)
        header = [""] + [str(c) for c in self.col_labels]
        widths = [max(len(r[j]) for r in [header] + body) for j in range(len(header))]
        line = lambda r: "  ".join(  # noqa: E731
            r[0].ljust(widths[0]) if j == 0 else r[j].rjust(widths[j]) for j in range(len(r))
        ).rstrip()
        rule = "-" * len(line(header))
        out = [self.title, rule, line(header), rule]
        out += [line(r) for r in body]
        out.append(rule)
        out += [str(f) for f in self.footnotes]
        return "\n".join(out) + "\n"

    def records(self):
        """One dict per cell, full precision."""
        for label, row in zip(self.row_labels, self.cells):
            for col, cell in zip(self.col_labels, row):
                pair = self._pair(cell)
                rec = {"table": self.title, "row": str(label), "column": str(col)}
                if pair is not None:
                    rec.update(estimate=pair[0], se=pair[1])
                    if isinstance(cell, EstimateSummary):
                        rec.update(ci_low=cell.ci_low, ci_high=cell.ci_high, p_value=cell.p_value)
                elif cell is None:
                    rec.update(value=None)
                else:
                    rec.update(value=cell if isinstance(cell, str) else float(cell))
                yield rec

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        cols = ["table", "row", "column", "estimate", "se", "ci_low", "ci_high", "p_value", "value"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        if header:
            w.writeheader()
        for rec in self.records():
            w.writerow({k: ("" if rec.get(k) is None else repr(rec[k]) if isinstance(rec.get(k), float)
                            else rec[k]) for k in cols if k in rec})
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records())


def write_tables(tables: Sequence[ReportTable], outdir, formats=("text",)) -> list:
    """Write all tables in each requested format; returns the paths written."""
    from pathlib import Path

    outdir = Path(outdir)
    written = []
    for f in formats:
        if f not in FORMATS:
            raise ReportError(f"unknown output format {f!r}; choose from {FORMATS}")
        if f == "text":
            text = "\n".join(t.to_text() for t in tables)
            path = outdir / "tables.txt"
        elif f == "csv":
            text = "".join(t.to_csv(header=(i == 0)) for i, t in enumerate(tables))
            path = outdir / "tables.csv"
        else:
            text = "".join(t.to_jsonl() for t in tables)
            path = outdir / "tables.jsonl"
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


GATES_COLUMNS = ("group", "estimate", "ci_low", "ci_high")


def emit_gates_plot_data(result, path) -> None:
    """CSV of GATES estimates and CIs per group plus one whole-sample ``ate`` row.

    Unflagged groups are written as ``1..K``; the ``ate`` row carries the
    BLP average effect and its CI. Values keep full precision.
    """
    rows = [(str(k + 1), g) for k, g in enumerate(result.gammas) if g is not None]
    if not rows:
        raise ReportError("no plottable groups")
    rows.append(("ate", result.beta1))
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GATES_COLUMNS)
            for label, est in rows:
                w.writerow([label, repr(est.theta), repr(est.ci_low), repr(est.ci_high)])
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def read_gates_plot_data(path) -> dict:
    """Parse a file written by :func:`emit_gates_plot_data`."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["group"]: (float(r["estimate"]), float(r["ci_low"]), float(r["ci_high"]))
                for r in csv.DictReader(fh)}
