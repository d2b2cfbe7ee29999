"""Report rendering (CSV + aligned text) and the run manifest.

Display rounding is fixed at 4 decimal places for shares and 3 for
margins; the underlying computations always use unrounded values. Reports
deliberately contain no timestamps so identical inputs reproduce them byte
for byte; provenance comes from content digests instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .analysis import (
    ComparisonReport,
    ContingencyTable,
    ExplanatoryWeightReport,
    ReliabilityReport,
    StateShare,
    ValidityReport,
)


def fmt4(x: float) -> str:
    return f"{x:.4f}"


def fmt3(x: float) -> str:
    return f"{x:.3f}"


def file_digest(path: str | Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Plain-text table with aligned columns."""
    table = [list(headers)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for idx, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(headers))))
    return "\n".join(lines)


def write_report(
    out_dir: str | Path,
    name: str,
    headers: Sequence[str],
    rows: Sequence[Sequence[str]],
    footer_lines: Sequence[str] = (),
    provenance: Mapping[str, str] | None = None,
) -> tuple[Path, Path, str]:
    """Write <name>.csv and <name>.txt; returns both paths and the text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = dict(provenance or {})
    provenance.setdefault("tool", f"icsm {__version__}")

    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        for key, value in provenance.items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)

    lines = [f"{key}: {value}" for key, value in provenance.items()]
    lines.append("")
    lines.append(render_table(headers, rows))
    if footer_lines:
        lines.append("")
        lines.extend(footer_lines)
    text = "\n".join(lines) + "\n"
    txt_path = out_dir / f"{name}.txt"
    txt_path.write_text(text, encoding="utf-8")
    return csv_path, txt_path, text


def shares_rows(
    per_round: Mapping[tuple[int, str], StateShare],
    pooled: Mapping[str, StateShare],
) -> tuple[list[str], list[list[str]]]:
    headers = ["round", "state", "raw_dem", "raw_rep", "raw_other", "dem_norm", "rep_norm"]
    rows = []
    for (round_index, state), share in sorted(per_round.items()):
        rows.append(
            [
                str(round_index),
                state,
                fmt4(share.raw_dem),
                fmt4(share.raw_rep),
                fmt4(share.raw_other),
                fmt4(share.dem_norm),
                fmt4(share.rep_norm),
            ]
        )
    for state, share in sorted(pooled.items()):
        rows.append(
            [
                "pooled",
                state,
                fmt4(share.raw_dem),
                fmt4(share.raw_rep),
                fmt4(share.raw_other),
                fmt4(share.dem_norm),
                fmt4(share.rep_norm),
            ]
        )
    return headers, rows


def reliability_rows(
    reports: Mapping[str, ReliabilityReport]
) -> tuple[list[str], list[list[str]]]:
    headers = ["state", "n_rounds", "mean", "sd", "ci_low", "ci_high", "max_fluctuation"]
    rows = [
        [
            r.state,
            str(r.n_rounds),
            fmt4(r.mean),
            f"{r.sd:.6f}",
            fmt4(r.ci_low),
            fmt4(r.ci_high),
            f"{r.max_fluctuation:.6f}",
        ]
        for r in reports.values()
    ]
    return headers, rows


def validity_rows(report: ValidityReport) -> tuple[list[str], list[list[str]], list[str]]:
    headers = ["state", "dem_norm", "actual", "margin", "winner_call"]
    rows = [
        [r.state, fmt4(r.dem_norm), fmt4(r.actual), fmt3(r.margin), r.call]
        for r in report.rows
    ]
    footer = [
        (
            f"threshold range: [{report.threshold_low:.4f}, {report.threshold_high:.4f}] "
            f"(benchmark errors inflated by {report.inflation_factor:.0%})"
        ),
        (
            f"winner calls correct: {report.correct_calls}/{len(report.rows)}; "
            f"mean margin: {report.mean_margin:.4f}"
        ),
        f"verdict: {'PASS' if report.passed else 'FAIL'}",
    ]
    return headers, rows, footer


def weight_rows(
    report: ExplanatoryWeightReport,
) -> tuple[list[str], list[list[str]], list[str]]:
    headers = ["state", "responses", "mentions", "proportion"]
    rows = [
        [r.state, str(r.responses), str(r.mentions), fmt4(r.proportion)]
        for r in report.rows
    ]
    footer = [
        f"term: {report.term!r} (matched beyond the first sentence, whole word)",
        f"overall mean proportion: {report.overall_mean:.4f}",
    ]
    return headers, rows, footer


def cramers_rows(
    variable: str, table: ContingencyTable, chi2: float, v: float, ties: int
) -> tuple[list[str], list[list[str]], list[str]]:
    headers = ["category", *table.col_labels, "total"]
    rows = [
        [label, *(str(c) for c in counts), str(sum(counts))]
        for label, counts in zip(table.row_labels, table.counts)
    ]
    footer = [
        f"variable: {variable}; N = {table.total}; chi2 = {chi2:.6f}; "
        f"Cramer's V = {v:.6f}",
        f"ties broken toward Republican: {ties}",
    ]
    return headers, rows, footer


def compare_rows(report: ComparisonReport) -> tuple[list[str], list[list[str]], list[str]]:
    headers = ["state", "margin_a", "margin_b", "delta", "call_a", "call_b"]
    rows = [
        [
            r.state,
            fmt3(r.margin_a),
            fmt3(r.margin_b),
            f"{r.delta:+.3f}",
            r.call_a,
            r.call_b,
        ]
        for r in report.rows
    ]
    n = len(report.rows)
    footer = [
        f"winner calls: {report.correct_a}/{n} -> {report.correct_b}/{n}; "
        f"mean margin: {report.mean_margin_a:.4f} -> {report.mean_margin_b:.4f}",
        f"verdict: {'validated' if report.validated else 'not validated'} "
        f"({report.rationale})",
    ]
    return headers, rows, footer


class Manifest:
    """JSON sidecar tying every report back to exact input digests."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"tool_version": __version__}

    def record(self, section: str, payload) -> None:
        self.data[section] = payload
        self.data["tool_version"] = __version__

    def record_report(self, name: str, path: str | Path) -> None:
        reports = self.data.setdefault("reports", {})
        reports[name] = {"path": str(path), "digest": file_digest(path)}

    def verify(self) -> list[str]:
        """Check recorded digests against the files on disk."""
        problems = []
        for state, entry in self.data.get("cohorts", {}).items():
            problems.extend(_check(entry, f"cohort {state}"))
        if "config" in self.data:
            problems.extend(_check(self.data["config"], "config"))
        return problems

    def save(self) -> None:
        self.path.write_text(
            json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _check(entry: Mapping, label: str) -> list[str]:
    path = Path(entry.get("path", ""))
    if not path.exists():
        return [f"{label}: {path} is missing"]
    if file_digest(path) != entry.get("digest"):
        return [f"{label}: {path} no longer matches its recorded digest"]
    return []
