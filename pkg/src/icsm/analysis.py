"""Statistics over run logs: aggregation, reliability, validity against a
benchmark, explanatory weight of free-text reasons, Cramer's V, and
configuration comparison.

Shares are estimated by soft voting: the mean of per-agent probability
simplexes, then two-party normalized (Democrat and Republican rescaled to
sum to 1, discarding other/abstain mass). All comparisons run on
unrounded values; rounding happens only at report-rendering time.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IcsmError
from .experiment import RoundRecord
from .prompting import VoteResponse, beyond_first_sentence

Z_95 = 1.96

DEFAULT_INFLATION_FACTOR = 0.65


class EmptyState(IcsmError):
    """No successfully parsed records for a state."""


class DegenerateShares(IcsmError):
    """Two-party mass is zero; normalization undefined."""


class InsufficientRounds(IcsmError):
    """Reliability statistics need at least two rounds."""


class EmptyCorpus(IcsmError):
    """No parsed responses to search for a term."""


class ZeroMargin(IcsmError):
    """A contingency table has an all-zero row or column."""


class MismatchedStates(IcsmError):
    """Two reports or inputs cover different state sets."""


class BenchmarkFormatError(IcsmError):
    """The benchmark file is malformed."""


@dataclass(frozen=True)
class StateShare:
    """Mean candidate probabilities for one state, raw and normalized."""

    state: str
    raw_dem: float
    raw_rep: float
    raw_other: float
    dem_norm: float
    rep_norm: float


def share_from_raw(
    state: str, raw_dem: float, raw_rep: float, raw_other: float
) -> StateShare:
    two_party = raw_dem + raw_rep
    if two_party <= 0:
        raise DegenerateShares(f"state {state!r}: no two-party probability mass")
    return StateShare(
        state=state,
        raw_dem=raw_dem,
        raw_rep=raw_rep,
        raw_other=raw_other,
        dem_norm=raw_dem / two_party,
        rep_norm=raw_rep / two_party,
    )


def aggregate(records: Sequence[RoundRecord]) -> StateShare:
    """Mean-of-probabilities share for one state's records.

    Typically called with one round's records; pooling rounds is fine too.
    Parse failures are excluded from the mean but must leave at least one
    parsed record.
    """
    states = {r.state for r in records}
    if len(states) > 1:
        raise ValueError(f"records span multiple states: {sorted(states)}")
    parsed = [r.parsed for r in records if r.parsed is not None]
    if not parsed:
        raise EmptyState("no successfully parsed records")
    n = len(parsed)
    return share_from_raw(
        state=next(iter(states)) if states else "",
        raw_dem=sum(p.p_dem for p in parsed) / n,
        raw_rep=sum(p.p_rep for p in parsed) / n,
        raw_other=sum(p.p_other for p in parsed) / n,
    )


def margin_of_error(share: StateShare, actual_dem_norm: float) -> float:
    """Absolute difference between simulated and actual two-party share."""
    return abs(share.dem_norm - actual_dem_norm)


def winner_call(share: StateShare, actual_dem_norm: float) -> str:
    """Strict-majority winner prediction: correct, incorrect, or no_call."""

    def side(dem_norm: float) -> str | None:
        if dem_norm > 0.5:
            return "Democrat"
        if dem_norm < 0.5:
            return "Republican"
        return None

    predicted = side(share.dem_norm)
    actual = side(actual_dem_norm)
    if predicted is None or actual is None:
        return "no_call"
    return "correct" if predicted == actual else "incorrect"


@dataclass(frozen=True)
class ReliabilityReport:
    state: str
    n_rounds: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    max_fluctuation: float


def reliability(state: str, per_round_dem_norm: Sequence[float]) -> ReliabilityReport:
    """Stability of a state's share across rounds: sample sd (n-1) and a
    95% normal-approximation interval mean +/- 1.96 * sd / sqrt(n)."""
    n = len(per_round_dem_norm)
    if n < 2:
        raise InsufficientRounds(f"state {state!r}: need >= 2 rounds, got {n}")
    if max(per_round_dem_norm) == min(per_round_dem_norm):
        # identical values: keep the zero-variance case exact
        mean, sd = per_round_dem_norm[0], 0.0
    else:
        mean = math.fsum(per_round_dem_norm) / n
        sd = math.sqrt(
            math.fsum((x - mean) ** 2 for x in per_round_dem_norm) / (n - 1)
        )
    half = Z_95 * sd / math.sqrt(n)
    return ReliabilityReport(
        state=state,
        n_rounds=n,
        mean=mean,
        sd=sd,
        ci_low=mean - half,
        ci_high=mean + half,
        max_fluctuation=max(per_round_dem_norm) - min(per_round_dem_norm),
    )


@dataclass(frozen=True)
class BenchmarkSpec:
    """Actual results plus the criterion study's error list."""

    actuals: Mapping[str, float]
    benchmark_errors: tuple[float, ...]
    inflation_factor: float = DEFAULT_INFLATION_FACTOR

    def __post_init__(self):
        for state, value in self.actuals.items():
            if not 0 < value < 1:
                raise ValueError(f"actual share for {state!r} must be in (0,1)")
        if any(e < 0 for e in self.benchmark_errors):
            raise ValueError("benchmark errors must be >= 0")


def load_benchmark(
    path: str | Path, inflation_factor: float = DEFAULT_INFLATION_FACTOR
) -> BenchmarkSpec:
    """Read a benchmark CSV: state,actual_dem_norm,ref_state,ref_error.

    The ref_* columns carry the criterion study's per-state errors; blank
    ref cells are allowed (the state sets need not align row by row).
    """
    actuals: dict[str, float] = {}
    errors: list[float] = []
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"state", "actual_dem_norm"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise BenchmarkFormatError(
                f"{path}: header must contain state,actual_dem_norm"
            )
        for row in reader:
            state = row["state"].strip()
            if state:
                try:
                    actuals[state] = float(row["actual_dem_norm"])
                except ValueError:
                    raise BenchmarkFormatError(
                        f"{path}: bad actual share for {state!r}"
                    ) from None
            ref = (row.get("ref_error") or "").strip()
            if ref:
                errors.append(float(ref))
    if not errors:
        raise BenchmarkFormatError(f"{path}: no ref_error values found")
    return BenchmarkSpec(
        actuals=actuals,
        benchmark_errors=tuple(errors),
        inflation_factor=inflation_factor,
    )


@dataclass(frozen=True)
class StateValidity:
    state: str
    dem_norm: float
    actual: float
    margin: float
    call: str


@dataclass(frozen=True)
class ValidityReport:
    rows: tuple[StateValidity, ...]
    threshold_low: float
    threshold_high: float
    inflation_factor: float
    passed: bool

    @property
    def correct_calls(self) -> int:
        return sum(1 for r in self.rows if r.call == "correct")

    @property
    def mean_margin(self) -> float:
        return sum(r.margin for r in self.rows) / len(self.rows)


def validity(
    shares: Mapping[str, StateShare], benchmark: BenchmarkSpec
) -> ValidityReport:
    """Margins and winner calls against the inflated benchmark range.

    The threshold range is [min, max] of the benchmark errors scaled by
    (1 + inflation_factor); the verdict passes iff every state margin lies
    strictly below the upper bound.
    """
    if not benchmark.benchmark_errors:
        raise ValueError("benchmark error list is empty")
    if not shares:
        raise ValueError("no state shares to validate")
    rows = []
    for state in sorted(shares):
        if state not in benchmark.actuals:
            raise MismatchedStates(f"benchmark has no actual result for {state!r}")
        share = shares[state]
        actual = benchmark.actuals[state]
        rows.append(
            StateValidity(
                state=state,
                dem_norm=share.dem_norm,
                actual=actual,
                margin=margin_of_error(share, actual),
                call=winner_call(share, actual),
            )
        )
    scale = 1.0 + benchmark.inflation_factor
    low = min(benchmark.benchmark_errors) * scale
    high = max(benchmark.benchmark_errors) * scale
    return ValidityReport(
        rows=tuple(rows),
        threshold_low=low,
        threshold_high=high,
        inflation_factor=benchmark.inflation_factor,
        passed=all(r.margin < high for r in rows),
    )


@dataclass(frozen=True)
class StateWeight:
    state: str
    mentions: int
    responses: int

    @property
    def proportion(self) -> float:
        return self.mentions / self.responses


@dataclass(frozen=True)
class ExplanatoryWeightReport:
    """How often a term appears in reasons beyond their first sentence."""

    term: str
    rows: tuple[StateWeight, ...]

    @property
    def overall_mean(self) -> float:
        return sum(r.proportion for r in self.rows) / len(self.rows)


def explanatory_weight(
    records: Iterable[RoundRecord], term: str
) -> ExplanatoryWeightReport:
    """Per-state fraction of parsed responses whose reason mentions the
    term (whole word, case-insensitive) after the first sentence.

    The first sentence is excluded because it typically restates the
    agent's own background.
    """
    pattern = re.compile(rf"\b{re.escape(term)}\b", re.IGNORECASE)
    responses: dict[str, int] = defaultdict(int)
    mentions: dict[str, int] = defaultdict(int)
    for record in records:
        if record.parsed is None:
            continue
        responses[record.state] += 1
        if pattern.search(beyond_first_sentence(record.parsed.reason)):
            mentions[record.state] += 1
    if not responses:
        raise EmptyCorpus("no parsed responses carry reasons to search")
    rows = tuple(
        StateWeight(state=s, mentions=mentions[s], responses=responses[s])
        for s in sorted(responses)
    )
    return ExplanatoryWeightReport(term=term, rows=rows)


def binary_support(response: VoteResponse) -> str:
    """Collapse a simplex to one side: Democrat iff p_dem > p_rep.

    Ties go to Republican (the complement convention); report builders
    count ties separately so the rule stays visible.
    """
    return "Democrat" if response.p_dem > response.p_rep else "Republican"


def support_tie(response: VoteResponse) -> bool:
    return response.p_dem == response.p_rep


@dataclass(frozen=True)
class ContingencyTable:
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.row_labels) < 2 or len(self.col_labels) < 2:
            raise ValueError("contingency table must be at least 2x2")
        if len(self.counts) != len(self.row_labels) or any(
            len(row) != len(self.col_labels) for row in self.counts
        ):
            raise ValueError("counts shape does not match labels")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("counts must be non-negative")
        if self.total < 1:
            raise ValueError("table must hold at least one observation")

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)


def build_contingency(
    pairs: Iterable[tuple[str, str]],
    row_order: Sequence[str] | None = None,
    col_order: Sequence[str] = ("Democrat", "Republican"),
) -> ContingencyTable:
    """Cross-tabulate (category, side) pairs into a contingency table."""
    pairs = list(pairs)
    rows = list(row_order) if row_order else sorted({r for r, _ in pairs})
    cols = list(col_order)
    index = {(r, c): 0 for r in rows for c in cols}
    for r, c in pairs:
        if (r, c) not in index:
            raise ValueError(f"pair {(r, c)} outside declared labels")
        index[(r, c)] += 1
    return ContingencyTable(
        row_labels=tuple(rows),
        col_labels=tuple(cols),
        counts=tuple(tuple(index[(r, c)] for c in cols) for r in rows),
    )


def chi_square(table: ContingencyTable) -> float:
    """Pearson chi-squared with expected counts row_total*col_total/N."""
    obs = np.asarray(table.counts, dtype=float)
    row_totals = obs.sum(axis=1)
    col_totals = obs.sum(axis=0)
    if (row_totals == 0).any() or (col_totals == 0).any():
        raise ZeroMargin("table has an all-zero row or column")
    expected = np.outer(row_totals, col_totals) / obs.sum()
    return float(((obs - expected) ** 2 / expected).sum())


def cramers_v(table: ContingencyTable) -> float:
    """Cramer's V = sqrt( chi2 / (N * min(r-1, c-1)) ), in [0, 1]."""
    chi2 = chi_square(table)
    k = min(len(table.row_labels) - 1, len(table.col_labels) - 1)
    v = math.sqrt(chi2 / (table.total * k))
    return min(1.0, v)


@dataclass(frozen=True)
class StateComparison:
    state: str
    margin_a: float
    margin_b: float
    call_a: str
    call_b: str

    @property
    def delta(self) -> float:
        return self.margin_b - self.margin_a


@dataclass(frozen=True)
class ComparisonReport:
    """Knowledge-discovery verdict for a configuration change."""

    rows: tuple[StateComparison, ...]
    correct_a: int
    correct_b: int
    mean_margin_a: float
    mean_margin_b: float
    validated: bool
    rationale: str


def compare_configs(
    report_a: ValidityReport, report_b: ValidityReport
) -> ComparisonReport:
    """Decide whether configuration B's change counts as validated knowledge.

    Validated iff winner-call correctness strictly improves, or correctness
    is equal and the mean margin decreases.
    """
    states_a = {r.state: r for r in report_a.rows}
    states_b = {r.state: r for r in report_b.rows}
    if set(states_a) != set(states_b):
        raise MismatchedStates(
            f"state sets differ: {sorted(states_a)} vs {sorted(states_b)}"
        )
    for state in states_a:
        if states_a[state].actual != states_b[state].actual:
            raise MismatchedStates(f"actual results differ for {state!r}")

    rows = tuple(
        StateComparison(
            state=state,
            margin_a=states_a[state].margin,
            margin_b=states_b[state].margin,
            call_a=states_a[state].call,
            call_b=states_b[state].call,
        )
        for state in sorted(states_a)
    )
    correct_a = report_a.correct_calls
    correct_b = report_b.correct_calls
    mean_a = report_a.mean_margin
    mean_b = report_b.mean_margin
    if correct_b > correct_a:
        validated, why = True, (
            f"winner calls improved {correct_a}/{len(rows)} -> {correct_b}/{len(rows)}"
        )
    elif correct_b == correct_a and mean_b < mean_a:
        validated, why = True, (
            f"winner calls unchanged, mean margin fell "
            f"{mean_a:.4f} -> {mean_b:.4f}"
        )
    elif correct_b == correct_a:
        validated, why = False, "winner calls unchanged and mean margin did not fall"
    else:
        validated, why = False, (
            f"winner calls regressed {correct_a}/{len(rows)} -> {correct_b}/{len(rows)}"
        )
    return ComparisonReport(
        rows=rows,
        correct_a=correct_a,
        correct_b=correct_b,
        mean_margin_a=mean_a,
        mean_margin_b=mean_b,
        validated=validated,
        rationale=why,
    )


# --- run-log grouping helpers ---


def group_by_round_state(
    records: Iterable[RoundRecord],
) -> dict[tuple[int, str], list[RoundRecord]]:
    groups: dict[tuple[int, str], list[RoundRecord]] = defaultdict(list)
    for record in records:
        groups[(record.round_index, record.state)].append(record)
    return dict(groups)


def round_shares(records: Iterable[RoundRecord]) -> dict[tuple[int, str], StateShare]:
    """Per-(round, state) shares; rounds with nothing parsed are skipped."""
    out: dict[tuple[int, str], StateShare] = {}
    for key, group in sorted(group_by_round_state(records).items()):
        try:
            out[key] = aggregate(group)
        except EmptyState:
            continue
    return out


def pooled_shares(records: Iterable[RoundRecord]) -> dict[str, StateShare]:
    """Per-state shares pooled over all rounds."""
    by_state: dict[str, list[RoundRecord]] = defaultdict(list)
    for record in records:
        by_state[record.state].append(record)
    return {state: aggregate(group) for state, group in sorted(by_state.items())}


def reliability_by_state(
    records: Iterable[RoundRecord],
) -> dict[str, ReliabilityReport]:
    """Reliability of each state's per-round normalized share."""
    series: dict[str, list[float]] = defaultdict(list)
    for (round_index, state), share in sorted(round_shares(records).items()):
        series[state].append(share.dem_norm)
    return {state: reliability(state, values) for state, values in sorted(series.items())}
