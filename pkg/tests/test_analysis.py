import math
import random

import pytest

from icsm.analysis import (
    BenchmarkSpec,
    ContingencyTable,
    DegenerateShares,
    EmptyCorpus,
    EmptyState,
    InsufficientRounds,
    MismatchedStates,
    StateShare,
    ZeroMargin,
    aggregate,
    binary_support,
    build_contingency,
    chi_square,
    compare_configs,
    cramers_v,
    explanatory_weight,
    load_benchmark,
    margin_of_error,
    pooled_shares,
    reliability,
    round_shares,
    share_from_raw,
    support_tie,
    validity,
    winner_call,
)
from icsm.experiment import RoundRecord
from icsm.prompting import VoteResponse

from .oracles import chi_square_oracle, cramers_v_oracle


def record(state, agent_id, p_dem, p_rep, p_other, reason="", round_index=0, error=None):
    parsed = None
    if error is None:
        parsed = VoteResponse(p_dem=p_dem, p_rep=p_rep, p_other=p_other, reason=reason)
    return RoundRecord(
        experiment_id="t",
        round_index=round_index,
        agent_id=agent_id,
        state=state,
        prompt_digest="d",
        model_id="m",
        timestamp="2024-01-01T00:00:00+00:00",
        raw_text="",
        parsed=parsed,
        parse_error=error,
    )


# --- aggregation ---


def test_aggregate_symmetric_agents():
    records = [record("S", i, 0.5, 0.5, 0.0) for i in range(4)]
    assert aggregate(records).dem_norm == pytest.approx(0.5)


def test_aggregate_two_party_normalization():
    share = share_from_raw("S", 0.62, 0.31, 0.07)
    assert share.dem_norm == pytest.approx(0.62 / 0.93, abs=1e-6)
    assert share.dem_norm + share.rep_norm == pytest.approx(1.0, abs=1e-9)


def test_aggregate_degenerate_two_party_mass():
    with pytest.raises(DegenerateShares):
        share_from_raw("S", 0.0, 0.0, 1.0)


def test_aggregate_requires_parsed_records():
    with pytest.raises(EmptyState):
        aggregate([record("S", 0, 0, 0, 0, error="boom")])


def test_aggregate_skips_parse_failures():
    records = [
        record("S", 0, 0.6, 0.3, 0.1),
        record("S", 1, 0, 0, 0, error="boom"),
    ]
    share = aggregate(records)
    assert share.raw_dem == pytest.approx(0.6)


def test_aggregate_rejects_mixed_states():
    with pytest.raises(ValueError):
        aggregate([record("S", 0, 0.5, 0.4, 0.1), record("T", 0, 0.5, 0.4, 0.1)])


# --- margins and winner calls ---


def fixed_share(state, dem_norm):
    return share_from_raw(state, dem_norm * 0.95, (1 - dem_norm) * 0.95, 0.05)


def test_margin_published_round_one_california():
    assert round(margin_of_error(fixed_share("California", 0.7050), 0.6492), 3) == 0.056


def test_margin_published_round_two_pennsylvania():
    assert round(margin_of_error(fixed_share("Pennsylvania", 0.5401), 0.5061), 3) == 0.034


def test_margin_of_equal_shares_is_zero():
    assert margin_of_error(fixed_share("S", 0.5061), 0.5061) == pytest.approx(0.0, abs=1e-12)


def test_margin_symmetry():
    share = fixed_share("S", 0.61)
    assert margin_of_error(share, 0.5) == pytest.approx(
        margin_of_error(fixed_share("S", 0.5), 0.61)
    )


def test_winner_call_wisconsin_round_one_incorrect():
    assert winner_call(fixed_share("Wisconsin", 0.4971), 0.5030) == "incorrect"


def test_winner_call_wisconsin_round_two_correct():
    assert winner_call(fixed_share("Wisconsin", 0.5165), 0.5030) == "correct"


def test_winner_call_republican_side_correct():
    assert winner_call(fixed_share("Texas", 0.4359), 0.4715) == "correct"


def test_winner_call_exact_half_is_no_call():
    assert winner_call(fixed_share("S", 0.5), 0.5030) == "no_call"
    assert winner_call(fixed_share("S", 0.51), 0.5) == "no_call"


# --- reliability ---


def test_reliability_zero_variance():
    report = reliability("Michigan", [0.479] * 30)
    assert report.sd == 0.0
    assert (report.ci_low, report.ci_high) == (0.479, 0.479)
    assert report.max_fluctuation == 0.0


def test_reliability_two_round_hand_computation():
    report = reliability("S", [0.48, 0.50])
    assert report.mean == pytest.approx(0.49)
    assert report.sd == pytest.approx(0.014142, abs=1e-6)
    assert report.ci_low == pytest.approx(0.47040, abs=1e-5)
    assert report.ci_high == pytest.approx(0.50960, abs=1e-5)
    assert report.max_fluctuation == pytest.approx(0.02)


def test_reliability_ci_width_formula_is_exact():
    values = [0.4, 0.5, 0.45, 0.52, 0.48]
    report = reliability("S", values)
    width = report.ci_high - report.ci_low
    assert width == pytest.approx(2 * 1.96 * report.sd / math.sqrt(len(values)), abs=1e-15)


def test_reliability_needs_two_rounds():
    with pytest.raises(InsufficientRounds):
        reliability("S", [0.5])


def test_reliability_fluctuation_scale_with_tuned_mock(scenario):
    # jitter tuned so 30 rounds over 100 agents stay within a 0.002 band
    from icsm.backend import ParametricWeights, parametric_mock_response
    from icsm.population import AgentProfile, derive_seed
    from icsm.prompting import parse_response

    weights = ParametricWeights.from_mapping(
        {"base": 0.05, "jitter": 0.015, "p_other": [0.02, 0.08], "offsets": {}}
    )
    profiles = [
        AgentProfile(agent_id=i, state="S", attributes={"tag": f"t{i}"})
        for i in range(100)
    ]
    series = []
    for round_index in range(30):
        dem = rep = other = 0.0
        for profile in profiles:
            seed = derive_seed(11, str(round_index), profile.attributes["tag"])
            vote = parse_response(
                parametric_mock_response(profile, weights, seed, scenario), scenario
            )
            dem += vote.p_dem
            rep += vote.p_rep
            other += vote.p_other
        n = len(profiles)
        series.append(share_from_raw("S", dem / n, rep / n, other / n).dem_norm)
    report = reliability("S", series)
    assert report.max_fluctuation <= 0.002
    assert report.ci_low <= report.mean <= report.ci_high


# --- validity ---


def test_validity_threshold_matches_published_range():
    benchmark = BenchmarkSpec(
        actuals={"S": 0.5},
        benchmark_errors=(0.0655, 0.0812, 0.0151, 0.0234, 0.0321, 0.0339),
        inflation_factor=0.65,
    )
    report = validity({"S": fixed_share("S", 0.52)}, benchmark)
    assert round(report.threshold_low, 4) == 0.0249
    assert round(report.threshold_high, 4) == 0.1340


def test_validity_zero_inflation_keeps_range():
    benchmark = BenchmarkSpec(
        actuals={"S": 0.5}, benchmark_errors=(0.01, 0.08), inflation_factor=0.0
    )
    report = validity({"S": fixed_share("S", 0.52)}, benchmark)
    assert report.threshold_low == pytest.approx(0.01)
    assert report.threshold_high == pytest.approx(0.08)


def test_validity_single_error_inflates():
    benchmark = BenchmarkSpec(
        actuals={"S": 0.5}, benchmark_errors=(0.01,), inflation_factor=0.65
    )
    report = validity({"S": fixed_share("S", 0.5001)}, benchmark)
    assert report.threshold_high == pytest.approx(0.0165)


def test_validity_pass_requires_strict_inequality():
    benchmark = BenchmarkSpec(
        actuals={"S": 0.5}, benchmark_errors=(0.02,), inflation_factor=0.0
    )
    passing = validity({"S": fixed_share("S", 0.515)}, benchmark)
    # margin lands exactly on the bound (0.52 + 0.48 is exact in floats)
    failing = validity({"S": share_from_raw("S", 0.52, 0.48, 0.0)}, benchmark)
    assert passing.passed
    assert not failing.passed


def test_validity_missing_actual_is_mismatch():
    benchmark = BenchmarkSpec(actuals={"T": 0.5}, benchmark_errors=(0.02,))
    with pytest.raises(MismatchedStates):
        validity({"S": fixed_share("S", 0.5)}, benchmark)


def test_load_benchmark(tmp_path):
    path = tmp_path / "bench.csv"
    path.write_text(
        "state,actual_dem_norm,ref_state,ref_error\n"
        "Alpha,0.61,Ref1,0.02\n"
        "Beta,0.49,Ref2,0.05\n"
        "Gamma,0.52,,\n"
    )
    spec = load_benchmark(path, inflation_factor=0.5)
    assert spec.actuals == {"Alpha": 0.61, "Beta": 0.49, "Gamma": 0.52}
    assert spec.benchmark_errors == (0.02, 0.05)
    assert spec.inflation_factor == 0.5


# --- explanatory weight ---


def test_explanatory_weight_counts_posterior_mentions():
    records = []
    for i in range(10):
        if i < 3:
            reason = "I am a graduate. My education shapes my vote."
        else:
            reason = "I am a graduate. The economy matters most."
        records.append(record("S", i, 0.6, 0.3, 0.1, reason=reason))
    report = explanatory_weight(records, "education")
    assert report.rows[0].proportion == 3 / 10
    assert report.overall_mean == 3 / 10


def test_explanatory_weight_ignores_first_sentence_mentions():
    records = [
        record("S", 0, 0.6, 0.3, 0.1, reason="My education defines me. Taxes decide it.")
    ]
    report = explanatory_weight(records, "education")
    assert report.rows[0].proportion == 0.0


def test_explanatory_weight_whole_word_only():
    records = [
        record("S", 0, 0.6, 0.3, 0.1, reason="Intro. Educational funding is key."),
        record("S", 1, 0.6, 0.3, 0.1, reason="Intro. EDUCATION is key."),
    ]
    report = explanatory_weight(records, "education")
    assert report.rows[0].mentions == 1


def test_explanatory_weight_averages_across_states():
    records = [
        record("A", 0, 0.6, 0.3, 0.1, reason="Hi. education yes."),
        record("A", 1, 0.6, 0.3, 0.1, reason="Hi. no mention."),
        record("B", 0, 0.6, 0.3, 0.1, reason="Hi. education yes."),
    ]
    report = explanatory_weight(records, "education")
    by_state = {r.state: r.proportion for r in report.rows}
    assert by_state == {"A": 0.5, "B": 1.0}
    assert report.overall_mean == pytest.approx(0.75)


def test_explanatory_weight_empty_corpus():
    with pytest.raises(EmptyCorpus):
        explanatory_weight([record("S", 0, 0, 0, 0, error="x")], "education")


def test_adding_nonmatching_response_never_raises_proportion():
    base = [record("S", i, 0.6, 0.3, 0.1, reason="Hi. education.") for i in range(3)]
    extra = base + [record("S", 3, 0.6, 0.3, 0.1, reason="Hi. economy.")]
    before = explanatory_weight(base, "education").rows[0].proportion
    after = explanatory_weight(extra, "education").rows[0].proportion
    assert after <= before


# --- binary support ---


def test_binary_support_sides():
    assert binary_support(VoteResponse(0.6, 0.3, 0.1)) == "Democrat"
    assert binary_support(VoteResponse(0.3, 0.6, 0.1)) == "Republican"


def test_binary_support_tie_goes_republican_with_flag():
    tied = VoteResponse(0.45, 0.45, 0.10)
    assert binary_support(tied) == "Republican"
    assert support_tie(tied)
    assert not support_tie(VoteResponse(0.6, 0.3, 0.1))


# --- contingency tables and Cramer's V ---


def test_cramers_v_perfect_association():
    table = ContingencyTable(("a", "b"), ("x", "y"), ((10, 0), (0, 10)))
    assert cramers_v(table) == pytest.approx(1.0, abs=1e-12)


def test_cramers_v_exact_independence():
    table = ContingencyTable(("a", "b"), ("x", "y"), ((5, 5), (5, 5)))
    assert cramers_v(table) == pytest.approx(0.0, abs=1e-12)


def test_cramers_v_hand_computed_case():
    table = ContingencyTable(("a", "b"), ("x", "y"), ((10, 20), (20, 10)))
    assert chi_square(table) == pytest.approx(20 / 3, abs=1e-12)
    assert cramers_v(table) == pytest.approx(1 / 3, abs=1e-12)


def test_cramers_v_zero_margin():
    table = ContingencyTable(("a", "b"), ("x", "y"), ((0, 10), (0, 10)))
    with pytest.raises(ZeroMargin):
        cramers_v(table)


def test_cramers_v_matches_oracle_on_random_tables():
    rng = random.Random(7)
    for _ in range(200):
        rows = rng.randint(2, 4)
        cols = rng.randint(2, 4)
        counts = tuple(
            tuple(rng.randint(0, 50) for _ in range(cols)) for _ in range(rows)
        )
        if any(sum(r) == 0 for r in counts):
            continue
        if any(sum(c[j] for c in counts) == 0 for j in range(cols)):
            continue
        table = ContingencyTable(
            tuple(f"r{i}" for i in range(rows)),
            tuple(f"c{j}" for j in range(cols)),
            counts,
        )
        v = cramers_v(table)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(cramers_v_oracle(counts), abs=1e-12)
        assert chi_square(table) == pytest.approx(chi_square_oracle(counts), abs=1e-9)


def test_build_contingency_counts_pairs():
    pairs = [("College", "Democrat")] * 3 + [("College", "Republican")] + [
        ("High School", "Republican")
    ] * 2
    table = build_contingency(pairs)
    assert table.row_labels == ("College", "High School")
    assert table.counts == ((3, 1), (0, 2))


def test_contingency_table_validation():
    with pytest.raises(ValueError):
        ContingencyTable(("a",), ("x", "y"), ((1, 2),))
    with pytest.raises(ValueError):
        ContingencyTable(("a", "b"), ("x", "y"), ((1, 2), (3,)))
    with pytest.raises(ValueError):
        ContingencyTable(("a", "b"), ("x", "y"), ((0, 0), (0, 0)))


# --- configuration comparison ---


def benchmark_for(states):
    return BenchmarkSpec(
        actuals={s: a for s, a in states.items()},
        benchmark_errors=(0.0151, 0.0812),
    )


def reports_from(shares_a, shares_b, actuals):
    benchmark = benchmark_for(actuals)
    report_a = validity({s: fixed_share(s, v) for s, v in shares_a.items()}, benchmark)
    report_b = validity({s: fixed_share(s, v) for s, v in shares_b.items()}, benchmark)
    return report_a, report_b


def test_compare_improved_calls_is_validated():
    actuals = {"W": 0.503, "T": 0.4715}
    report_a, report_b = reports_from(
        {"W": 0.4971, "T": 0.4359}, {"W": 0.5165, "T": 0.4623}, actuals
    )
    result = compare_configs(report_a, report_b)
    assert result.correct_a == 1 and result.correct_b == 2
    assert result.validated


def test_compare_identical_reports_not_validated():
    actuals = {"W": 0.503}
    report_a, report_b = reports_from({"W": 0.52}, {"W": 0.52}, actuals)
    result = compare_configs(report_a, report_b)
    assert not result.validated


def test_compare_equal_calls_error_up_not_validated():
    actuals = {"W": 0.503}
    report_a, report_b = reports_from({"W": 0.51}, {"W": 0.53}, actuals)
    result = compare_configs(report_a, report_b)
    assert result.correct_a == result.correct_b
    assert not result.validated


def test_compare_equal_calls_error_down_validated():
    actuals = {"W": 0.503}
    report_a, report_b = reports_from({"W": 0.53}, {"W": 0.51}, actuals)
    assert compare_configs(report_a, report_b).validated


def test_compare_mismatched_states():
    report_a, _ = reports_from({"W": 0.51}, {"W": 0.51}, {"W": 0.503})
    _, report_b = reports_from({"T": 0.51}, {"T": 0.51}, {"T": 0.503})
    with pytest.raises(MismatchedStates):
        compare_configs(report_a, report_b)


def test_compare_mismatched_actuals():
    benchmark_a = BenchmarkSpec(actuals={"W": 0.503}, benchmark_errors=(0.05,))
    benchmark_b = BenchmarkSpec(actuals={"W": 0.51}, benchmark_errors=(0.05,))
    report_a = validity({"W": fixed_share("W", 0.52)}, benchmark_a)
    report_b = validity({"W": fixed_share("W", 0.52)}, benchmark_b)
    with pytest.raises(MismatchedStates):
        compare_configs(report_a, report_b)


# --- grouping helpers ---


def test_round_and_pooled_shares():
    records = [
        record("A", 0, 0.6, 0.3, 0.1, round_index=0),
        record("A", 0, 0.4, 0.5, 0.1, round_index=1),
        record("B", 0, 0.5, 0.4, 0.1, round_index=0),
    ]
    per_round = round_shares(records)
    assert set(per_round) == {(0, "A"), (1, "A"), (0, "B")}
    pooled = pooled_shares(records)
    assert pooled["A"].raw_dem == pytest.approx(0.5)


def test_benchmark_spec_validation():
    with pytest.raises(ValueError):
        BenchmarkSpec(actuals={"S": 1.5}, benchmark_errors=(0.1,))
    with pytest.raises(ValueError):
        BenchmarkSpec(actuals={"S": 0.5}, benchmark_errors=(-0.1,))
