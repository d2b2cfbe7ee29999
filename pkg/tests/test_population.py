import random

import pytest

from icsm.population import (
    DEFAULT_VARIABLES,
    CategoricalVariable,
    CensusFormatError,
    DuplicateRow,
    InconsistentVariables,
    MissingCategory,
    NonPositiveTotal,
    apportion,
    attribute_counts,
    cohort_from_json,
    cohort_to_json,
    load_marginals,
    synthesize_cohort,
)

from .oracles import largest_remainder_oracle

TINY_CENSUS = """state,variable,category,proportion
Alpha,race,White,0.594
Alpha,race,Black,0.137
Alpha,race,Asian,0.140
Alpha,race,Other,0.057
Alpha,gender,Male,0.497
Alpha,gender,Female,0.503
Beta,race,White,0.6
Beta,race,Black,0.2
Beta,race,Asian,0.1
Beta,race,Other,0.1
Beta,gender,Male,0.5
Beta,gender,Female,0.5
"""


def write_census(tmp_path, text=TINY_CENSUS, name="census.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def by_key(marginals):
    return {(m.state, m.variable.name): m for m in marginals}


# --- load_marginals ---


def test_load_renormalizes_underfull_column(tmp_path):
    marginals = by_key(load_marginals(write_census(tmp_path)))
    race = marginals[("Alpha", "race")]
    total_before = 0.594 + 0.137 + 0.140 + 0.057  # 0.928
    assert sum(race.proportions.values()) == pytest.approx(1.0, abs=1e-9)
    assert race.proportions["White"] == pytest.approx(0.594 / total_before)


def test_load_keeps_full_column_unchanged(tmp_path):
    marginals = by_key(load_marginals(write_census(tmp_path)))
    gender = marginals[("Alpha", "gender")]
    assert gender.proportions["Male"] == pytest.approx(0.497, abs=1e-9)
    assert gender.proportions["Female"] == pytest.approx(0.503, abs=1e-9)


def test_load_rejects_all_zero_variable(tmp_path):
    text = "state,variable,category,proportion\nAlpha,race,White,0\nAlpha,race,Black,0\n"
    with pytest.raises(NonPositiveTotal):
        load_marginals(write_census(tmp_path, text))


def test_load_rejects_duplicate_row(tmp_path):
    text = TINY_CENSUS + "Alpha,race,White,0.1\n"
    with pytest.raises(DuplicateRow):
        load_marginals(write_census(tmp_path, text))


def test_load_rejects_negative_proportion(tmp_path):
    text = "state,variable,category,proportion\nAlpha,race,White,-0.1\n"
    with pytest.raises(CensusFormatError):
        load_marginals(write_census(tmp_path, text))


def test_load_rejects_bad_header(tmp_path):
    with pytest.raises(CensusFormatError):
        load_marginals(write_census(tmp_path, "a,b\n1,2\n"))


def test_load_missing_declared_category(tmp_path):
    schema = [CategoricalVariable("race", ("White", "Black", "Asian", "Other", "Mixed"))]
    text = "\n".join(
        line for line in TINY_CENSUS.splitlines() if not line.startswith("Alpha,gender")
        and not line.startswith("Beta,gender")
    )
    with pytest.raises(MissingCategory):
        load_marginals(write_census(tmp_path, text + "\n"), schema)


def test_load_rejects_undeclared_category(tmp_path):
    schema = [CategoricalVariable("race", ("White", "Black"))]
    with pytest.raises(CensusFormatError):
        load_marginals(write_census(tmp_path), schema)


def test_load_category_order_comes_from_schema_not_file(tmp_path):
    lines = TINY_CENSUS.strip().splitlines()
    shuffled = [lines[0]] + list(reversed(lines[1:]))
    schema = [
        CategoricalVariable("race", ("White", "Black", "Asian", "Other")),
        CategoricalVariable("gender", ("Male", "Female")),
    ]
    straight = by_key(load_marginals(write_census(tmp_path, TINY_CENSUS), schema))
    scrambled = by_key(
        load_marginals(write_census(tmp_path, "\n".join(shuffled) + "\n", "b.csv"), schema)
    )
    for key in straight:
        assert straight[key].variable.categories == scrambled[key].variable.categories
        assert straight[key].proportions == scrambled[key].proportions


# --- apportion ---


def test_apportion_exact_multiples():
    assert apportion([0.5, 0.3, 0.2], 10) == [5, 3, 2]


def test_apportion_thirds_tie_breaks_to_first_category():
    assert apportion([1 / 3, 1 / 3, 1 / 3], 10) == [4, 3, 3]


def test_apportion_single_category():
    assert apportion([1.0], 7) == [7]


def test_apportion_rejects_bad_input():
    with pytest.raises(ValueError):
        apportion([0.5, 0.5], 0)
    with pytest.raises(ValueError):
        apportion([0.6, 0.6], 10)
    with pytest.raises(ValueError):
        apportion([1.2, -0.2], 10)


def test_apportion_matches_bundled_census_within_one(census_csv):
    for m in load_marginals(census_csv, DEFAULT_VARIABLES):
        counts = apportion(m.vector(), 1000)
        assert sum(counts) == 1000
        for count, p in zip(counts, m.vector()):
            assert abs(count - 1000 * p) < 1.0


def test_apportion_agrees_with_brute_force_oracle():
    rng = random.Random(1234)
    for _ in range(300):
        k = rng.randint(1, 10)
        weights = [rng.random() for _ in range(k)]
        total = sum(weights)
        simplex = [w / total for w in weights]
        n = rng.randint(1, 10_000)
        assert apportion(simplex, n) == largest_remainder_oracle(simplex, n)


def test_apportion_exactness_up_to_large_n():
    rng = random.Random(99)
    weights = [rng.random() for _ in range(6)]
    simplex = [w / sum(weights) for w in weights]
    counts = apportion(simplex, 10**6)
    assert sum(counts) == 10**6
    for count, p in zip(counts, simplex):
        assert abs(count - 10**6 * p) < 1.0


# --- synthesize_cohort ---


def alpha_marginals(tmp_path):
    return [m for m in load_marginals(write_census(tmp_path)) if m.state == "Alpha"]


def test_synthesize_is_deterministic(tmp_path):
    marginals = alpha_marginals(tmp_path)
    a = synthesize_cohort(marginals, 50, seed=7)
    b = synthesize_cohort(marginals, 50, seed=7)
    assert cohort_to_json(a) == cohort_to_json(b)


def test_synthesize_seed_changes_assignments(tmp_path):
    marginals = alpha_marginals(tmp_path)
    a = synthesize_cohort(marginals, 200, seed=7)
    b = synthesize_cohort(marginals, 200, seed=8)
    assert cohort_to_json(a) != cohort_to_json(b)
    # same marginals, so the head-counts still match exactly
    assert attribute_counts(a, "race") == attribute_counts(b, "race")


def test_synthesize_marginal_fidelity(tmp_path):
    n = 173
    marginals = alpha_marginals(tmp_path)
    cohort = synthesize_cohort(marginals, n, seed=3)
    for m in marginals:
        counts = attribute_counts(cohort, m.variable.name)
        for category, p in m.proportions.items():
            assert abs(counts.get(category, 0) / n - p) <= 1 / n + 1e-12


def test_synthesize_row_order_invariance(tmp_path):
    schema = [
        CategoricalVariable("race", ("White", "Black", "Asian", "Other")),
        CategoricalVariable("gender", ("Male", "Female")),
    ]
    lines = TINY_CENSUS.strip().splitlines()
    shuffled = [lines[0]] + list(reversed(lines[1:]))
    straight = load_marginals(write_census(tmp_path, TINY_CENSUS), schema)
    scrambled = load_marginals(
        write_census(tmp_path, "\n".join(shuffled) + "\n", "b.csv"), schema
    )
    cohort_a = synthesize_cohort(
        [m for m in straight if m.state == "Alpha"], 80, seed=5, variables=schema
    )
    cohort_b = synthesize_cohort(
        [m for m in scrambled if m.state == "Alpha"], 80, seed=5, variables=schema
    )
    assert cohort_to_json(cohort_a) == cohort_to_json(cohort_b)


def test_synthesize_single_category_variable():
    var = CategoricalVariable("registered", ("Yes",))
    from icsm.population import MarginalDistribution

    cohort = synthesize_cohort(
        [MarginalDistribution("Alpha", var, {"Yes": 1.0})], 12, seed=0
    )
    assert all(agent.attributes["registered"] == "Yes" for agent in cohort.agents)


def test_synthesize_agent_ids_are_dense(tmp_path):
    cohort = synthesize_cohort(alpha_marginals(tmp_path), 30, seed=1)
    assert [a.agent_id for a in cohort.agents] == list(range(30))
    assert all(a.state == "Alpha" for a in cohort.agents)


def test_synthesize_rejects_unknown_variables(tmp_path):
    marginals = alpha_marginals(tmp_path)
    schema = [CategoricalVariable("gender", ("Male", "Female"))]
    with pytest.raises(InconsistentVariables):
        synthesize_cohort(marginals, 10, seed=0, variables=schema)


def test_synthesize_rejects_mixed_states(tmp_path):
    marginals = load_marginals(write_census(tmp_path))
    with pytest.raises(InconsistentVariables):
        synthesize_cohort(marginals, 10, seed=0)


def test_cohort_json_round_trip(tmp_path):
    cohort = synthesize_cohort(alpha_marginals(tmp_path), 25, seed=11)
    again = cohort_from_json(cohort_to_json(cohort))
    assert cohort_to_json(again) == cohort_to_json(cohort)
