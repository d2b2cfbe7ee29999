"""Census marginals ingestion and deterministic cohort synthesis.

The input is a CSV of per-state category proportions (one row per
state/variable/category). Cohorts are built so that, for every variable
independently, the per-category head-counts are the largest-remainder
apportionment of size * proportion; the columns are then combined by
independently seeded shuffles, i.e. variables are treated as independent
(the marginals carry no joint information).

Everything here is pure and deterministic: the same (marginals, n, seed)
always produces the same cohort, byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IcsmError

PROPORTION_SUM_TOL = 1e-9
# Snap n*p to the nearest integer when it is this close; guards against
# 0.3 * 10 == 2.9999999999999996 style misfloors.
_SNAP_EPS = 1e-9


class CensusError(IcsmError):
    """Base class for census ingestion problems."""


class CensusFormatError(CensusError):
    """Structurally invalid census file (header, values, unknown labels)."""


class MissingCategory(CensusError):
    """A declared category has no row for some state."""


class NonPositiveTotal(CensusError):
    """All proportions for a (state, variable) pair are zero."""


class DuplicateRow(CensusError):
    """The same (state, variable, category) appears twice."""


class InconsistentVariables(CensusError):
    """Marginals do not match the configured variable set."""


@dataclass(frozen=True)
class CategoricalVariable:
    """An identity variable with a fixed, ordered category set.

    The ordering matters: it is the canonical order used for apportionment
    tie-breaking, so it must not depend on input row order.
    """

    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError(f"variable {self.name!r} has no categories")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"variable {self.name!r} has duplicate categories")


@dataclass(frozen=True)
class MarginalDistribution:
    """Renormalized per-category proportions of one variable in one state."""

    state: str
    variable: CategoricalVariable
    proportions: Mapping[str, float]

    def vector(self) -> list[float]:
        """Proportions in declared category order."""
        return [self.proportions[c] for c in self.variable.categories]


@dataclass(frozen=True)
class AgentProfile:
    """One silicon respondent: a state plus one category per variable."""

    agent_id: int
    state: str
    attributes: Mapping[str, str]


@dataclass(frozen=True)
class Cohort:
    """An immutable per-state collection of agent profiles."""

    state: str
    size: int
    agents: tuple[AgentProfile, ...]
    seed: int
    source_digest: str
    variables: tuple[CategoricalVariable, ...] = field(default=())


# The identity variables covered by the bundled six-state census extract.
# Category order follows the source table and is significant (tie-breaking).
DEFAULT_VARIABLES: tuple[CategoricalVariable, ...] = (
    CategoricalVariable("race", ("White", "Black", "Asian", "Other")),
    CategoricalVariable("gender", ("Male", "Female")),
    CategoricalVariable(
        "age",
        (
            "Aged 18-24",
            "Aged 25-34",
            "Aged 35-44",
            "Aged 45-54",
            "Aged 55-64",
            "Aged 65-74",
            "Aged 75 and Older",
        ),
    ),
    CategoricalVariable(
        "occupation",
        (
            "Not in Labor Force",
            "Management, business, science, and arts",
            "Sales and office",
            "Production, transportation, and material moving",
            "Services",
            "Natural resources, construction, and maintenance",
        ),
    ),
    CategoricalVariable(
        "education",
        (
            "Less than High School",
            "High School",
            "Associate's Degree",
            "Bachelor's Degree",
            "Master's Degree",
        ),
    ),
)


def load_marginals(
    source: str | Path,
    variables: Sequence[CategoricalVariable] | None = None,
) -> list[MarginalDistribution]:
    """Read a census CSV into renormalized marginal distributions.

    The file must have a ``state,variable,category,proportion`` header.
    Proportions are renormalized to sum to 1 per (state, variable) because
    published columns often omit residual categories.

    When ``variables`` is given it is the authoritative schema: category
    order comes from it (not from row order, so reordering the file rows
    changes nothing) and every declared category must be present for every
    state. When omitted, the schema is inferred with categories in first
    appearance order.
    """
    path = Path(source)
    rows: list[tuple[str, str, str, float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"state", "variable", "category", "proportion"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CensusFormatError(
                f"{path}: header must contain state,variable,category,proportion"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                prop = float(row["proportion"])
            except (TypeError, ValueError):
                raise CensusFormatError(
                    f"{path}:{lineno}: proportion {row['proportion']!r} is not a number"
                ) from None
            if not math.isfinite(prop) or prop < 0:
                raise CensusFormatError(
                    f"{path}:{lineno}: proportion must be finite and non-negative"
                )
            rows.append((row["state"].strip(), row["variable"].strip(),
                         row["category"].strip(), prop))

    if variables is None:
        schema = _infer_schema(rows)
    else:
        schema = {v.name: v for v in variables}

    seen: set[tuple[str, str, str]] = set()
    table: dict[tuple[str, str], dict[str, float]] = {}
    states: list[str] = []
    for state, var_name, category, prop in rows:
        if var_name not in schema:
            raise CensusFormatError(
                f"{path}: variable {var_name!r} is not in the configured schema"
            )
        if category not in schema[var_name].categories:
            raise CensusFormatError(
                f"{path}: {category!r} is not a declared category of {var_name!r}"
            )
        key = (state, var_name, category)
        if key in seen:
            raise DuplicateRow(f"{path}: duplicate row for {key}")
        seen.add(key)
        table.setdefault((state, var_name), {})[category] = prop
        if state not in states:
            states.append(state)

    out: list[MarginalDistribution] = []
    for state in states:
        for var in schema.values():
            cell = table.get((state, var.name), {})
            missing = [c for c in var.categories if c not in cell]
            if missing:
                raise MissingCategory(
                    f"state {state!r}, variable {var.name!r}: missing {missing}"
                )
            # sum in declared order so row order cannot perturb the floats
            total = sum(cell[c] for c in var.categories)
            if total <= 0:
                raise NonPositiveTotal(
                    f"state {state!r}, variable {var.name!r}: proportions sum to zero"
                )
            renorm = {c: cell[c] / total for c in var.categories}
            out.append(MarginalDistribution(state, var, renorm))
    return out


def _infer_schema(
    rows: Iterable[tuple[str, str, str, float]]
) -> dict[str, CategoricalVariable]:
    order: dict[str, list[str]] = {}
    for _, var_name, category, _ in rows:
        cats = order.setdefault(var_name, [])
        if category not in cats:
            cats.append(category)
    return {
        name: CategoricalVariable(name, tuple(cats)) for name, cats in order.items()
    }


def apportion(proportions: Sequence[float], n: int) -> list[int]:
    """Largest-remainder (Hamilton) apportionment of n units.

    Each count is floor(n * p_i) plus one unit for the largest fractional
    remainders until the counts sum to n; remainder ties go to the earlier
    category. Guarantees |count_i - n*p_i| < 1.
    """
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    if any(p < 0 for p in proportions):
        raise ValueError("proportions must be non-negative")
    if abs(sum(proportions) - 1.0) > PROPORTION_SUM_TOL:
        raise ValueError(f"proportions must sum to 1, got {sum(proportions)!r}")

    base: list[int] = []
    remainders: list[float] = []
    for p in proportions:
        exact = n * p
        nearest = round(exact)
        if abs(exact - nearest) < _SNAP_EPS:
            exact = float(nearest)
        whole = int(math.floor(exact))
        base.append(whole)
        remainders.append(exact - whole)

    leftover = n - sum(base)
    by_remainder = sorted(range(len(base)), key=lambda i: (-remainders[i], i))
    for i in by_remainder[:leftover]:
        base[i] += 1
    return base


def derive_seed(root_seed: int, *parts: str) -> int:
    """Stable 64-bit sub-seed from a root seed and string labels."""
    payload = "\x1f".join([str(root_seed), *parts]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def marginals_digest(marginals: Sequence[MarginalDistribution]) -> str:
    """Content hash of a state's marginals, invariant to input row order."""
    payload = {
        m.variable.name: {
            "categories": list(m.variable.categories),
            "proportions": [m.proportions[c] for c in m.variable.categories],
        }
        for m in marginals
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def synthesize_cohort(
    marginals: Sequence[MarginalDistribution],
    n: int,
    seed: int,
    variables: Sequence[CategoricalVariable] | None = None,
) -> Cohort:
    """Build a cohort of n agents for one state from its marginals.

    Per variable, category counts follow apportion(); assignments across
    variables are combined by independently seeded shuffles, so variables
    are independent by construction. Pure function of (marginals, n, seed).
    """
    if not marginals:
        raise InconsistentVariables("no marginals supplied")
    state = marginals[0].state
    if any(m.state != state for m in marginals):
        raise InconsistentVariables("marginals mix multiple states")
    by_name = {m.variable.name: m for m in marginals}
    if len(by_name) != len(marginals):
        raise InconsistentVariables(f"duplicate variable marginals for {state!r}")

    if variables is not None:
        configured = {v.name for v in variables}
        unknown = sorted(set(by_name) - configured)
        if unknown:
            raise InconsistentVariables(f"unknown variables in marginals: {unknown}")
        absent = sorted(configured - set(by_name))
        if absent:
            raise InconsistentVariables(f"state {state!r} lacks marginals for: {absent}")
        ordered = [by_name[v.name] for v in variables]
    else:
        ordered = list(marginals)

    columns: dict[str, list[str]] = {}
    for m in ordered:
        counts = apportion(m.vector(), n)
        pool = [c for c, k in zip(m.variable.categories, counts) for _ in range(k)]
        rng = np.random.default_rng(derive_seed(seed, state, m.variable.name))
        perm = rng.permutation(n)
        columns[m.variable.name] = [pool[j] for j in perm]

    agents = tuple(
        AgentProfile(
            agent_id=i,
            state=state,
            attributes={m.variable.name: columns[m.variable.name][i] for m in ordered},
        )
        for i in range(n)
    )
    return Cohort(
        state=state,
        size=n,
        agents=agents,
        seed=seed,
        source_digest=marginals_digest(ordered),
        variables=tuple(m.variable for m in ordered),
    )


def attribute_counts(cohort: Cohort, variable: str) -> Counter:
    """Per-category head-count of one variable across the cohort."""
    return Counter(agent.attributes[variable] for agent in cohort.agents)


def cohort_to_json(cohort: Cohort) -> str:
    """Serialize a cohort to its canonical JSON document."""
    doc = {
        "state": cohort.state,
        "size": cohort.size,
        "seed": cohort.seed,
        "source_digest": cohort.source_digest,
        "variables": [
            {"name": v.name, "categories": list(v.categories)}
            for v in cohort.variables
        ],
        "agents": [
            {
                "agent_id": a.agent_id,
                "state": a.state,
                "attributes": dict(a.attributes),
            }
            for a in cohort.agents
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def cohort_from_json(text: str) -> Cohort:
    """Parse a cohort JSON document back into a Cohort."""
    doc = json.loads(text)
    variables = tuple(
        CategoricalVariable(v["name"], tuple(v["categories"]))
        for v in doc.get("variables", [])
    )
    agents = tuple(
        AgentProfile(a["agent_id"], a["state"], a["attributes"])
        for a in doc["agents"]
    )
    return Cohort(
        state=doc["state"],
        size=doc["size"],
        agents=agents,
        seed=doc["seed"],
        source_digest=doc["source_digest"],
        variables=variables,
    )


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    Path(path).write_text(cohort_to_json(cohort), encoding="utf-8")


def read_cohort(path: str | Path) -> Cohort:
    return cohort_from_json(Path(path).read_text(encoding="utf-8"))
