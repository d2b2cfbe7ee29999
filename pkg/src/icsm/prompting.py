"""Prompt rendering and model-response parsing.

A prompt has four sections (role, profile, requirement, response format)
assembled from plain-text templates with ``{placeholder}`` syntax. The
parser accepts arbitrary model output, extracts the first balanced-brace
JSON object, and validates the probability simplex.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import IcsmError
from .population import AgentProfile

SIMPLEX_TOL = 1e-9
# Sums this far from 1 are treated as routine drift and renormalized;
# anything further is a broken generation and rejected.
RENORM_BAND = (0.95, 1.05)

OTHER_KEY = "vote for another candidate or not vote at all"
REASON_KEY = "Reason"

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class UnboundPlaceholder(IcsmError):
    """A template placeholder has no value in the profile or scenario."""


class MalformedResponse(IcsmError):
    """Model output does not contain a valid probability response."""


@dataclass(frozen=True)
class Scenario:
    """The election being simulated, as presented to every agent."""

    election_name: str
    candidate_dem: str
    candidate_rep: str
    context_sentence: str

    def __post_init__(self):
        if not self.candidate_dem or not self.candidate_rep:
            raise ValueError("both candidate names must be non-empty")
        if self.candidate_dem == self.candidate_rep:
            raise ValueError("candidate names must be distinct")


@dataclass(frozen=True)
class VoteResponse:
    """Parsed model output: a probability simplex plus free-text reason."""

    p_dem: float
    p_rep: float
    p_other: float
    reason: str = ""
    renormalized: bool = False


@dataclass(frozen=True)
class PromptTemplate:
    """The four prompt sections; empty sections are omitted when rendering."""

    role_section: str
    profile_section: str
    requirement_section: str
    response_format_section: str = ""

    def sections(self) -> list[str]:
        return [
            s
            for s in (
                self.role_section,
                self.profile_section,
                self.requirement_section,
                self.response_format_section,
            )
            if s
        ]

    def placeholders(self) -> set[str]:
        names: set[str] = set()
        for section in self.sections():
            names.update(_PLACEHOLDER_RE.findall(section))
        return names

    def to_text(self) -> str:
        return "\n\n".join(self.sections()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        """Split a plain-text template on its `# <Section>` header lines."""
        sections: dict[str, list[str]] = {}
        current: list[str] | None = None
        for line in text.splitlines():
            if line.startswith("# "):
                current = sections.setdefault(line.strip(), [])
                current.append(line)
            elif current is not None:
                current.append(line)
        def grab(header: str) -> str:
            return "\n".join(sections.get(header, [])).strip()
        known = {"# Role", "# Profile", "# Requirement", "# Response Format"}
        unknown = set(sections) - known
        if unknown:
            raise ValueError(f"unknown template sections: {sorted(unknown)}")
        return cls(
            role_section=grab("# Role"),
            profile_section=grab("# Profile"),
            requirement_section=grab("# Requirement"),
            response_format_section=grab("# Response Format"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


ROLE_SECTION = (
    "# Role\n"
    "See yourself as a U.S. citizen with your personal details in Profile. "
    "Answer the following questions ONLY from the perspective of an ordinary "
    "voter and ONLY based on the information provided."
)

REQUIREMENT_SECTION = (
    "# Requirement\n"
    "{context_sentence}\n"
    "ONLY based on the profile and the information provided above, predict "
    "the probability that you would vote for each candidate as well as the "
    'probability that you would "vote for another candidate or not vote at '
    'all". Make sure the probabilities add up to 1.'
)

RESPONSE_FORMAT_SECTION = (
    "# Response Format\n"
    "Respond with a single JSON object and nothing else, in exactly this "
    "form:\n"
    "{\n"
    '"{candidate_rep}": probability of voting for {candidate_rep},\n'
    '"{candidate_dem}": probability of voting for {candidate_dem},\n'
    '"' + OTHER_KEY + '": probability of voting for another candidate or '
    "not voting at all,\n"
    '"Reason": "why you make such prediction"\n'
    "}"
)

# Profile line labels and their fixed display order.
PROFILE_LABELS: dict[str, str] = {
    "state": "State",
    "race": "Race",
    "gender": "Sex",
    "age": "Age",
    "occupation": "Occupation",
    "industry": "Industry",
    "education": "Educational Attainment",
}
_PROFILE_ORDER = list(PROFILE_LABELS)


def profile_section_for(variables: Sequence[str]) -> str:
    """Build the `# Profile` section for a set of enabled variables.

    Lines follow the canonical order (state first); variables without a
    known display label are appended afterwards, title-cased.
    """
    names = ["state"] + [v for v in variables if v != "state"]
    known = [v for v in _PROFILE_ORDER if v in names]
    extra = [v for v in names if v not in _PROFILE_ORDER]
    lines = ["# Profile"]
    for name in known + extra:
        label = PROFILE_LABELS.get(name, name.replace("_", " ").title())
        lines.append(f"- {label}: {{{name}}}")
    return "\n".join(lines)


def default_template(
    variables: Sequence[str], include_response_format: bool = True
) -> PromptTemplate:
    """The canonical zero-shot voting prompt for the given variables."""
    return PromptTemplate(
        role_section=ROLE_SECTION,
        profile_section=profile_section_for(variables),
        requirement_section=REQUIREMENT_SECTION,
        response_format_section=RESPONSE_FORMAT_SECTION if include_response_format else "",
    )


def check_template(template: PromptTemplate, variables: Sequence[str]) -> None:
    """Verify placeholders cover exactly the variables plus scenario fields."""
    scenario_fields = {
        "election_name", "candidate_dem", "candidate_rep", "context_sentence",
    }
    allowed = set(variables) | {"state"} | scenario_fields
    names = template.placeholders()
    unknown = names - allowed
    if unknown:
        raise UnboundPlaceholder(
            f"template references unavailable placeholders: {sorted(unknown)}"
        )
    missing = (set(variables) | {"state"}) - names
    if missing:
        raise ValueError(
            f"template does not render enabled variables: {sorted(missing)}"
        )


def render_prompt(
    profile: AgentProfile, scenario: Scenario, template: PromptTemplate
) -> str:
    """Fill a template from a profile and scenario; pure and total.

    Raises UnboundPlaceholder if the template references anything the
    profile and scenario do not provide.
    """
    bindings: dict[str, str] = {
        "state": profile.state,
        "election_name": scenario.election_name,
        "candidate_dem": scenario.candidate_dem,
        "candidate_rep": scenario.candidate_rep,
        "context_sentence": scenario.context_sentence,
    }
    bindings.update(profile.attributes)

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundPlaceholder(f"no value for placeholder {{{name}}}")
        return str(bindings[name])

    rendered = [_PLACEHOLDER_RE.sub(substitute, s) for s in template.sections()]
    return "\n\n".join(rendered) + "\n"


def _json_candidates(raw: str):
    """Yield balanced-brace substrings of raw, in order of opening brace."""
    starts = [i for i, ch in enumerate(raw) if ch == "{"]
    for start in starts:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(raw)):
            ch = raw[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield raw[start : i + 1]
                    break


def parse_response(raw: str, scenario: Scenario) -> VoteResponse:
    """Extract and validate a vote response from arbitrary model output.

    Takes the first balanced-brace JSON object in the text (models often
    wrap output in prose or markdown fences). Candidate keys are matched
    case-insensitively against the scenario names. A probability sum s with
    0.95 <= s <= 1.05 is renormalized to 1; anything further off is
    rejected as malformed.
    """
    obj = None
    for candidate in _json_candidates(raw):
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict):
            obj = parsed
            break
    if obj is None:
        raise MalformedResponse("no JSON object found in response")

    normalized = {str(k).strip().casefold(): v for k, v in obj.items()}

    def probability(key: str) -> float:
        folded = key.casefold()
        if folded not in normalized:
            raise MalformedResponse(f"response lacks a {key!r} field")
        value = normalized[folded]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedResponse(f"field {key!r} is not a number")
        if value < 0:
            raise MalformedResponse(f"field {key!r} is negative")
        return float(value)

    p_rep = probability(scenario.candidate_rep)
    p_dem = probability(scenario.candidate_dem)
    p_other = probability(OTHER_KEY)

    total = p_dem + p_rep + p_other
    renormalized = False
    if abs(total - 1.0) > SIMPLEX_TOL:
        lo, hi = RENORM_BAND
        if not (lo <= total <= hi):
            raise MalformedResponse(
                f"probabilities sum to {total:.6g}, outside [{lo}, {hi}]"
            )
        p_dem, p_rep, p_other = p_dem / total, p_rep / total, p_other / total
        renormalized = True

    reason = normalized.get(REASON_KEY.casefold(), "")
    return VoteResponse(
        p_dem=p_dem,
        p_rep=p_rep,
        p_other=p_other,
        reason=str(reason) if reason is not None else "",
        renormalized=renormalized,
    )


def format_response(vote: VoteResponse, scenario: Scenario) -> str:
    """Serialize a vote in the canonical response-format JSON layout."""
    doc = {
        scenario.candidate_rep: vote.p_rep,
        scenario.candidate_dem: vote.p_dem,
        OTHER_KEY: vote.p_other,
        REASON_KEY: vote.reason,
    }
    return json.dumps(doc, indent=2, ensure_ascii=False)


def first_sentence(reason: str) -> str:
    """Prefix up to the first '.', '!' or '?' followed by whitespace or EOT.

    Returns the whole text when no terminator qualifies. Abbreviation
    periods followed by a space do end the sentence; that approximation is
    accepted rather than special-cased.
    """
    for i, ch in enumerate(reason):
        if ch in ".!?" and (i + 1 == len(reason) or reason[i + 1].isspace()):
            return reason[: i + 1]
    return reason


def beyond_first_sentence(reason: str) -> str:
    """The remainder of the text after its first sentence."""
    return reason[len(first_sentence(reason)) :]


def mask_profile(profile: AgentProfile, enabled: Sequence[str]) -> AgentProfile:
    """Restrict a profile to the enabled variables, preserving order."""
    attrs = {k: v for k, v in profile.attributes.items() if k in set(enabled)}
    return replace(profile, attributes=attrs)
