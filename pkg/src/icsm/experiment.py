"""Multi-round experiment orchestration over cohorts.

Every agent is queried once per round with a profile restricted to the
enabled variables; every response (including parse failures) is appended
to a JSONL run log, one record per line. Runs are resumable: records
already in the log are never re-queried, keyed by
(experiment_id, round_index, state, agent_id).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backend import BackendConfig, make_backend
from .errors import BackendError, ConfigError, IcsmError
from .population import AgentProfile, Cohort, read_cohort
from .prompting import (
    MalformedResponse,
    PromptTemplate,
    Scenario,
    VoteResponse,
    check_template,
    default_template,
    mask_profile,
    parse_response,
    render_prompt,
)


class CorruptLog(IcsmError):
    """The run log has a duplicate key or a malformed line."""


@dataclass(frozen=True)
class RoundRecord:
    """Durable log entry for one agent's response in one round."""

    experiment_id: str
    round_index: int
    agent_id: int
    state: str
    prompt_digest: str
    model_id: str
    timestamp: str
    raw_text: str
    parsed: VoteResponse | None
    parse_error: str | None = None

    def key(self) -> tuple[int, str, int]:
        return (self.round_index, self.state, self.agent_id)


@dataclass(frozen=True)
class SynthesisSpec:
    """Cohort-construction settings from the [synthesis] config table."""

    census: str
    cohort_size: int = 1000
    # "builtin" pins category order to the bundled schema; "auto" infers
    # the schema from the census file (first-appearance order).
    schema: str = "auto"

    def __post_init__(self):
        if self.cohort_size < 1:
            raise ConfigError("cohort_size must be >= 1")
        if self.schema not in ("auto", "builtin"):
            raise ConfigError(f"unknown synthesis schema {self.schema!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    states: tuple[str, ...]
    cohort_dir: str
    scenario: Scenario
    backend: BackendConfig
    rounds: int = 1
    root_seed: int = 0
    template: str = "default"
    # None enables every variable present in the cohorts.
    variables_enabled: tuple[str, ...] | None = None
    synthesis: SynthesisSpec | None = None

    def __post_init__(self):
        if not self.experiment_id:
            raise ConfigError("experiment_id must be non-empty")
        if not self.states:
            raise ConfigError("states must be non-empty")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")


@dataclass
class RunSummary:
    """Completion accounting for one run_experiment invocation."""

    experiment_id: str
    expected_total: int
    persisted_before: int
    persisted_new: int
    failure: str | None = None

    @property
    def aborted_remainder(self) -> int:
        return self.expected_total - self.persisted_before - self.persisted_new


class ExperimentAborted(BackendError):
    """Backend gave out mid-run; the partial log is preserved."""

    def __init__(self, message: str, summary: RunSummary):
        super().__init__(message)
        self.summary = summary


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment config (TOML); relative paths resolve against
    the config file's directory."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = path.resolve().parent

    known = {
        "experiment_id", "states", "cohort_dir", "variables_enabled",
        "template", "rounds", "root_seed", "scenario", "backend", "synthesis",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for required in ("experiment_id", "states", "cohort_dir", "scenario", "backend"):
        if required not in data:
            raise ConfigError(f"config is missing the {required!r} key")

    try:
        scenario = Scenario(**data["scenario"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [scenario] table: {exc}") from exc
    backend = BackendConfig.from_mapping(data["backend"], base_dir=base)

    synthesis = None
    if "synthesis" in data:
        syn = dict(data["synthesis"])
        if "census" in syn:
            syn["census"] = str((base / syn["census"]).resolve())
        try:
            synthesis = SynthesisSpec(**syn)
        except TypeError as exc:
            raise ConfigError(f"invalid [synthesis] table: {exc}") from exc

    template = data.get("template", "default")
    if template != "default":
        template = str((base / template).resolve())

    enabled = data.get("variables_enabled")
    return ExperimentConfig(
        experiment_id=data["experiment_id"],
        states=tuple(data["states"]),
        cohort_dir=str((base / data["cohort_dir"]).resolve()),
        scenario=scenario,
        backend=backend,
        rounds=int(data.get("rounds", 1)),
        root_seed=int(data.get("root_seed", 0)),
        template=template,
        variables_enabled=tuple(enabled) if enabled is not None else None,
        synthesis=synthesis,
    )


def cohort_path(cohort_dir: str | Path, state: str) -> Path:
    return Path(cohort_dir) / (state.replace(" ", "_") + ".json")


def load_cohorts(config: ExperimentConfig) -> dict[str, Cohort]:
    cohorts: dict[str, Cohort] = {}
    for state in config.states:
        path = cohort_path(config.cohort_dir, state)
        if not path.exists():
            raise ConfigError(f"no cohort file for {state!r} at {path}")
        cohorts[state] = read_cohort(path)
    return cohorts


def resolve_template(config: ExperimentConfig, enabled: Sequence[str]) -> PromptTemplate:
    if config.template == "default":
        template = default_template(enabled)
    else:
        template = PromptTemplate.from_file(config.template)
    check_template(template, enabled)
    return template


def enabled_variables(config: ExperimentConfig, cohorts: Mapping[str, Cohort]) -> list[str]:
    """The variables agents answer with; validated against the cohorts."""
    available: list[str] = []
    for cohort in cohorts.values():
        for variable in cohort.variables:
            if variable.name not in available:
                available.append(variable.name)
    if config.variables_enabled is None:
        return available
    missing = [v for v in config.variables_enabled if v not in available]
    if missing:
        raise ConfigError(f"variables_enabled not present in cohorts: {missing}")
    return [v for v in available if v in config.variables_enabled]


def _record_to_line(record: RoundRecord) -> str:
    doc = {
        "experiment_id": record.experiment_id,
        "round_index": record.round_index,
        "agent_id": record.agent_id,
        "state": record.state,
        "prompt_digest": record.prompt_digest,
        "model_id": record.model_id,
        "timestamp": record.timestamp,
        "raw_text": record.raw_text,
        "parsed": (
            {
                "p_dem": record.parsed.p_dem,
                "p_rep": record.parsed.p_rep,
                "p_other": record.parsed.p_other,
                "reason": record.parsed.reason,
                "renormalized": record.parsed.renormalized,
            }
            if record.parsed is not None
            else None
        ),
        "parse_error": record.parse_error,
    }
    return json.dumps(doc, ensure_ascii=False)


_REQUIRED_LOG_KEYS = {
    "experiment_id", "round_index", "agent_id", "state", "prompt_digest",
    "model_id", "timestamp", "raw_text", "parsed", "parse_error",
}


def read_run_log(path: str | Path) -> list[RoundRecord]:
    """Parse and validate a JSONL run log; duplicates or garbage raise CorruptLog."""
    records: list[RoundRecord] = []
    seen: set[tuple[str, int, str, int]] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptLog(f"line {lineno}: invalid JSON ({exc})") from None
            if not isinstance(doc, dict) or not _REQUIRED_LOG_KEYS.issubset(doc):
                raise CorruptLog(f"line {lineno}: missing record fields")
            key = (doc["experiment_id"], doc["round_index"], doc["state"], doc["agent_id"])
            if key in seen:
                raise CorruptLog(f"line {lineno}: duplicate record for {key}")
            seen.add(key)
            parsed = None
            if doc["parsed"] is not None:
                parsed = VoteResponse(**doc["parsed"])
            records.append(
                RoundRecord(
                    experiment_id=doc["experiment_id"],
                    round_index=doc["round_index"],
                    agent_id=doc["agent_id"],
                    state=doc["state"],
                    prompt_digest=doc["prompt_digest"],
                    model_id=doc["model_id"],
                    timestamp=doc["timestamp"],
                    raw_text=doc["raw_text"],
                    parsed=parsed,
                    parse_error=doc["parse_error"],
                )
            )
    return records


def log_content_digest(records: Sequence[RoundRecord]) -> str:
    """Hash of the log's scientific content: key-ordered, timestamps excluded."""
    hasher = hashlib.sha256()
    for record in sorted(records, key=RoundRecord.key):
        doc = json.loads(_record_to_line(record))
        doc.pop("timestamp")
        hasher.update(json.dumps(doc, sort_keys=True).encode("utf-8"))
        hasher.update(b"\n")
    return "sha256:" + hasher.hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def run_experiment(
    config: ExperimentConfig,
    log_path: str | Path,
    backend=None,
    cohorts: Mapping[str, Cohort] | None = None,
    resume: bool = False,
    progress=None,
) -> RunSummary:
    """Run (or resume) the configured experiment, appending to the run log.

    Queries run in parallel up to the backend's max_in_flight; records are
    written in canonical (state, agent) order within each round so a mock
    rerun reproduces the log exactly, timestamps aside. On backend failure
    the round is aborted after logging completed work and ExperimentAborted
    carries the completion accounting.
    """
    log_path = Path(log_path)
    if cohorts is None:
        cohorts = load_cohorts(config)
    enabled = enabled_variables(config, cohorts)
    template = resolve_template(config, enabled)
    if backend is None:
        backend = make_backend(config.backend, config.scenario, config.root_seed)

    done: set[tuple[int, str, int]] = set()
    persisted_before = 0
    if log_path.exists() and log_path.stat().st_size > 0:
        if not resume:
            raise ConfigError(
                f"run log {log_path} already exists; pass resume=True to continue"
            )
        for record in read_run_log(log_path):
            if record.experiment_id != config.experiment_id:
                raise CorruptLog(
                    f"log holds experiment {record.experiment_id!r}, "
                    f"config says {config.experiment_id!r}"
                )
            done.add(record.key())
        persisted_before = len(done)

    # Prompts are fixed across rounds; render each agent once.
    masked: dict[tuple[str, int], AgentProfile] = {}
    prompts: dict[tuple[str, int], str] = {}
    for state in config.states:
        for agent in cohorts[state].agents:
            profile = mask_profile(agent, enabled)
            masked[(state, agent.agent_id)] = profile
            prompts[(state, agent.agent_id)] = render_prompt(
                profile, config.scenario, template
            )

    expected_total = config.rounds * sum(cohorts[s].size for s in config.states)
    summary = RunSummary(
        experiment_id=config.experiment_id,
        expected_total=expected_total,
        persisted_before=persisted_before,
        persisted_new=0,
    )

    max_workers = config.backend.max_in_flight

    with log_path.open("a", encoding="utf-8") as log:
        for round_index in range(config.rounds):
            tasks = [
                (state, agent.agent_id)
                for state in config.states
                for agent in cohorts[state].agents
                if (round_index, state, agent.agent_id) not in done
            ]
            if not tasks:
                continue

            def run_one(key: tuple[str, int]):
                return backend.query(
                    prompts[key], profile=masked[key], round_index=round_index
                )

            results: dict[tuple[str, int], object] = {}
            failure: str | None = None
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                for key, outcome in zip(tasks, pool.map(_guard(run_one), tasks)):
                    results[key] = outcome

            for key in tasks:
                outcome = results[key]
                if isinstance(outcome, BackendError):
                    if failure is None:
                        failure = str(outcome)
                    continue
                state, agent_id = key
                record = _build_record(config, round_index, state, agent_id, outcome)
                log.write(_record_to_line(record) + "\n")
                summary.persisted_new += 1
            log.flush()

            if failure is not None:
                summary.failure = failure
                raise ExperimentAborted(failure, summary)
            if progress is not None:
                progress(round_index + 1, summary.persisted_new)
    return summary


def _guard(fn):
    """Turn backend failures into values so one bad query cannot lose a round."""

    def wrapped(key):
        try:
            return fn(key)
        except BackendError as exc:
            return exc

    return wrapped


def _build_record(config, round_index, state, agent_id, query_record) -> RoundRecord:
    parsed = None
    parse_error = None
    try:
        parsed = parse_response(query_record.raw_text, config.scenario)
    except MalformedResponse as exc:
        parse_error = str(exc)
    return RoundRecord(
        experiment_id=config.experiment_id,
        round_index=round_index,
        agent_id=agent_id,
        state=state,
        prompt_digest=query_record.prompt_digest,
        model_id=query_record.model_id,
        timestamp=_utcnow(),
        raw_text=query_record.raw_text,
        parsed=parsed,
        parse_error=parse_error,
    )
