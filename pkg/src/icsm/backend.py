"""Model-query backends: a remote chat-completion client, two offline
mocks, and a persistent response cache.

All backends share one interface: ``query(prompt, profile=..., round_index=...)``
returning a QueryRecord. Nothing outside this module performs network
activity, and with either mock an entire experiment is a pure function of
its inputs and seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import requests

from .errors import BackendError, ConfigError
from .population import AgentProfile, derive_seed
from .prompting import Scenario, VoteResponse, format_response

API_KEY_ENV = "ICSM_API_KEY"

BACKEND_KINDS = ("remote", "scripted_mock", "parametric_mock")


class BackendUnavailable(BackendError):
    """The backend could not deliver a completion (retries exhausted)."""


class AuthError(BackendError):
    """Missing or rejected API credentials."""


class Timeout(BackendError):
    """The backend timed out on every attempt."""


class MissingWeight(BackendError):
    """The parametric mock has no logit offset for a profile category."""


class StorageError(BackendError):
    """The response cache could not be read or written."""


def prompt_digest(prompt: str) -> str:
    """Content hash of the prompt bytes; the cache and fixture key."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class QueryRecord:
    """One delivered model completion plus provenance."""

    prompt_digest: str
    raw_text: str
    model_id: str
    latency: float
    attempt: int


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    model_id: str = "mock"
    endpoint_url: str = ""
    max_in_flight: int = 1
    retry_limit: int = 2
    timeout: float = 60.0
    # None omits the field and leaves the decision to the provider.
    temperature: float | None = 1.0
    backoff_base: float = 0.5
    fixtures: str = ""
    weights: str = ""
    cache_dir: str = ""

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.kind == "remote" and not self.endpoint_url:
            raise ConfigError("remote backend requires endpoint_url")

    @classmethod
    def from_mapping(cls, data: Mapping, base_dir: Path | None = None) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        values = dict(data)
        if base_dir is not None:
            for key in ("fixtures", "weights", "cache_dir"):
                if values.get(key):
                    values[key] = str((base_dir / values[key]).resolve())
        return cls(**values)


@dataclass(frozen=True)
class ParametricWeights:
    """Tunable response model: per-category logit offsets plus noise scale."""

    base: float = 0.0
    jitter: float = 0.0
    p_other_range: tuple[float, float] = (0.0, 0.0)
    offsets: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ParametricWeights":
        rng = data.get("p_other", [0.0, 0.0])
        return cls(
            base=float(data.get("base", 0.0)),
            jitter=float(data.get("jitter", 0.0)),
            p_other_range=(float(rng[0]), float(rng[1])),
            offsets=data.get("offsets", {}),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ParametricWeights":
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def parametric_mock_response(
    profile: AgentProfile,
    weights: ParametricWeights,
    seed: int,
    scenario: Scenario,
) -> str:
    """Deterministic synthetic completion in the canonical response format.

    The Democratic lean is logistic(base + sum of the profile's category
    offsets) with seeded Gaussian jitter on the logit; the other/abstain
    mass is drawn from a fixed small range. Same inputs, same text.
    """
    total = 0.0
    strongest: tuple[str, float] | None = None
    pairs = [("state", profile.state)] + list(profile.attributes.items())
    for variable, category in pairs:
        table = weights.offsets.get(variable)
        if table is None:
            continue
        if category not in table:
            raise MissingWeight(
                f"no offset for {variable}={category!r} in parametric weights"
            )
        offset = float(table[category])
        total += offset
        if variable != "state" and offset != 0.0:
            if strongest is None or abs(offset) > abs(strongest[1]):
                strongest = (variable, offset)

    rng = np.random.default_rng(seed)
    logit = weights.base + total
    if weights.jitter > 0:
        logit += rng.normal(0.0, weights.jitter)
    lean = _logistic(logit)

    lo, hi = weights.p_other_range
    p_other = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    p_dem = lean * (1.0 - p_other)
    p_rep = (1.0 - lean) * (1.0 - p_other)

    described = ", ".join(profile.attributes.values())
    intro = f"I am a voter from {profile.state}"
    if described:
        intro += f", {described}"
    intro += "."
    if strongest is not None:
        leaning = scenario.candidate_dem if strongest[1] > 0 else scenario.candidate_rep
        detail = (
            f" My {strongest[0]} weighs on this choice, and it tilts me "
            f"toward {leaning}."
        )
    else:
        detail = " The overall national mood guides my expectation."
    reason = intro + detail

    vote = VoteResponse(p_dem=p_dem, p_rep=p_rep, p_other=p_other, reason=reason)
    return format_response(vote, scenario)


class ScriptedMockBackend:
    """Replays canned completions keyed by prompt digest.

    The fixture map may carry a ``"*"`` entry used as the fallback for any
    prompt without its own fixture.
    """

    def __init__(self, fixtures: Mapping[str, str], model_id: str = "scripted-mock"):
        self.fixtures = dict(fixtures)
        self.model_id = model_id
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path, model_id: str = "scripted-mock"):
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), model_id)

    def query(
        self,
        prompt: str,
        profile: AgentProfile | None = None,
        round_index: int = 0,
    ) -> QueryRecord:
        self.calls += 1
        digest = prompt_digest(prompt)
        text = self.fixtures.get(digest, self.fixtures.get("*"))
        if text is None:
            raise BackendUnavailable(f"no fixture for prompt digest {digest}")
        return QueryRecord(
            prompt_digest=digest,
            raw_text=text,
            model_id=self.model_id,
            latency=0.0,
            attempt=1,
        )


class ParametricMockBackend:
    """Offline backend that synthesizes responses from profile weights.

    Per-call randomness is derived from (seed, round_index, prompt digest),
    so responses vary across rounds yet the whole run is reproducible.
    """

    def __init__(
        self,
        weights: ParametricWeights,
        scenario: Scenario,
        seed: int,
        model_id: str = "parametric-mock",
    ):
        self.weights = weights
        self.scenario = scenario
        self.seed = seed
        self.model_id = model_id
        self.calls = 0

    def query(
        self,
        prompt: str,
        profile: AgentProfile | None = None,
        round_index: int = 0,
    ) -> QueryRecord:
        if profile is None:
            raise ConfigError("parametric mock requires the agent profile")
        self.calls += 1
        digest = prompt_digest(prompt)
        call_seed = derive_seed(self.seed, str(round_index), digest)
        text = parametric_mock_response(profile, self.weights, call_seed, self.scenario)
        return QueryRecord(
            prompt_digest=digest,
            raw_text=text,
            model_id=self.model_id,
            latency=0.0,
            attempt=1,
        )


class RemoteBackend:
    """OpenAI-compatible chat-completion client with retry and backoff.

    Sends the full prompt as a single user message. Transient failures
    (timeouts, connection errors, HTTP 429/5xx) are retried up to
    retry_limit times with exponential backoff; delivered-but-malformed
    content is returned untouched (rejecting it is the parser's concern).
    """

    def __init__(self, config: BackendConfig, session: requests.Session | None = None):
        if config.kind != "remote":
            raise ConfigError("RemoteBackend requires kind='remote'")
        api_key = os.environ.get(API_KEY_ENV, "")
        if not api_key:
            raise AuthError(f"{API_KEY_ENV} is not set in the environment")
        self.config = config
        self.model_id = config.model_id
        self._headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }
        self._session = session or requests.Session()
        self.calls = 0

    def query(
        self,
        prompt: str,
        profile: AgentProfile | None = None,
        round_index: int = 0,
    ) -> QueryRecord:
        self.calls += 1
        digest = prompt_digest(prompt)
        payload: dict = {
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": prompt}],
        }
        if self.config.temperature is not None:
            payload["temperature"] = self.config.temperature

        attempts = self.config.retry_limit + 1
        last_failure = ""
        timed_out = False
        for attempt in range(1, attempts + 1):
            start = time.monotonic()
            try:
                resp = self._session.post(
                    self.config.endpoint_url,
                    headers=self._headers,
                    json=payload,
                    timeout=self.config.timeout,
                )
            except requests.Timeout:
                last_failure = f"timeout after {self.config.timeout}s"
                timed_out = True
            except requests.RequestException as exc:
                last_failure = f"connection error: {exc}"
                timed_out = False
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_failure = f"HTTP {resp.status_code}"
                    timed_out = False
                elif resp.status_code != 200:
                    raise BackendUnavailable(
                        f"HTTP {resp.status_code}: {resp.text[:200]}"
                    )
                else:
                    try:
                        text = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendUnavailable(
                            f"unexpected completion payload: {exc}"
                        ) from None
                    return QueryRecord(
                        prompt_digest=digest,
                        raw_text=text,
                        model_id=self.config.model_id,
                        latency=time.monotonic() - start,
                        attempt=attempt,
                    )
            if attempt < attempts:
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))

        if timed_out:
            raise Timeout(f"gave up after {attempts} attempts: {last_failure}")
        raise BackendUnavailable(f"gave up after {attempts} attempts: {last_failure}")


class ResponseCache:
    """Directory of JSON files keyed by (prompt digest, model, round)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create cache directory: {exc}") from exc
        self._lock = threading.Lock()

    def _path(self, digest: str, model_id: str, round_index: int) -> Path:
        key = hashlib.sha256(
            f"{digest}\x1f{model_id}\x1f{round_index}".encode("utf-8")
        ).hexdigest()
        return self.directory / f"{key}.json"

    def lookup(self, digest: str, model_id: str, round_index: int) -> QueryRecord | None:
        path = self._path(digest, model_id, round_index)
        if not path.exists():
            return None
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            return QueryRecord(**doc)
        except (OSError, ValueError, TypeError) as exc:
            raise StorageError(f"corrupt cache entry {path.name}: {exc}") from exc

    def store(self, record: QueryRecord, round_index: int) -> None:
        path = self._path(record.prompt_digest, record.model_id, round_index)
        with self._lock:
            if path.exists():
                return
            tmp = path.with_suffix(".tmp")
            try:
                tmp.write_text(
                    json.dumps(record.__dict__, ensure_ascii=False), encoding="utf-8"
                )
                os.replace(tmp, path)
            except OSError as exc:
                raise StorageError(f"cannot write cache entry: {exc}") from exc


class CachedBackend:
    """Wraps any backend with a read-through persistent cache."""

    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.model_id = inner.model_id

    def query(
        self,
        prompt: str,
        profile: AgentProfile | None = None,
        round_index: int = 0,
    ) -> QueryRecord:
        digest = prompt_digest(prompt)
        hit = self.cache.lookup(digest, self.model_id, round_index)
        if hit is not None:
            return hit
        record = self.inner.query(prompt, profile=profile, round_index=round_index)
        self.cache.store(record, round_index)
        return record


def make_backend(config: BackendConfig, scenario: Scenario, root_seed: int = 0):
    """Construct the backend named by the config, cache-wrapped if asked."""
    if config.kind == "remote":
        backend = RemoteBackend(config)
    elif config.kind == "scripted_mock":
        if not config.fixtures:
            raise ConfigError("scripted_mock backend requires a fixtures file")
        backend = ScriptedMockBackend.from_file(config.fixtures, config.model_id)
    else:
        if not config.weights:
            raise ConfigError("parametric_mock backend requires a weights file")
        weights = ParametricWeights.from_file(config.weights)
        backend = ParametricMockBackend(
            weights, scenario, derive_seed(root_seed, "parametric-backend"),
            config.model_id,
        )
    if config.cache_dir:
        return CachedBackend(backend, ResponseCache(config.cache_dir))
    return backend
