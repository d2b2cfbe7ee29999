import csv
import json
from importlib import resources
from pathlib import Path

import pytest

from icsm.prompting import Scenario

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def scenario() -> Scenario:
    return Scenario(
        election_name="2024 presidential election",
        candidate_dem="Kamala Harris",
        candidate_rep="Donald Trump",
        context_sentence=(
            "In the 2024 presidential election, Donald Trump is the Republican "
            "candidate, and Kamala Harris is the Democratic candidate."
        ),
    )


def data_path(name: str) -> Path:
    return Path(str(resources.files("icsm.data") / name))


@pytest.fixture
def census_csv() -> Path:
    return data_path("census_six_states.csv")


@pytest.fixture
def benchmark_csv() -> Path:
    return data_path("election_benchmark.csv")


def reference_shares() -> dict[int, dict[str, float]]:
    """Published per-state normalized shares keyed by round (1 and 2)."""
    out: dict[int, dict[str, float]] = {1: {}, 2: {}}
    with (FIXTURES / "reference_round_shares.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["round"])][row["state"]] = float(row["dem_norm"])
    return out


def log_line(
    state: str,
    agent_id: int,
    p_dem: float,
    p_rep: float,
    p_other: float,
    reason: str = "",
    round_index: int = 0,
    experiment_id: str = "fixture",
) -> str:
    """A run-log line built from the documented JSONL schema, bypassing the
    writer so logs produced by other tools stay covered."""
    return json.dumps(
        {
            "experiment_id": experiment_id,
            "round_index": round_index,
            "agent_id": agent_id,
            "state": state,
            "prompt_digest": f"digest-{state}-{agent_id}",
            "model_id": "fixture",
            "timestamp": "2024-11-05T00:00:00.000+00:00",
            "raw_text": "",
            "parsed": {
                "p_dem": p_dem,
                "p_rep": p_rep,
                "p_other": p_other,
                "reason": reason,
                "renormalized": False,
            },
            "parse_error": None,
        }
    )


def write_share_replay_log(
    path: Path,
    shares: dict[str, float],
    agents_per_state: int = 4,
    experiment_id: str = "fixture",
) -> None:
    """Fixture log whose per-state mean probabilities hit the given
    normalized shares exactly (every agent carries the same simplex)."""
    p_other = 0.05
    with path.open("w", encoding="utf-8") as fh:
        for state, dem_norm in shares.items():
            p_dem = dem_norm * (1 - p_other)
            p_rep = (1 - dem_norm) * (1 - p_other)
            for agent_id in range(agents_per_state):
                fh.write(
                    log_line(
                        state,
                        agent_id,
                        p_dem,
                        p_rep,
                        p_other,
                        experiment_id=experiment_id,
                    )
                    + "\n"
                )
