from __future__ import annotations

import json
import math
from pathlib import Path

import pytest

from memcycle.config import build_config
from memcycle.providers import Cassette, CassetteProvider

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "golden"


def unit(*values: float) -> tuple[float, ...]:
    norm = math.sqrt(sum(v * v for v in values))
    return tuple(v / norm for v in values)


def cassette_provider(completions: dict[str, list[str]] | None = None, dimension: int = 16,
                      seed: int = 0) -> CassetteProvider:
    """Hashed-embedding cassette provider scripted per role."""
    return CassetteProvider(Cassette("hashed", dimension, {k: list(v) for k, v in (completions or {}).items()}),
                            seed=seed)


def verdict(decision: str, gaps: str = "NONE") -> str:
    return f"<decision>{decision}</decision><reason>r</reason><key-gaps>{gaps}</key-gaps>"


def label(value: str) -> str:
    return json.dumps({"label": value})


@pytest.fixture
def config():
    return build_config({"dimension": 16})


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed again in the terminal summary."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
