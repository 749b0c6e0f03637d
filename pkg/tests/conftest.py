from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from agentkernel.gateway import make_scripted_client  # noqa: E402


def verdict(score: float, approved: bool | None = None, feedback: str = "") -> str:
    body: dict = {"score": score, "feedback": feedback or f"feedback for {score}"}
    if approved is not None:
        body["approved"] = approved
    return json.dumps(body)


def contract_reply(plan: list[str] | None = None, **overrides) -> str:
    from scenarios import TRAVEL_CONTRACT

    doc = dict(TRAVEL_CONTRACT)
    if plan is not None:
        doc["plan"] = plan
    doc.update(overrides)
    return json.dumps(doc)


def tool_call(tool: str, **args) -> str:
    return "```json\n" + json.dumps({"tool": tool, "arguments": args}) + "\n```"


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    ws = tmp_path / "ws"
    ws.mkdir()
    return ws


@pytest.fixture
def scripted():
    return make_scripted_client


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number][2])
