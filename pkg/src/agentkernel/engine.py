"""Plan decomposition, the bounded ReAct subtask loop and checkpoint replanning."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from . import _io
from .contract import RequirementDocument, normalize_step, step_tag
from .gateway import ChatMessage, ClientHandle, Field, GatewayError, complete, extract_structured
from .memory import SessionHistory
from .tools import ALL_TOOLS, READ_EDIT_TOOLS, TOOL_SPECS, TOOL_NAMES, Toolbelt

log = logging.getLogger(__name__)

MAX_STEPS = 11
OBSERVATION_LIMIT = 4000
COMPLETION_MARKER = "TASK_COMPLETE"
RESULTS_FILE = "subtask_results.json"
BUILD_PHASES = ("create", "edit")

TOOL_CALL_SCHEMA = {
    "tool": Field("string"),
    "arguments": Field("object", required=False),
}


class EngineError(RuntimeError):
    pass


@dataclass
class Subtask:
    index: int
    description: str
    phase: str
    is_final: bool = False
    checkpoint_after: bool = False

    @property
    def step(self) -> str:
        return f"[{self.phase.upper()}] {self.description}"


@dataclass
class ToolCall:
    tool_name: str
    arguments: dict[str, Any]
    observation: str
    ok: bool


@dataclass
class SubtaskResult:
    index: int
    status: str
    summary: str
    files_touched: list[str] = field(default_factory=list)
    tool_log: list[ToolCall] = field(default_factory=list)
    steps_used: int = 0
    description: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubtaskResult:
        data = dict(data)
        data["tool_log"] = [ToolCall(**c) for c in data.get("tool_log", [])]
        return cls(**data)


class SubtaskStore:
    """Episodic memory: ``<workspace>/subtask_results.json``, rewritten
    atomically after every subtask."""

    def __init__(self, workspace: str | Path):
        self.path = Path(workspace) / RESULTS_FILE
        self.results: list[SubtaskResult] = []

    def record(self, result: SubtaskResult) -> None:
        self.results.append(result)
        _io.atomic_write_json(self.path, [r.to_dict() for r in self.results])

    @staticmethod
    def load(workspace: str | Path) -> list[SubtaskResult]:
        raw = _io.read_json(Path(workspace) / RESULTS_FILE, default=[]) or []
        return [SubtaskResult.from_dict(r) for r in raw]


def _split_step(step: str) -> tuple[str, str]:
    step = normalize_step(step)
    tag = step_tag(step)
    return tag.lower(), step.split("]", 1)[1].strip()


def _make_subtasks(steps: Sequence[str], start: int = 1) -> list[Subtask]:
    subtasks = []
    for offset, step in enumerate(steps):
        phase, desc = _split_step(step)
        subtasks.append(Subtask(start + offset, desc, phase))
    if subtasks:
        subtasks[-1].is_final = True
    return identify_checkpoints(subtasks)


def decompose(contract: RequirementDocument) -> list[Subtask]:
    if not contract.plan:
        raise EngineError("contract plan is empty")
    return _make_subtasks(contract.plan)


def identify_checkpoints(subtasks: list[Subtask]) -> list[Subtask]:
    """Flag a checkpoint after every create/edit subtask except the last one."""
    build = [s.index for s in subtasks if s.phase in BUILD_PHASES]
    last = build[-1] if build else None
    for s in subtasks:
        s.checkpoint_after = s.phase in BUILD_PHASES and s.index != last
    return subtasks


def restrict_tools(subtask: Subtask) -> frozenset[str]:
    if subtask.phase == "verify" or subtask.is_final:
        return READ_EDIT_TOOLS
    return ALL_TOOLS


def _section(title: str, body: str) -> str:
    return f"## {title}\n{body.strip() if body and body.strip() else '(none)'}"


PROTOCOL = f"""Work in Thought/Action/Observation steps. Each reply either
(a) contains exactly one fenced JSON block naming one tool call:
```json
{{"tool": "<name>", "arguments": {{...}}}}
```
and you will receive its observation, or
(b) contains no JSON block and the literal marker {COMPLETION_MARKER}, followed by a
short summary of what this subtask produced."""


def build_conversation_context(history: SessionHistory | None,
                               episodic: Sequence[SubtaskResult],
                               longterm: str,
                               subtask: Subtask,
                               contract: RequirementDocument | None = None,
                               allowed_tools: frozenset[str] | None = None) -> str:
    """System prompt for one subtask.

    Sections, in order: contract, long-term memory, session history,
    completed-subtask summaries, allowed tool schemas, current subtask.
    """
    allowed = restrict_tools(subtask) if allowed_tools is None else allowed_tools
    completed = "\n".join(
        f"Subtask {r.index} [{r.status}]: {r.summary}"
        + (f" (files: {', '.join(r.files_touched)})" if r.files_touched else "")
        for r in episodic
    )
    tools = "\n".join(TOOL_SPECS[n].render() for n in TOOL_NAMES if n in allowed)
    return "\n\n".join([
        "You are the executor agent working through an approved plan.",
        _section("Sprint Contract", contract.render() if contract else ""),
        _section("Long-term memory", longterm),
        _section("Session history", history.render() if history else ""),
        _section("Completed subtasks", completed),
        _section("Available tools", tools + "\n\n" + PROTOCOL),
        _section("Current subtask",
                 f"Subtask {subtask.index} ({subtask.phase}{', final' if subtask.is_final else ''}): "
                 f"{subtask.description}"),
    ])


def truncate(text: str, limit: int = OBSERVATION_LIMIT) -> str:
    if len(text) <= limit:
        return text
    return text[:limit] + "\n[truncated]"


def parse_action(reply: str) -> tuple[str, Any]:
    """Classify a model turn as ``call``, ``complete`` or ``malformed``."""
    result = extract_structured(reply, TOOL_CALL_SCHEMA)
    if result.ok:
        return "call", (result.document["tool"], result.document.get("arguments", {}))
    if COMPLETION_MARKER in (reply or ""):
        summary = reply.replace(COMPLETION_MARKER, "").strip()
        return "complete", summary
    return "malformed", None


MALFORMED = ("malformed action: reply with one fenced JSON block "
             '{"tool": ..., "arguments": {...}} or the completion marker')


def run_subtask(subtask: Subtask, ctx: str, main: ClientHandle, tools: Toolbelt, *,
                max_steps: int = MAX_STEPS,
                observation_limit: int = OBSERVATION_LIMIT,
                store: SubtaskStore | None = None) -> SubtaskResult:
    """Run the ReAct loop for one subtask.

    Stops on the completion marker or after ``max_steps`` tool calls
    (malformed turns count as steps). The result is persisted to ``store``
    before returning.
    """
    allowed = restrict_tools(subtask)
    turns = [ChatMessage("user", f"Begin subtask {subtask.index}: {subtask.description}")]
    log_: list[ToolCall] = []
    touched: list[str] = []
    steps = 0
    status, summary = "step_budget_exhausted", ""
    try:
        while True:
            if steps >= max_steps:
                summary = f"step budget of {max_steps} tool calls exhausted"
                break
            reply = complete(main, ctx, turns)
            turns.append(ChatMessage("assistant", reply))
            kind, payload = parse_action(reply)
            if kind == "complete":
                status = "completed"
                summary = payload or f"Subtask {subtask.index} completed."
                break
            steps += 1
            if kind == "malformed":
                turns.append(ChatMessage("user", f"Observation: {MALFORMED}"))
                continue
            name, args = payload
            if name not in allowed:
                call = ToolCall(name, args, (
                    f"tool '{name}' is not allowed in this subtask ({subtask.phase}"
                    f"{', final step' if subtask.is_final else ''}); "
                    f"allowed: {', '.join(sorted(allowed))}"), False)
            else:
                res = tools.execute(name, args)
                call = ToolCall(name, args, truncate(res.observation, observation_limit), res.ok)
                if res.ok:
                    touched.extend(p for p in res.side_effects if p not in touched)
            log_.append(call)
            prefix = "Observation" if call.ok else "Observation (error)"
            turns.append(ChatMessage("user", f"{prefix}: {call.observation}"))
    except GatewayError as exc:
        status, summary = "failed", f"gateway error: {exc}"
    result = SubtaskResult(subtask.index, status, summary, sorted(touched), log_, steps,
                           subtask.description)
    if store is not None:
        store.record(result)
    return result


REPLAN_SYSTEM = """You are re-checking a plan at a checkpoint. Given the completed subtask
results and the remaining steps, decide whether the remaining plan still fits.
Reply with JSON: {"decision": "keep"} or
{"decision": "rebuild", "plan": ["[TAG] step", ...]} using tags [SEARCH], [CREATE], [EDIT], [VERIFY]."""

REPLAN_SCHEMA = {"decision": Field("string"), "plan": Field("list", required=False)}


def replan_at_checkpoint(completed: Sequence[SubtaskResult], remaining: Sequence[Subtask],
                         main: ClientHandle) -> tuple[str, list[Subtask]]:
    """Ask the model to keep or rebuild the remaining steps.

    Anything other than a well-formed rebuild keeps the plan. Rebuilt steps
    are renumbered after the completed ones and re-checkpointed.
    """
    done = "\n".join(f"Subtask {r.index} [{r.status}]: {r.summary}" for r in completed)
    todo = "\n".join(f"{s.index}. {s.step}" for s in remaining)
    reply = complete(main, REPLAN_SYSTEM, [ChatMessage(
        "user", f"Completed:\n{done or '(none)'}\n\nRemaining plan:\n{todo or '(none)'}")])
    result = extract_structured(reply, REPLAN_SCHEMA)
    if result.ok and result.document["decision"].strip().lower().startswith("rebuil"):
        steps = [str(s) for s in result.document.get("plan", []) if str(s).strip()]
        if steps:
            return "rebuilt", _make_subtasks(steps, start=len(completed) + 1)
    start = len(completed) + 1
    kept = [replace(s, index=start + i) for i, s in enumerate(remaining)]
    return "keep", kept


@dataclass
class CheckpointDecision:
    after_index: int
    decision: str
    remaining_before: list[str]
    remaining_after: list[str]


@dataclass
class ExecutionTrace:
    results: list[SubtaskResult]
    checkpoints: list[CheckpointDecision]
    failed: bool = False


def execute_plan(subtasks: Sequence[Subtask], main: ClientHandle, tools: Toolbelt, *,
                 contract: RequirementDocument | None = None,
                 history: SessionHistory | None = None,
                 longterm: str = "",
                 store: SubtaskStore | None = None,
                 max_steps: int = MAX_STEPS,
                 observation_limit: int = OBSERVATION_LIMIT) -> ExecutionTrace:
    """Run subtasks in order, replanning at checkpoints. A failed subtask
    stops execution; an exhausted step budget does not."""
    pending = list(subtasks)
    results: list[SubtaskResult] = []
    checkpoints: list[CheckpointDecision] = []
    while pending:
        current = pending.pop(0)
        ctx = build_conversation_context(history, results, longterm, current, contract)
        result = run_subtask(current, ctx, main, tools, max_steps=max_steps,
                             observation_limit=observation_limit, store=store)
        results.append(result)
        if result.status == "failed":
            return ExecutionTrace(results, checkpoints, failed=True)
        if current.checkpoint_after and pending:
            before = [s.step for s in pending]
            try:
                decision, pending = replan_at_checkpoint(results, pending, main)
            except GatewayError as exc:
                log.error("replanning failed: %s", exc)
                return ExecutionTrace(results, checkpoints, failed=True)
            checkpoints.append(CheckpointDecision(current.index, decision, before,
                                                  [s.step for s in pending]))
    return ExecutionTrace(results, checkpoints)


def agent_output(results: Sequence[SubtaskResult]) -> str:
    """Concatenated summaries plus every path argument in the tool log; used
    for stage-1 entry detection."""
    parts = []
    for r in results:
        parts.append(r.summary)
        parts.extend(r.files_touched)
        for c in r.tool_log:
            path = c.arguments.get("path") if isinstance(c.arguments, dict) else None
            if isinstance(path, str):
                parts.append(path)
    return "\n".join(parts)

