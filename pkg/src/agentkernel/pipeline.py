"""Five-phase pipeline wiring and configuration."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import _io
from .contract import ContractError, RequirementDocument, ReviewOutcome, run_review_loop
from .discussion import ConsensusOutcome, DiscussionContext, run_discussion
from .engine import (
    CheckpointDecision, EngineError, SubtaskResult, SubtaskStore, agent_output, decompose,
    execute_plan,
)
from .evaluation import WEIGHTS, EvaluationReport, build_eval_prompt, evaluate
from .gateway import (
    ROLES, ClientHandle, EndpointConfig, GatewayError, load_replay, make_http_client,
    scripted_clients,
)
from .memory import (
    LifecycleConfig, MemoryStore, SessionHistory, end_session_lifecycle, extract_memories,
    prefetch, record_turn,
)
from .tools import FixtureSearchProvider, HashEmbedder, HttpSearchProvider, Toolbelt, load_skills
from .verifier import ExecutionEvidence, verify_workspace

log = logging.getLogger(__name__)

CONTRACT_FILE = "contract.json"
RUN_DIR = ".run"
PASSING_GRADES = ("A", "B")


class ConfigError(ValueError):
    pass


@dataclass
class Thresholds:
    review_threshold: float = 0.8
    review_rounds: int = 3
    max_steps: int = 11
    discussion_rounds: int = 20
    convergence_epsilon: float = 0.05
    exec_timeout_s: float = 30.0
    bash_timeout_s: float = 30.0
    observation_limit: int = 4000
    max_entries: int = 3
    skill_min_similarity: float = 0.3


@dataclass
class PipelineConfig:
    workspace: Path
    memory_root: Path
    endpoints: dict[str, EndpointConfig] = field(
        default_factory=lambda: {r: EndpointConfig() for r in ROLES})
    skills_dir: Path | None = None
    search_fixtures: Path | None = None
    search_url: str | None = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    weights: dict[str, float] = field(default_factory=lambda: dict(WEIGHTS))
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    extract_memories: bool = True
    mode: str = "live"
    replay: Path | None = None

    def validate(self) -> None:
        t = self.thresholds
        for name, value in asdict(t).items():
            if not value > 0:
                raise ConfigError(f"threshold {name} must be positive, got {value}")
        if set(self.weights) != set(WEIGHTS):
            raise ConfigError(f"weights must name exactly {sorted(WEIGHTS)}")
        if abs(math.fsum(self.weights.values()) - 1.0) > 1e-9:
            raise ConfigError("weights must sum to 1.0")
        if self.mode not in ("live", "scripted"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "scripted" and not self.replay:
            raise ConfigError("scripted mode requires a replay file")
        if set(self.endpoints) != set(ROLES):
            raise ConfigError(f"endpoints must be configured for {ROLES}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path | None = None) -> PipelineConfig:
        base = base or Path.cwd()

        def path(value: Any) -> Path | None:
            if value in (None, ""):
                return None
            p = Path(str(value)).expanduser()
            return p if p.is_absolute() else base / p

        endpoints = {r: EndpointConfig() for r in ROLES}
        for role, ep in (data.get("endpoints") or {}).items():
            if role not in ROLES:
                raise ConfigError(f"unknown endpoint role {role!r}")
            endpoints[role] = EndpointConfig.from_dict(ep)
        known_t = Thresholds.__dataclass_fields__
        unknown = set(data.get("thresholds", {})) - set(known_t)
        if unknown:
            raise ConfigError(f"unknown thresholds: {sorted(unknown)}")
        workspace = path(data.get("workspace", "workspace"))
        cfg = cls(
            workspace=workspace,
            memory_root=path(data.get("memory_root")) or workspace / ".memory",
            endpoints=endpoints,
            skills_dir=path(data.get("skills_dir")),
            search_fixtures=path((data.get("search") or {}).get("fixtures")),
            search_url=(data.get("search") or {}).get("url"),
            thresholds=Thresholds(**data.get("thresholds", {})),
            weights=dict(data.get("weights", WEIGHTS)),
            lifecycle=LifecycleConfig(**data.get("memory", {}).get("lifecycle", {})),
            extract_memories=bool(data.get("memory", {}).get("extract", True)),
            mode=data.get("mode", "live"),
            replay=path(data.get("replay")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, **overrides: Any) -> PipelineConfig:
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data, base=path.parent.resolve())


@dataclass
class RunReport:
    request: str
    review: ReviewOutcome | None = None
    subtasks: list[SubtaskResult] = field(default_factory=list)
    checkpoints: list[CheckpointDecision] = field(default_factory=list)
    evidence: list[ExecutionEvidence] = field(default_factory=list)
    evaluation: EvaluationReport | None = None
    initial_evaluation: EvaluationReport | None = None
    discussion: ConsensusOutcome | None = None
    phases_completed: list[str] = field(default_factory=list)
    error: str | None = None
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, Any] = field(default_factory=dict)

    @property
    def contract(self) -> RequirementDocument | None:
        return self.review.contract if self.review else None

    @property
    def grade(self) -> str | None:
        return self.evaluation.grade if self.evaluation else None

    @property
    def exit_code(self) -> int:
        if self.error or self.grade not in PASSING_GRADES:
            return 1
        return 0

    def to_dict(self, *, with_timings: bool = True) -> dict[str, Any]:
        """Report body; wall-clock data sits under ``timings`` only."""
        out = {
            "request": self.request,
            "phases_completed": list(self.phases_completed),
            "error": self.error,
            "warnings": list(self.warnings),
            "review": self.review.to_dict() if self.review else None,
            "subtasks": [r.to_dict() for r in self.subtasks],
            "checkpoints": [asdict(c) for c in self.checkpoints],
            "evidence": [e.to_dict(with_duration=False) for e in self.evidence],
            "evaluation": self.evaluation.to_dict() if self.evaluation else None,
            "discussion": self.discussion.to_dict() if self.discussion else None,
        }
        if with_timings:
            out["timings"] = self.timings
        return out


def build_clients(config: PipelineConfig) -> dict[str, ClientHandle]:
    if config.mode == "scripted":
        return scripted_clients(load_replay(config.replay))
    return {role: make_http_client(role, config.endpoints[role]) for role in ROLES}


def _check_workspace(workspace: Path) -> None:
    try:
        workspace.mkdir(parents=True, exist_ok=True)
        probe = workspace / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"workspace not writable: {workspace}: {exc}") from exc


def build_toolbelt(config: PipelineConfig, clients: Mapping[str, ClientHandle]) -> Toolbelt:
    embedder = HashEmbedder()
    if config.search_url:
        provider = HttpSearchProvider(config.search_url)
    elif config.search_fixtures:
        provider = FixtureSearchProvider.from_file(config.search_fixtures)
    else:
        provider = FixtureSearchProvider({})
    skills = load_skills(config.skills_dir, embedder) if config.skills_dir else []
    return Toolbelt(
        config.workspace, search_provider=provider, skills=skills, embedder=embedder,
        skill_client=clients.get("sub"), bash_timeout=config.thresholds.bash_timeout_s,
        min_skill_similarity=config.thresholds.skill_min_similarity,
    )


class _Phases:
    def __init__(self, report: RunReport):
        self.report = report
        report.timings.setdefault("phases", {})

    def start(self, name: str) -> None:
        self.report.timings["phases"][name] = {"start": time.time()}

    def done(self, name: str) -> None:
        self.report.timings["phases"][name]["end"] = time.time()
        self.report.phases_completed.append(name)


def _persist_report(report: RunReport, workspace: Path) -> None:
    # report.json is byte-stable across identical runs; timings go beside it.
    _io.atomic_write_json(workspace / RUN_DIR / "report.json", report.to_dict(with_timings=False))
    _io.atomic_write_json(workspace / RUN_DIR / "timings.json", report.timings)


def _evaluate_and_discuss(report: RunReport, contract: RequirementDocument, config: PipelineConfig,
                          clients: Mapping[str, ClientHandle], phases: _Phases) -> None:
    ws = config.workspace
    t = config.thresholds
    phases.start("verify")
    report.evidence = verify_workspace(ws, agent_output(report.subtasks),
                                       timeout=t.exec_timeout_s, max_entries=t.max_entries)
    report.timings["evidence_durations"] = [e.duration for e in report.evidence]
    phases.done("verify")

    phases.start("evaluate")
    prompt = build_eval_prompt(contract, report.subtasks, report.evidence)
    initial = evaluate(clients["eval"], prompt, contract, report.evidence, report.subtasks,
                       weights=config.weights)
    report.initial_evaluation = initial
    ctx = DiscussionContext(contract, report.subtasks, report.evidence)
    outcome = run_discussion(initial, clients["eval"], clients["sub"], ctx,
                             max_rounds=t.discussion_rounds, epsilon=t.convergence_epsilon)
    report.discussion = outcome
    report.evaluation = outcome.final_report
    _io.atomic_write_json(ws / RUN_DIR / "evaluation.json", outcome.final_report.to_dict())
    _io.atomic_write_json(ws / RUN_DIR / "discussion.json", outcome.to_dict(initial))
    if outcome.aborted:
        report.warnings.append(f"discussion aborted: {outcome.error}")
    phases.done("evaluate")


def _close_memory(report: RunReport, config: PipelineConfig, clients: Mapping[str, ClientHandle],
                  store: MemoryStore, history: SessionHistory, accessed: set[str]) -> None:
    summary = report.evaluation.summary if report.evaluation else (report.error or "")
    record_turn(history, report.request, summary or "task finished")
    if config.extract_memories:
        try:
            store.add(extract_memories(history, clients["sub"], clock=store.clock,
                                       initial_score=config.lifecycle.initial_score))
        except GatewayError as exc:
            report.warnings.append(f"memory extraction skipped: {exc}")
    end_session_lifecycle(store, accessed, sub=clients["sub"])


def run_task(request: str, config: PipelineConfig, *,
             clients: Mapping[str, ClientHandle] | None = None,
             history: SessionHistory | None = None) -> RunReport:
    """Run review, planning, execution, verification and evaluation.

    Hard errors stop the pipeline; whatever was completed is persisted and
    the error is recorded on the returned report.
    """
    if not request or not request.strip():
        raise ConfigError("task request must be non-empty")
    config.validate()
    ws = config.workspace
    _check_workspace(ws)
    clients = dict(clients) if clients is not None else build_clients(config)
    history = history if history is not None else SessionHistory()
    t = config.thresholds

    report = RunReport(request)
    phases = _Phases(report)
    store = MemoryStore(config.memory_root, config=config.lifecycle)
    longterm, accessed = prefetch(store)

    try:
        phases.start("review")
        report.review = run_review_loop(request, clients["sub"], clients["eval"],
                                        threshold=t.review_threshold, max_rounds=t.review_rounds)
        _io.atomic_write_json(ws / CONTRACT_FILE, report.review.contract.to_dict())
        phases.done("review")

        phases.start("plan")
        subtasks = decompose(report.review.contract)
        phases.done("plan")

        phases.start("execute")
        toolbelt = build_toolbelt(config, clients)
        trace = execute_plan(
            subtasks, clients["main"], toolbelt, contract=report.review.contract,
            history=history, longterm=longterm, store=SubtaskStore(ws),
            max_steps=t.max_steps, observation_limit=t.observation_limit,
        )
        report.subtasks, report.checkpoints = trace.results, trace.checkpoints
        if trace.failed:
            raise EngineError(f"subtask {trace.results[-1].index} failed: {trace.results[-1].summary}"
                              if trace.results else "execution failed")
        phases.done("execute")

        _evaluate_and_discuss(report, report.review.contract, config, clients, phases)
    except (GatewayError, ContractError, EngineError) as exc:
        log.error("pipeline stopped: %s", exc)
        report.error = f"{type(exc).__name__}: {exc}"

    try:
        _close_memory(report, config, clients, store, history, accessed)
    except Exception as exc:  # noqa: BLE001 - memory must not mask the run outcome
        report.warnings.append(f"memory lifecycle failed: {exc}")
    _persist_report(report, ws)
    return report


def run_eval_only(config: PipelineConfig, *,
                  clients: Mapping[str, ClientHandle] | None = None) -> RunReport:
    """Phases 4-5 on a workspace that already holds contract.json and
    subtask_results.json."""
    ws = config.workspace
    raw = _io.read_json(ws / CONTRACT_FILE)
    if raw is None:
        raise ConfigError(f"no {CONTRACT_FILE} in {ws}")
    contract = RequirementDocument.from_dict(raw)
    clients = dict(clients) if clients is not None else build_clients(config)
    report = RunReport(request="(eval-only)")
    report.subtasks = SubtaskStore.load(ws)
    phases = _Phases(report)
    try:
        _evaluate_and_discuss(report, contract, config, clients, phases)
    except GatewayError as exc:
        report.error = f"{type(exc).__name__}: {exc}"
    _persist_report(report, ws)
    return report


def run_review_only(request: str, config: PipelineConfig, *,
                    clients: Mapping[str, ClientHandle] | None = None) -> ReviewOutcome:
    clients = dict(clients) if clients is not None else build_clients(config)
    t = config.thresholds
    return run_review_loop(request, clients["sub"], clients["eval"],
                           threshold=t.review_threshold, max_rounds=t.review_rounds)
