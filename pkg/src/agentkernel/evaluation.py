"""Six-dimension weighted evaluation with server-side scoring."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .contract import RequirementDocument
from .engine import SubtaskResult
from .gateway import ChatMessage, ClientHandle, Field, complete, extract_structured
from .verifier import ExecutionEvidence, render_evidence

DIMENSIONS = (
    "task_completion", "tool_accuracy", "truthfulness",
    "error_recovery", "efficiency", "output_quality",
)
WEIGHTS: dict[str, float] = {
    "task_completion": 0.30,
    "tool_accuracy": 0.15,
    "truthfulness": 0.20,
    "error_recovery": 0.10,
    "efficiency": 0.10,
    "output_quality": 0.15,
}
GRADE_BINS = (("A", 0.9), ("B", 0.8), ("C", 0.7), ("D", 0.6))
GRADE_ORDER = "FDCBA"
PLAN_OVERLAP = ("high", "medium", "low")
SUMMARY_LIMIT = 50
_GRADE_EPS = 1e-9


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, float(x)))


def grade_for(score: float) -> str:
    for grade, floor in GRADE_BINS:
        if score >= floor - _GRADE_EPS:
            return grade
    return "F"


def weighted_sum(scores: Mapping[str, float], weights: Mapping[str, float] = WEIGHTS) -> float:
    return math.fsum(weights[d] * scores[d] for d in DIMENSIONS)


def compute_overall(scores: Mapping[str, float] | Sequence[float],
                    weights: Mapping[str, float] = WEIGHTS) -> tuple[float, str]:
    """Weighted score and letter grade. Accepts a mapping keyed by dimension
    or six values in dimension order; inputs are clamped to [0, 1]."""
    if not isinstance(scores, Mapping):
        values = list(scores)
        if len(values) != len(DIMENSIONS):
            raise ValueError(f"expected {len(DIMENSIONS)} scores, got {len(values)}")
        scores = dict(zip(DIMENSIONS, values))
    clamped = {d: _clamp01(scores[d]) for d in DIMENSIONS}
    total = weighted_sum(clamped, weights)
    return total, grade_for(total)


@dataclass
class DimensionScore:
    dimension: str
    score: float
    evidence: str
    extras: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"score": self.score, "evidence": self.evidence, **self.extras}


@dataclass
class RequirementAlignment:
    deliverables_met: int
    deliverables_total: int
    criteria_met: int
    criteria_total: int
    plan_overlap: str = "low"
    missing_items: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "deliverables_met": self.deliverables_met,
            "deliverables_total": self.deliverables_total,
            "criteria_met": self.criteria_met,
            "criteria_total": self.criteria_total,
            "plan_overlap": self.plan_overlap,
            "missing_items": list(self.missing_items),
        }


@dataclass
class EvaluationReport:
    dimensions: dict[str, DimensionScore]
    weighted_score: float
    grade: str
    summary: str
    improvement_suggestions: list[str]
    alignment: RequirementAlignment
    fallback_used: bool = False

    def scores(self) -> dict[str, float]:
        return {d: self.dimensions[d].score for d in DIMENSIONS}

    def to_dict(self) -> dict[str, Any]:
        """Serialize in the evaluation JSON layout (summary capped at 50 chars)."""
        out: dict[str, Any] = {d: self.dimensions[d].to_dict() for d in DIMENSIONS}
        out["overall"] = {
            "weighted_score": self.weighted_score,
            "grade": self.grade,
            "summary": self.summary[:SUMMARY_LIMIT],
            "improvement_suggestions": list(self.improvement_suggestions),
            "requirement_alignment": self.alignment.to_dict(),
        }
        out["fallback_used"] = self.fallback_used
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvaluationReport:
        dims = {}
        for d in DIMENSIONS:
            raw = dict(data[d])
            score = raw.pop("score")
            evidence = raw.pop("evidence", "")
            dims[d] = DimensionScore(d, score, evidence, raw)
        ov = data["overall"]
        return cls(dims, ov["weighted_score"], ov["grade"], ov.get("summary", ""),
                   list(ov.get("improvement_suggestions", [])),
                   RequirementAlignment(**ov["requirement_alignment"]),
                   bool(data.get("fallback_used", False)))


_DIM_FIELD = Field("object", fields={
    "score": Field("number", lo=0.0, hi=1.0),
    "evidence": Field("string", required=False),
})
REPORT_SCHEMA = {d: _DIM_FIELD for d in DIMENSIONS} | {
    "overall": Field("object", required=False, fields={
        "summary": Field("string", required=False),
        "improvement_suggestions": Field("list", required=False),
        "requirement_alignment": Field("object", required=False, fields={
            "deliverables_met": Field("integer", required=False, lo=0),
            "criteria_met": Field("integer", required=False, lo=0),
            "plan_overlap": Field("string", required=False),
            "missing_items": Field("list", required=False),
        }),
    }),
}

EVAL_SYSTEM = """You are an independent evaluator. You did not take part in the work below and
see only the evidence presented. Real execution results are the highest-priority evidence.

Score six dimensions from 0.0 to 1.0, each with a one-sentence evidence statement:
task_completion, tool_accuracy, truthfulness, error_recovery, efficiency, output_quality.
Reply with one JSON object and nothing else:
{"task_completion": {"score": <float>, "evidence": "...", "all_subtasks_completed": <bool>, "addresses_user_intent": <bool>},
 "tool_accuracy": {"score": <float>, "evidence": "...", "total_calls": <int>},
 "truthfulness": {"score": <float>, "evidence": "...", "hallucination_detected": <bool>},
 "error_recovery": {"score": <float>, "evidence": "...", "errors_encountered": <int>},
 "efficiency": {"score": <float>, "evidence": "...", "planned_steps": <int>},
 "output_quality": {"score": <float>, "evidence": "...", "files_generated": <int>},
 "overall": {"summary": "<50-char summary>", "improvement_suggestions": ["..."],
   "requirement_alignment": {"deliverables_met": <int>, "deliverables_total": <int>,
     "criteria_met": <int>, "criteria_total": <int>,
     "plan_overlap": "<high|medium|low>", "missing_items": ["..."]}}}"""

ALIGNMENT_INSTRUCTIONS = """Requirement alignment instructions:
1. Verify each key deliverable against the actual outputs.
2. Check each success criterion against measurable outcomes.
3. Assess plan-execution overlap: were the planned steps actually executed?
4. Identify missing or over-designed items."""

REPAIR_PROMPT = "Your reply could not be parsed. Emit only the JSON object, nothing else."


def render_transcript(results: Sequence[SubtaskResult], obs_limit: int = 300) -> str:
    if not results:
        return "no subtasks were executed"
    blocks = []
    for r in results:
        lines = [f"Subtask {r.index} [{r.status}, {r.steps_used} steps]: {r.description}",
                 f"  summary: {r.summary}"]
        if r.files_touched:
            lines.append(f"  files: {', '.join(r.files_touched)}")
        for c in r.tool_log:
            args = json.dumps(c.arguments, ensure_ascii=False, sort_keys=True)
            if len(args) > obs_limit:
                args = args[:obs_limit] + "..."
            obs = " ".join(c.observation.split())[:obs_limit]
            lines.append(f"  - {c.tool_name} {args} -> {'ok' if c.ok else 'ERROR'}: {obs}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def build_eval_prompt(contract: RequirementDocument, transcript: Sequence[SubtaskResult],
                      evidence: Sequence[ExecutionEvidence]) -> str:
    """Evidence first, then the contract, the transcript, and instructions."""
    contract_text = "\n".join([
        "Key deliverables:", *[f"  - {d}" for d in contract.key_deliverables],
        "Success criteria:", *[f"  - {c}" for c in contract.success_criteria],
        "Plan:", *[f"  {i}. {s}" for i, s in enumerate(contract.plan, 1)],
    ])
    return "\n\n".join([
        "## Execution evidence (highest priority)\n" + render_evidence(evidence),
        "## Sprint Contract\n" + contract_text,
        "## Execution transcript\n" + render_transcript(transcript),
        "## Output format\nReply with the JSON object described in your instructions, "
        "with per-dimension scores and evidence only; overall scores are computed for you.",
        "## " + ALIGNMENT_INSTRUCTIONS,
    ])


def _alignment(contract: RequirementDocument, raw: Mapping[str, Any] | None) -> RequirementAlignment:
    raw = raw or {}
    d_total, c_total = len(contract.key_deliverables), len(contract.success_criteria)
    overlap = str(raw.get("plan_overlap", "low")).strip().lower()
    return RequirementAlignment(
        deliverables_met=min(int(raw.get("deliverables_met", 0)), d_total),
        deliverables_total=d_total,
        criteria_met=min(int(raw.get("criteria_met", 0)), c_total),
        criteria_total=c_total,
        plan_overlap=overlap if overlap in PLAN_OVERLAP else "low",
        missing_items=[str(x) for x in raw.get("missing_items", [])],
    )


def report_from_document(doc: Mapping[str, Any], contract: RequirementDocument, *,
                         weights: Mapping[str, float] = WEIGHTS) -> EvaluationReport:
    """Build a report from a validated model document. Model-claimed overall
    scores, grades and alignment totals are discarded and recomputed."""
    dims = {}
    for d in DIMENSIONS:
        raw = dict(doc[d])
        score = _clamp01(raw.pop("score"))
        evidence = str(raw.pop("evidence", "")).strip() or "no evidence given by evaluator"
        dims[d] = DimensionScore(d, score, evidence, raw)
    overall = doc.get("overall", {}) or {}
    weighted, grade = compute_overall({d: dims[d].score for d in DIMENSIONS}, weights)
    return EvaluationReport(
        dimensions=dims,
        weighted_score=weighted,
        grade=grade,
        summary=str(overall.get("summary", "")),
        improvement_suggestions=[str(s) for s in overall.get("improvement_suggestions", [])],
        alignment=_alignment(contract, overall.get("requirement_alignment")),
    )


def evaluate(eval_client: ClientHandle, prompt: str, contract: RequirementDocument,
             evidence: Sequence[ExecutionEvidence],
             transcript: Sequence[SubtaskResult] = (), *,
             weights: Mapping[str, float] = WEIGHTS) -> EvaluationReport:
    """Judge a run. The model supplies per-dimension judgment; arithmetic is
    done here. One repair re-prompt precedes the rule-based fallback."""
    turns = [ChatMessage("user", prompt)]
    for attempt in range(2):
        reply = complete(eval_client, EVAL_SYSTEM, turns)
        result = extract_structured(reply, REPORT_SCHEMA)
        if result.ok:
            return report_from_document(result.document, contract, weights=weights)
        if attempt == 0:
            turns = [*turns, ChatMessage("assistant", reply), ChatMessage("user", REPAIR_PROMPT)]
    return fallback_report(transcript, evidence, contract, weights=weights)


def _has_recovery(results: Sequence[SubtaskResult]) -> bool:
    calls = [c for r in results for c in r.tool_log]
    for i, c in enumerate(calls):
        if not c.ok and any(later.ok and later.tool_name == c.tool_name for later in calls[i + 1:]):
            return True
    return False


def fallback_report(transcript: Sequence[SubtaskResult], evidence: Sequence[ExecutionEvidence],
                    contract: RequirementDocument, *,
                    weights: Mapping[str, float] = WEIGHTS) -> EvaluationReport:
    """Deterministic rule-based report used when the evaluator reply is unusable."""
    calls = [c for r in transcript for c in r.tool_log]
    planned = len(contract.plan)
    completed = sum(r.status == "completed" for r in transcript)

    if not evidence:
        oq, oq_why = 0.5, "rule: no execution evidence, neutral 0.5"
    elif any(e.succeeded for e in evidence):
        oq, oq_why = 0.8, "rule: an entry ran with exit code 0 or passed every HTML check"
    else:
        oq, oq_why = 0.3, "rule: execution evidence exists but every entry failed"

    if transcript:
        tc = completed / len(transcript)
        tc_why = f"rule: {completed}/{len(transcript)} subtasks completed"
    else:
        tc, tc_why = 0.0, "rule: no subtasks were executed"

    if calls:
        ok = sum(c.ok for c in calls)
        ta, ta_why = ok / len(calls), f"rule: {ok}/{len(calls)} tool calls succeeded"
        ef = min(1.0, planned / len(calls))
        ef_why = f"rule: min(1, {planned} planned steps / {len(calls)} tool calls)"
    else:
        ta, ta_why = 0.5, "rule: no tool calls to judge, neutral 0.5"
        ef, ef_why = 0.5, "rule: no tool calls to judge, neutral 0.5"

    errors = sum(not c.ok for c in calls)
    if _has_recovery(transcript):
        er, er_why = 0.8, "rule: a failed tool call was followed by a successful call to the same tool"
    else:
        er, er_why = 0.5, "rule: baseline, no failure-then-success pattern observed"

    files = sorted({p for r in transcript for p in r.files_touched})
    dims = {
        "task_completion": DimensionScore("task_completion", tc, tc_why,
                                          {"all_subtasks_completed": bool(transcript) and completed == len(transcript)}),
        "tool_accuracy": DimensionScore("tool_accuracy", ta, ta_why, {"total_calls": len(calls)}),
        "truthfulness": DimensionScore("truthfulness", 0.5,
                                       "rule: hallucination cannot be judged without an evaluator, neutral 0.5",
                                       {"hallucination_detected": False}),
        "error_recovery": DimensionScore("error_recovery", er, er_why, {"errors_encountered": errors}),
        "efficiency": DimensionScore("efficiency", ef, ef_why, {"planned_steps": planned}),
        "output_quality": DimensionScore("output_quality", oq, oq_why, {"files_generated": len(files)}),
    }
    weighted, grade = compute_overall({d: dims[d].score for d in DIMENSIONS}, weights)
    return EvaluationReport(
        dimensions=dims,
        weighted_score=weighted,
        grade=grade,
        summary="rule-based fallback evaluation",
        improvement_suggestions=[],
        alignment=RequirementAlignment(0, len(contract.key_deliverables), 0,
                                       len(contract.success_criteria), "low", []),
        fallback_used=True,
    )
