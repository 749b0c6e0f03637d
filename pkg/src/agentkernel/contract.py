"""Sprint Contract: generator/evaluator pre-execution review of the plan."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any

from .gateway import ChatMessage, ClientHandle, Field, complete, extract_structured

TAGS = ("SEARCH", "CREATE", "EDIT", "VERIFY")
REVIEW_THRESHOLD = 0.8
MAX_REVIEW_ROUNDS = 3
AUDIT_CRITERIA = ("completeness", "verifiability", "plan_coverage", "risk_identification")

REPAIR_PROMPT = "Your previous reply could not be parsed. Emit only the JSON object, nothing else."


class ContractError(RuntimeError):
    pass


# Checked in order; first hit wins.
_NORMALIZE_RULES = (
    ("SEARCH", ("search", "find", "research")),
    ("CREATE", ("write", "create", "build")),
    ("EDIT", ("modify", "fix", "refine")),
    ("VERIFY", ("test", "check", "validate")),
)

_TAG_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-*]\s*)?\[(search|create|edit|verify)\]\s*", re.IGNORECASE)
_NUMBERING_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-*]\s+)")


def step_tag(step: str) -> str:
    m = _TAG_RE.match(step)
    if not m:
        raise ValueError(f"untagged plan step: {step!r}")
    return m.group(1).upper()


def normalize_step(step: str) -> str:
    """Return ``step`` with exactly one leading ``[TAG]``.

    Present tags are upper-cased; untagged steps are classified by verb.
    """
    m = _TAG_RE.match(step)
    if m:
        return f"[{m.group(1).upper()}] {step[m.end():].strip()}"
    body = _NUMBERING_RE.sub("", step).strip()
    lowered = body.lower()
    for tag, verbs in _NORMALIZE_RULES:
        if any(re.search(rf"\b{re.escape(v)}", lowered) for v in verbs):
            return f"[{tag}] {body}"
    return f"[CREATE] {body}"


@dataclass
class RequirementDocument:
    requirement_summary: str
    key_deliverables: list[str]
    success_criteria: list[str]
    technical_approach: str
    risk_areas: list[str]
    plan: list[str]

    def __post_init__(self) -> None:
        for name in ("key_deliverables", "success_criteria", "plan"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        for step in self.plan:
            step_tag(step)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RequirementDocument:
        return cls(
            requirement_summary=str(data.get("requirement_summary", "")),
            key_deliverables=[str(x) for x in data.get("key_deliverables", [])],
            success_criteria=[str(x) for x in data.get("success_criteria", [])],
            technical_approach=str(data.get("technical_approach", "")),
            risk_areas=[str(x) for x in data.get("risk_areas", [])],
            plan=[normalize_step(str(x)) for x in data.get("plan", [])],
        )

    def render(self) -> str:
        lines = [f"Summary: {self.requirement_summary}", "Key deliverables:"]
        lines += [f"  - {d}" for d in self.key_deliverables]
        lines.append("Success criteria:")
        lines += [f"  - {c}" for c in self.success_criteria]
        lines.append(f"Technical approach: {self.technical_approach}")
        lines.append("Risk areas:")
        lines += [f"  - {r}" for r in self.risk_areas]
        lines.append("Plan:")
        lines += [f"  {i}. {s}" for i, s in enumerate(self.plan, 1)]
        return "\n".join(lines)


CONTRACT_SCHEMA = {
    "requirement_summary": Field("string"),
    "key_deliverables": Field("list"),
    "success_criteria": Field("list"),
    "technical_approach": Field("string", required=False),
    "risk_areas": Field("list", required=False),
    "plan": Field("list"),
}

REVIEW_SCHEMA = {
    "score": Field("number", lo=0.0, hi=1.0),
    "approved": Field("boolean", required=False),
    "feedback": Field("string", required=False),
    "criteria": Field("object", required=False),
}

GENERATOR_SYSTEM = """You are the Generator. Turn the user's request into a requirement document.
Reply with one JSON object and nothing else:
{"requirement_summary": "2-3 sentences",
 "key_deliverables": ["..."],
 "success_criteria": ["quantifiable, verifiable criterion"],
 "technical_approach": "...",
 "risk_areas": ["..."],
 "plan": ["[SEARCH] ...", "[CREATE] ...", "[EDIT] ...", "[VERIFY] ..."]}
Every plan step starts with exactly one of [SEARCH], [CREATE], [EDIT], [VERIFY]."""

EVALUATOR_SYSTEM = """You are the Evaluator auditing a requirement document before execution.
Judge four criteria: completeness (deliverables cover all implicit user needs),
verifiability (success criteria are quantifiable, not vague), plan_coverage
(steps address every deliverable), risk_identification (failure points named).
Reply with one JSON object:
{"score": <0.0-1.0>, "approved": <bool>, "feedback": "...",
 "criteria": {"completeness": "...", "verifiability": "...",
              "plan_coverage": "...", "risk_identification": "..."}}"""


@dataclass
class ReviewVerdict:
    score: float
    approved_flag: bool
    feedback: str
    criteria_notes: dict[str, str] = field(default_factory=dict)


@dataclass
class ReviewOutcome:
    contract: RequirementDocument
    rounds_used: int
    agreement: bool
    round_scores: list[float]
    forced: bool
    verdicts: list[ReviewVerdict] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "contract": self.contract.to_dict(),
            "rounds_used": self.rounds_used,
            "agreement": self.agreement,
            "round_scores": self.round_scores,
            "forced": self.forced,
            "verdicts": [asdict(v) for v in self.verdicts],
        }


def _generation_prompt(user_request: str, previous: RequirementDocument | None,
                       feedback: str | None) -> str:
    parts = [f"User request:\n{user_request}"]
    if previous is not None:
        parts.append("Your previous requirement document:\n"
                     + json.dumps(previous.to_dict(), ensure_ascii=False, indent=2))
    if feedback:
        parts.append(f"Reviewer feedback to address:\n{feedback}")
        parts.append("Revise the document to resolve every point of feedback.")
    return "\n\n".join(parts)


def generate_requirements(user_request: str, generator: ClientHandle, *,
                          previous: RequirementDocument | None = None,
                          feedback: str | None = None) -> RequirementDocument:
    """Ask the generator for a requirement document (or a revision of one).

    One repair re-prompt is issued for an unparseable reply; a second
    failure raises ContractError.
    """
    if not user_request or not user_request.strip():
        raise ValueError("user_request must be non-empty")
    turns = [ChatMessage("user", _generation_prompt(user_request, previous, feedback))]
    for attempt in range(2):
        reply = complete(generator, GENERATOR_SYSTEM, turns)
        result = extract_structured(reply, CONTRACT_SCHEMA)
        if result.ok:
            try:
                return RequirementDocument.from_dict(result.document)
            except ValueError:
                pass
        if attempt == 0:
            turns = [*turns, ChatMessage("assistant", reply), ChatMessage("user", REPAIR_PROMPT)]
    raise ContractError("contract generation failed")


def review_requirements(doc: RequirementDocument, evaluator: ClientHandle, *,
                        user_request: str | None = None,
                        threshold: float = REVIEW_THRESHOLD) -> ReviewVerdict:
    parts = []
    if user_request:
        parts.append(f"Original user request:\n{user_request}")
    parts.append("Requirement document:\n" + json.dumps(doc.to_dict(), ensure_ascii=False, indent=2))
    reply = complete(evaluator, EVALUATOR_SYSTEM, [ChatMessage("user", "\n\n".join(parts))])
    result = extract_structured(reply, REVIEW_SCHEMA)
    if not result.ok:
        return ReviewVerdict(0.0, False, "unparseable review", {})
    d = result.document
    notes = {k: str(v) for k, v in d.get("criteria", {}).items() if k in AUDIT_CRITERIA}
    feedback = d.get("feedback", "").strip()
    if not feedback and d["score"] < threshold:
        feedback = "; ".join(f"{k}: {v}" for k, v in notes.items()) or "score below approval threshold"
    return ReviewVerdict(d["score"], d.get("approved", False), feedback, notes)


def run_review_loop(user_request: str, generator: ClientHandle, evaluator: ClientHandle, *,
                    threshold: float = REVIEW_THRESHOLD,
                    max_rounds: int = MAX_REVIEW_ROUNDS) -> ReviewOutcome:
    """Generate, review, revise until a score reaches ``threshold``.

    Approval depends on the score alone; the reviewer's boolean is kept for
    the record. After ``max_rounds`` the latest revision is adopted anyway.
    """
    doc: RequirementDocument | None = None
    verdict: ReviewVerdict | None = None
    verdicts: list[ReviewVerdict] = []
    for round_no in range(1, max_rounds + 1):
        doc = generate_requirements(
            user_request, generator,
            previous=doc, feedback=verdict.feedback if verdict else None,
        )
        verdict = review_requirements(doc, evaluator, user_request=user_request, threshold=threshold)
        verdicts.append(verdict)
        if verdict.score >= threshold:
            return ReviewOutcome(doc, round_no, True, [v.score for v in verdicts], False, verdicts)
    assert doc is not None
    return ReviewOutcome(doc, max_rounds, False, [v.score for v in verdicts], True, verdicts)
