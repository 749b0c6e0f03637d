"""Evaluator-Defender adversarial discussion."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

from .contract import RequirementDocument
from .engine import SubtaskResult
from .evaluation import (
    EVAL_SYSTEM, REPORT_SCHEMA, EvaluationReport, render_transcript, report_from_document,
)
from .gateway import ChatMessage, ClientHandle, GatewayError, complete, extract_structured
from .verifier import ExecutionEvidence, render_evidence

log = logging.getLogger(__name__)

ACCEPT_PHRASES = ("I agree with this evaluation conclusion",)
REBUTTAL_LIMIT = 200
MAX_ROUNDS = 20
CONVERGENCE_EPSILON = 0.05
_DELTA_EPS = 1e-9


@dataclass
class DefenderStance:
    kind: str
    text: str


@dataclass
class DiscussionRound:
    round: int
    stance: DefenderStance
    revised_report: EvaluationReport
    score_delta: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "stance": {"kind": self.stance.kind, "text": self.stance.text},
            "revised_report": self.revised_report.to_dict(),
            "score_delta": self.score_delta,
        }


@dataclass
class ConsensusOutcome:
    reason: str
    final_report: EvaluationReport
    rounds_used: int
    rounds: list[DiscussionRound] = field(default_factory=list)
    aborted: bool = False
    error: str = ""

    def to_dict(self, initial: EvaluationReport | None = None) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if initial is not None:
            out["initial_report"] = initial.to_dict()
        out |= {
            "reason": self.reason,
            "rounds_used": self.rounds_used,
            "aborted": self.aborted,
            "error": self.error,
            "rounds": [r.to_dict() for r in self.rounds],
            "final_report": self.final_report.to_dict(),
        }
        return out


@dataclass
class DiscussionContext:
    contract: RequirementDocument
    transcript: Sequence[SubtaskResult] = ()
    evidence: Sequence[ExecutionEvidence] = ()


DEFENDER_SYSTEM = f"""You are the Defender. You represent the executor's perspective on an
evaluation of its work. Read the execution record and the evaluation report.
If the evaluation is fair, reply exactly: "{ACCEPT_PHRASES[0]}".
Otherwise reply with a factual rebuttal citing the record, at most {REBUTTAL_LIMIT} characters."""

REVISION_PROMPT = """The Defender disputes your evaluation:
"{rebuttal}"

Re-examine the execution evidence below and adjust scores only where the defense is
warranted. Reply with the complete JSON report in the same format as before."""


def _report_brief(report: EvaluationReport) -> str:
    return json.dumps(report.to_dict(), ensure_ascii=False, indent=2)


def classify_defense(reply: str | None, phrases: Sequence[str] = ACCEPT_PHRASES) -> DefenderStance:
    text = (reply or "").strip()
    if not text:
        return DefenderStance("accept", ACCEPT_PHRASES[0])
    low = text.lower()
    if any(p.lower() in low for p in phrases):
        return DefenderStance("accept", text)
    return DefenderStance("rebuttal", text[:REBUTTAL_LIMIT])


def defender_turn(report: EvaluationReport, transcript: Sequence[SubtaskResult],
                  defender: ClientHandle, *,
                  phrases: Sequence[str] = ACCEPT_PHRASES) -> DefenderStance:
    brief = ("## Execution record\n" + render_transcript(transcript)
             + "\n\n## Evaluation report\n" + _report_brief(report))
    return classify_defense(complete(defender, DEFENDER_SYSTEM, [ChatMessage("user", brief)]), phrases)


def evaluator_rebuttal_turn(report: EvaluationReport, rebuttal: DefenderStance,
                            eval_client: ClientHandle, context: DiscussionContext) -> EvaluationReport:
    """Revised report after a rebuttal; unparseable replies keep ``report``."""
    if rebuttal.kind != "rebuttal":
        raise ValueError("evaluator_rebuttal_turn needs a rebuttal stance")
    prompt = "\n\n".join([
        REVISION_PROMPT.format(rebuttal=rebuttal.text),
        "## Your previous report\n" + _report_brief(report),
        "## Execution evidence (highest priority)\n" + render_evidence(context.evidence),
    ])
    reply = complete(eval_client, EVAL_SYSTEM, [ChatMessage("user", prompt)])
    result = extract_structured(reply, REPORT_SCHEMA)
    if not result.ok:
        return report
    return report_from_document(result.document, context.contract)


def run_discussion(initial: EvaluationReport, eval_client: ClientHandle, defender: ClientHandle,
                   context: DiscussionContext, *,
                   max_rounds: int = MAX_ROUNDS,
                   epsilon: float = CONVERGENCE_EPSILON,
                   phrases: Sequence[str] = ACCEPT_PHRASES) -> ConsensusOutcome:
    """Alternate defender and evaluator turns until the defender accepts,
    the weighted score moves by at most ``epsilon`` between rounds, or
    ``max_rounds`` rounds have run."""
    latest = initial
    rounds: list[DiscussionRound] = []
    for n in range(1, max_rounds + 1):
        try:
            stance = defender_turn(latest, context.transcript, defender, phrases=phrases)
            if stance.kind == "accept":
                rounds.append(DiscussionRound(n, stance, latest, 0.0))
                return ConsensusOutcome("defender_accept", latest, n, rounds)
            revised = evaluator_rebuttal_turn(latest, stance, eval_client, context)
        except GatewayError as exc:
            log.error("discussion aborted in round %d: %s", n, exc)
            return ConsensusOutcome("round_ceiling", latest, len(rounds), rounds,
                                    aborted=True, error=str(exc))
        delta = abs(revised.weighted_score - latest.weighted_score)
        rounds.append(DiscussionRound(n, stance, revised, delta))
        latest = revised
        if delta <= epsilon + _DELTA_EPS:
            return ConsensusOutcome("score_converged", latest, n, rounds)
    return ConsensusOutcome("round_ceiling", latest, max_rounds, rounds)
