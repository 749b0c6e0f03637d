import json

import pytest

from agentkernel.contract import RequirementDocument
from agentkernel.discussion import (
    DiscussionContext, classify_defense, evaluator_rebuttal_turn, run_discussion,
)
from agentkernel.evaluation import DIMENSIONS, report_from_document
from agentkernel.gateway import make_scripted_client
from scenarios import TRAVEL_CONTRACT, REFERENCE_SCORES, scored_report

CONTRACT = RequirementDocument.from_dict(TRAVEL_CONTRACT)
CTX = DiscussionContext(CONTRACT)
ACCEPT = "I agree with this evaluation conclusion."


def uniform(x):
    return scored_report(scores=dict.fromkeys(DIMENSIONS, x))


def report(doc):
    return report_from_document(doc, CONTRACT)


def test_classify():
    assert classify_defense("I agree with this evaluation conclusion").kind == "accept"
    assert classify_defense("").kind == "accept"
    stance = classify_defense("y" * 350)
    assert stance.kind == "rebuttal" and len(stance.text) == 200
    assert classify_defense("Well, ok", phrases=("well, ok",)).kind == "accept"


def test_accept_first_round():
    initial = report(scored_report())
    out = run_discussion(initial, make_scripted_client("eval", ["unused"]),
                         make_scripted_client("sub", [ACCEPT]), CTX)
    assert (out.reason, out.rounds_used) == ("defender_accept", 1)
    assert out.final_report is initial


def test_convergence():
    initial = report(uniform(0.75))
    out = run_discussion(initial, make_scripted_client("eval", [json.dumps(uniform(0.78))]),
                         make_scripted_client("sub", ["The HTML validated, raise output quality."]), CTX)
    assert (out.reason, out.rounds_used) == ("score_converged", 1)
    assert out.rounds[0].score_delta == pytest.approx(0.03)


def test_round_ceiling_with_oscillation():
    initial = report(uniform(0.7))
    revisions = [json.dumps(uniform(0.8 if i % 2 == 0 else 0.7)) for i in range(20)]
    rebuttal = "z" * 300
    out = run_discussion(initial, make_scripted_client("eval", revisions),
                         make_scripted_client("sub", [rebuttal] * 20), CTX)
    assert (out.reason, out.rounds_used) == ("round_ceiling", 20)
    assert len(out.rounds) == 20
    assert all(len(r.stance.text) <= 200 for r in out.rounds)
    assert all(r.score_delta == pytest.approx(0.1) for r in out.rounds)
    saved = out.to_dict(initial)
    assert len(saved["rounds"]) == 20
    assert all(len(r["stance"]["text"]) <= 200 for r in saved["rounds"])


def test_revision_arithmetic():
    scores = dict(REFERENCE_SCORES, tool_accuracy=0.8)
    prior = report(scored_report())
    revised = evaluator_rebuttal_turn(prior, classify_defense("tool use was fine"),
                                      make_scripted_client("eval", [json.dumps(scored_report(scores=scores))]), CTX)
    assert revised.weighted_score == pytest.approx(0.82 + 0.15 * 0.1, abs=1e-9)
    assert revised.weighted_score == pytest.approx(0.835, abs=1e-9)


def test_identical_reemission_converges():
    prior = report(scored_report())
    out = run_discussion(prior, make_scripted_client("eval", [json.dumps(scored_report())]),
                         make_scripted_client("sub", ["disagree"]), CTX)
    assert out.reason == "score_converged" and out.rounds[0].score_delta == 0.0


def test_garbage_revision_keeps_prior():
    prior = report(scored_report())
    revised = evaluator_rebuttal_turn(prior, classify_defense("disagree"),
                                      make_scripted_client("eval", ["<<garbage>>"]), CTX)
    assert revised is prior


def test_gateway_failure_aborts_with_latest_report():
    prior = report(scored_report())
    out = run_discussion(prior, make_scripted_client("eval", ["x"]),
                         make_scripted_client("sub", ["disagree"]), CTX)
    # the garbage revision converges at delta 0 before the defender is asked again
    assert out.reason == "score_converged"
    out = run_discussion(prior, make_scripted_client("eval", [json.dumps(uniform(0.1))]),
                         make_scripted_client("sub", ["disagree"]), CTX)
    assert out.aborted and "script exhausted" in out.error
    assert out.rounds_used == 1
