"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import _io
from .contract import ContractError
from .evaluation import DIMENSIONS, WEIGHTS
from .gateway import GatewayError
from .pipeline import (
    RUN_DIR, ConfigError, PipelineConfig, run_eval_only, run_review_only, run_task,
)


def _config(args: argparse.Namespace, workspace: str | None) -> PipelineConfig:
    overrides: dict[str, Any] = {}
    if workspace:
        overrides["workspace"] = str(Path(workspace).resolve())
    if getattr(args, "scripted", None):
        overrides["mode"] = "scripted"
        overrides["replay"] = str(Path(args.scripted).resolve())
    if args.config:
        return PipelineConfig.load(args.config, **overrides)
    data = {"workspace": overrides.get("workspace", "workspace"), **overrides}
    return PipelineConfig.from_dict(data)


def format_report(data: dict[str, Any]) -> str:
    """Human-readable table of the six scores and the overall grade."""
    ev = data.get("evaluation")
    lines = []
    if data.get("request"):
        lines.append(f"Task: {data['request']}")
    if data.get("error"):
        lines.append(f"Error: {data['error']}")
    if not ev:
        lines.append("No evaluation recorded.")
        return "\n".join(lines)
    lines.append(f"{'dimension':<18}{'weight':>8}{'score':>8}  evidence")
    lines.append("-" * 70)
    for d in DIMENSIONS:
        lines.append(f"{d:<18}{WEIGHTS[d]:>8.2f}{ev[d]['score']:>8.2f}  {ev[d].get('evidence', '')}")
    ov = ev["overall"]
    lines.append("-" * 70)
    lines.append(f"{'weighted score':<18}{'':>8}{ov['weighted_score']:>8.3f}  grade {ov['grade']}")
    ra = ov["requirement_alignment"]
    lines.append(f"deliverables {ra['deliverables_met']}/{ra['deliverables_total']}, "
                 f"criteria {ra['criteria_met']}/{ra['criteria_total']}, "
                 f"plan overlap {ra['plan_overlap']}")
    disc = data.get("discussion")
    if disc:
        lines.append(f"discussion: {disc['reason']} after {disc['rounds_used']} round(s)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentkernel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full five-phase pipeline")
    run.add_argument("--task", required=True)
    run.add_argument("--workspace", required=True)
    run.add_argument("--config")
    run.add_argument("--scripted", metavar="REPLAY")

    ev = sub.add_parser("eval-only", help="verification and evaluation on an existing run")
    ev.add_argument("--workspace", required=True)
    ev.add_argument("--config")
    ev.add_argument("--scripted", metavar="REPLAY")

    rv = sub.add_parser("review-only", help="contract review loop alone")
    rv.add_argument("--task", required=True)
    rv.add_argument("--config")
    rv.add_argument("--scripted", metavar="REPLAY")

    rp = sub.add_parser("report", help="pretty-print a finished run")
    rp.add_argument("--workspace", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            data = _io.read_json(Path(args.workspace) / RUN_DIR / "report.json")
            if data is None:
                print(f"no report in {args.workspace}", file=sys.stderr)
                return 1
            print(format_report(data))
            return 0
        if args.command == "review-only":
            outcome = run_review_only(args.task, _config(args, None))
            print(json.dumps(outcome.contract.to_dict(), indent=2, ensure_ascii=False))
            print(f"rounds={outcome.rounds_used} scores={outcome.round_scores} "
                  f"forced={outcome.forced}", file=sys.stderr)
            return 0
        config = _config(args, args.workspace)
        if args.command == "eval-only":
            report = run_eval_only(config)
        else:
            report = run_task(args.task, config)
        print(format_report(report.to_dict()))
        return report.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, GatewayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
