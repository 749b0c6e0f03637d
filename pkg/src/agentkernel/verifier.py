"""Real execution verification of generated artifacts."""

from __future__ import annotations

import os
import re
import shlex
import shutil
import sys
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from . import _io
from ._proc import run_shell

PRIORITY_NAMES = ("main.py", "app.py", "run.py", "index.py", "start.py")
KIND_BY_SUFFIX = {".py": "script_py", ".html": "page_html", ".htm": "page_html", ".sh": "script_sh"}
DEFAULT_TIMEOUT = 30.0
MAX_ENTRIES = 3

_MAIN_GUARD_RE = re.compile(r"""__name__\s*==\s*['"]__main__['"]""")
_SKIP_DIRS = {".git", ".run", "__pycache__", "node_modules", ".venv"}
HTML_TAGS = ("html", "head", "body")


@dataclass(frozen=True)
class EntryPoint:
    path: str
    kind: str
    stage: int


@dataclass
class ExecutionEvidence:
    entry: EntryPoint
    stdout: str = ""
    stderr: str = ""
    exit_code: int | None = None
    timed_out: bool = False
    duration: float = 0.0
    html_checks: dict[str, bool] | None = None

    def to_dict(self, *, with_duration: bool = True) -> dict[str, Any]:
        d = asdict(self)
        if not with_duration:
            d.pop("duration")
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExecutionEvidence:
        data = dict(data)
        data["entry"] = EntryPoint(**data["entry"])
        return cls(**data)

    @property
    def succeeded(self) -> bool:
        if self.html_checks is not None:
            return all(self.html_checks.values())
        return self.exit_code == 0 and not self.timed_out


def _candidate_files(workspace: Path) -> list[str]:
    found = []
    for root, dirs, files in os.walk(workspace):
        dirs[:] = [d for d in dirs if d not in _SKIP_DIRS and not d.startswith(".")]
        for f in files:
            if Path(f).suffix.lower() in KIND_BY_SUFFIX:
                found.append(Path(root, f).relative_to(workspace).as_posix())
    return sorted(found)


def _has_main_guard(path: Path) -> bool:
    try:
        return bool(_MAIN_GUARD_RE.search(path.read_text(encoding="utf-8", errors="replace")))
    except OSError:
        return False


def stage_of(rel: str, workspace: Path, agent_output: str) -> int | None:
    """Earliest detection stage whose rule matches ``rel``, or None."""
    suffix = Path(rel).suffix.lower()
    if rel in agent_output:
        return 1
    if suffix == ".py" and Path(rel).name in PRIORITY_NAMES:
        return 2
    if suffix == ".py" and _has_main_guard(workspace / rel):
        return 3
    if suffix in (".html", ".htm"):
        return 4
    if suffix == ".sh":
        return 5
    return None


def detect_entry_points(workspace: str | Path, agent_output: str = "") -> list[EntryPoint]:
    """Ordered entry points: by stage, then by path within a stage.

    Stages: (1) path mentioned in ``agent_output``, (2) priority filename,
    (3) Python file with a ``__main__`` guard, (4) HTML page, (5) shell script.
    """
    workspace = Path(workspace)
    entries = []
    for rel in _candidate_files(workspace):
        stage = stage_of(rel, workspace, agent_output or "")
        if stage is not None:
            entries.append(EntryPoint(rel, KIND_BY_SUFFIX[Path(rel).suffix.lower()], stage))
    entries.sort(key=lambda e: (e.stage, e.path))
    return entries


def _interpreter(kind: str) -> str | None:
    if kind == "script_py":
        return shutil.which("python3") or sys.executable or None
    if kind == "script_sh":
        return shutil.which("bash") or shutil.which("sh")
    return None


def run_script(entry: EntryPoint, workspace: str | Path, timeout: float = DEFAULT_TIMEOUT) -> ExecutionEvidence:
    """Execute a script entry and capture its output. Never raises."""
    interp = _interpreter(entry.kind)
    if interp is None:
        return ExecutionEvidence(entry, stderr="interpreter not found")
    command = f"{shlex.quote(interp)} {shlex.quote(entry.path)}"
    try:
        out = run_shell(command, workspace, timeout)
    except OSError as exc:
        return ExecutionEvidence(entry, stderr=f"failed to start: {exc}")
    return ExecutionEvidence(entry, out.stdout, out.stderr, out.exit_code, out.timed_out, out.duration)


def html_checklist(text: str) -> dict[str, bool]:
    low = text.lower()
    opened = {t: re.search(rf"<{t}(\s[^>]*)?>", low) is not None for t in HTML_TAGS}
    closed = {t: re.search(rf"</{t}\s*>", low) is not None for t in HTML_TAGS}
    any_open = any(opened.values())
    return {
        "doctype": "<!doctype html" in low,
        "html_tag": opened["html"],
        "head_tag": opened["head"],
        "body_tag": opened["body"],
        "tags_closed": any_open and all(closed[t] for t in HTML_TAGS if opened[t]),
    }


def validate_html(entry: EntryPoint, workspace: str | Path) -> ExecutionEvidence:
    start = time.monotonic()
    try:
        text = (Path(workspace) / entry.path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        checks = dict.fromkeys(("doctype", "html_tag", "head_tag", "body_tag", "tags_closed"), False)
        return ExecutionEvidence(entry, stderr=f"unreadable: {exc}", html_checks=checks)
    checks = html_checklist(text)
    summary = ", ".join(f"{k}={'ok' if v else 'missing'}" for k, v in checks.items())
    return ExecutionEvidence(entry, stdout=summary, duration=time.monotonic() - start,
                             html_checks=checks)


def verify_workspace(workspace: str | Path, agent_output: str = "", *,
                     timeout: float = DEFAULT_TIMEOUT, max_entries: int = MAX_ENTRIES,
                     persist: bool = True) -> list[ExecutionEvidence]:
    """Detect entries, run or validate the first ``max_entries`` of them, and
    persist the evidence (minus wall-clock durations) to ``.run/evidence.json``."""
    workspace = Path(workspace)
    evidence = []
    for entry in detect_entry_points(workspace, agent_output)[:max_entries]:
        if entry.kind == "page_html":
            evidence.append(validate_html(entry, workspace))
        else:
            evidence.append(run_script(entry, workspace, timeout))
    if persist:
        _io.atomic_write_json(workspace / ".run" / "evidence.json",
                              [e.to_dict(with_duration=False) for e in evidence])
    return evidence


def render_evidence(evidence: Sequence[ExecutionEvidence], limit: int = 2000) -> str:
    if not evidence:
        return "no executable entry points detected"
    blocks = []
    for ev in evidence:
        lines = [f"entry: {ev.entry.path} (kind={ev.entry.kind}, stage={ev.entry.stage})"]
        if ev.html_checks is not None:
            lines += [f"  {k}: {v}" for k, v in ev.html_checks.items()]
        else:
            lines.append(f"  exit_code: {ev.exit_code if ev.exit_code is not None else 'none'}")
            lines.append(f"  timed_out: {ev.timed_out}")
            lines.append(f"  stdout: {ev.stdout[:limit]}")
            lines.append(f"  stderr: {ev.stderr[:limit]}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)
