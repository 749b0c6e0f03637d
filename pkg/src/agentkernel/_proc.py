"""Shell execution with a process-group watchdog."""

from __future__ import annotations

import os
import signal
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path


@dataclass
class ShellOutcome:
    stdout: str
    stderr: str
    exit_code: int | None
    timed_out: bool
    duration: float


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def run_shell(command: str, cwd: str | Path, timeout: float) -> ShellOutcome:
    """Run ``command`` through the shell in its own process group.

    On timeout the whole group is killed and whatever output was produced
    so far is returned with ``exit_code=None``.
    """
    start = time.monotonic()
    proc = subprocess.Popen(
        command,
        shell=True,
        cwd=str(cwd),
        stdin=subprocess.DEVNULL,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        start_new_session=True,
    )
    try:
        out, err = proc.communicate(timeout=timeout)
        timed_out = False
        code: int | None = proc.returncode
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        try:
            out, err = proc.communicate(timeout=2)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, err = b"", b""
        timed_out = True
        code = None
    finally:
        if proc.poll() is None:
            _kill_group(proc)
            proc.wait()
    return ShellOutcome(
        stdout=out.decode("utf-8", errors="replace"),
        stderr=err.decode("utf-8", errors="replace"),
        exit_code=code,
        timed_out=timed_out,
        duration=time.monotonic() - start,
    )
