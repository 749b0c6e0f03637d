"""Role-isolated chat-completion clients and structured-output extraction.

Three handles exist per pipeline (``main`` executes, ``sub`` generates and
defends, ``eval`` judges). Each handle owns its message log; nothing in this
module ever copies messages from one handle to another.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx

log = logging.getLogger(__name__)

ROLES = ("main", "sub", "eval")
MESSAGE_ROLES = ("system", "user", "assistant", "tool")


class GatewayError(RuntimeError):
    """Hard failure: the current phase must abort."""


class TransientError(RuntimeError):
    """Retriable transport failure."""


class ScriptExhausted(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"invalid message role: {self.role!r}")
        if self.content is None:
            raise ValueError("message content must not be None")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass
class EndpointConfig:
    model: str = "scripted"
    base_url: str = ""
    api_key_env: str = ""
    timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 1.0
    temperature: float = 0.0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EndpointConfig:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# A transport takes the full message list for one request and returns the
# assistant text. It raises TransientError for retriable failures.
Transport = Callable[[list[ChatMessage]], str]


@dataclass(eq=False)
class ClientHandle:
    role: str
    config: EndpointConfig
    transport: Transport
    context: list[ChatMessage] = field(default_factory=list)
    last_attempts: int = 0
    sleep: Callable[[float], None] = time.sleep
    _busy: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"invalid client role: {self.role!r}")


def complete(handle: ClientHandle, system_prompt: str, user_turns: Sequence[ChatMessage]) -> str:
    """Send one request on ``handle`` and return the assistant text.

    Transient transport errors are retried with exponential backoff up to
    ``config.max_retries`` attempts in total; after that a GatewayError is
    raised. The exchange is appended to ``handle.context`` only on success.
    """
    if not system_prompt or not system_prompt.strip():
        raise ValueError("system prompt must be non-empty")
    messages = [ChatMessage("system", system_prompt), *user_turns]
    if not handle._busy.acquire(blocking=False):
        raise RuntimeError(f"client {handle.role!r} already has a request in flight")
    try:
        attempts = max(1, handle.config.max_retries)
        delay = handle.config.backoff_s
        for attempt in range(1, attempts + 1):
            handle.last_attempts = attempt
            try:
                reply = handle.transport(messages)
            except TransientError as exc:
                log.warning("%s: attempt %d/%d failed: %s", handle.role, attempt, attempts, exc)
                if attempt == attempts:
                    raise GatewayError(
                        f"endpoint for role={handle.role} failed after {attempt} attempts: {exc}"
                    ) from exc
                if delay > 0:
                    handle.sleep(delay)
                delay *= 2
                continue
            handle.context.extend(messages)
            handle.context.append(ChatMessage("assistant", reply))
            return reply
        raise AssertionError("unreachable")
    finally:
        handle._busy.release()


class ScriptedTransport:
    """Replays canned replies in call order, ignoring prompt content."""

    def __init__(self, role: str, script: Iterable[str]):
        self.role = role
        self.script = list(script)
        self.turn = 0

    def __call__(self, messages: list[ChatMessage]) -> str:
        self.turn += 1
        if self.turn > len(self.script):
            raise ScriptExhausted(f"script exhausted: role={self.role} turn={self.turn}")
        return self.script[self.turn - 1]

    @property
    def remaining(self) -> int:
        return len(self.script) - min(self.turn, len(self.script))


def make_scripted_client(role: str, script: Sequence[str]) -> ClientHandle:
    if not script:
        raise ValueError("script must be non-empty")
    config = EndpointConfig(model=f"scripted-{role}", max_retries=1, backoff_s=0.0)
    return ClientHandle(role=role, config=config, transport=ScriptedTransport(role, script))


def load_replay(path: str | Path) -> dict[str, list[str]]:
    """Read a JSON-lines replay file of ``{"role": ..., "reply": ...}`` records.

    Records interleave all roles in call order; each role's replies are
    returned in their original relative order.
    """
    scripts: dict[str, list[str]] = {role: [] for role in ROLES}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            record = json.loads(line)
            role, reply = record["role"], record["reply"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad replay record: {exc}") from exc
        if role not in scripts:
            raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
        scripts[role].append(str(reply))
    return scripts


def scripted_clients(scripts: Mapping[str, Sequence[str]]) -> dict[str, ClientHandle]:
    clients = {}
    for role in ROLES:
        script = list(scripts.get(role, ()))
        if script:
            clients[role] = make_scripted_client(role, script)
        else:
            # An empty script is legal for a role that is never called.
            clients[role] = ClientHandle(
                role=role,
                config=EndpointConfig(model=f"scripted-{role}", max_retries=1, backoff_s=0.0),
                transport=ScriptedTransport(role, []),
            )
    return clients


class HttpTransport:
    """OpenAI-compatible ``/chat/completions`` transport."""

    def __init__(self, config: EndpointConfig, api_key: str | None = None,
                 client: httpx.Client | None = None):
        self.config = config
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=config.timeout_s)

    def __call__(self, messages: list[ChatMessage]) -> str:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {
            "model": self.config.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": self.config.temperature,
        }
        try:
            resp = self.client.post(url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"malformed completion payload: {exc}") from exc


def make_http_client(role: str, config: EndpointConfig, env: Mapping[str, str] | None = None,
                     client: httpx.Client | None = None) -> ClientHandle:
    import os

    env = os.environ if env is None else env
    key = env.get(config.api_key_env) if config.api_key_env else None
    return ClientHandle(role=role, config=config, transport=HttpTransport(config, key, client))


# ---------------------------------------------------------------------------
# Structured extraction

@dataclass(frozen=True)
class Field:
    """One entry of a field-spec. ``kind`` is one of number, integer,
    string, boolean, list, object. Numeric bounds clamp rather than reject."""

    kind: str
    required: bool = True
    lo: float | None = None
    hi: float | None = None
    fields: Mapping[str, Field] | None = None


Schema = Mapping[str, Field]

PARSE_LAYERS = ("direct", "fenced", "bracket", "repaired")


@dataclass
class ExtractionResult:
    status: str
    document: dict[str, Any]
    layer_used: str
    attempted: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "parsed"


_MISSING = object()


def _coerce(value: Any, spec: Field) -> Any:
    """Return the value normalized to ``spec`` or ``_MISSING`` if unusable."""
    kind = spec.kind
    if kind in ("number", "integer"):
        if isinstance(value, bool):
            return _MISSING
        if isinstance(value, str):
            try:
                value = float(value.strip().rstrip("%")) if value.strip() else _MISSING
            except ValueError:
                return _MISSING
            if value is _MISSING:
                return _MISSING
        if not isinstance(value, (int, float)) or math.isnan(value):
            return _MISSING
        if spec.lo is not None:
            value = max(spec.lo, value)
        if spec.hi is not None:
            value = min(spec.hi, value)
        if math.isinf(value):
            return _MISSING
        if kind == "integer":
            return int(value)
        return float(value)
    if kind == "string":
        if isinstance(value, str):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        return _MISSING
    if kind == "boolean":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "false"):
            return value.strip().lower() == "true"
        return _MISSING
    if kind == "list":
        return list(value) if isinstance(value, list) else _MISSING
    if kind == "object":
        if not isinstance(value, dict):
            return _MISSING
        if spec.fields:
            return validate_document(value, spec.fields)
        return dict(value)
    raise ValueError(f"unknown field kind {kind!r}")


def validate_document(doc: Any, schema: Schema) -> Any:
    """Validate and clamp ``doc`` against ``schema``.

    Returns a cleaned copy, or ``_MISSING`` when a required field is absent
    or has the wrong type. Unknown keys pass through untouched; optional
    fields with unusable values are dropped.
    """
    if not isinstance(doc, dict):
        return _MISSING
    out = dict(doc)
    for name, spec in schema.items():
        if name not in doc or doc[name] is None:
            out.pop(name, None)
            if spec.required:
                return _MISSING
            continue
        value = _coerce(doc[name], spec)
        if value is _MISSING:
            if spec.required:
                return _MISSING
            out.pop(name)
        else:
            out[name] = value
    return out


_FENCE_RE = re.compile(r"```[ \t]*[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```", re.DOTALL)


def _fenced_blocks(text: str) -> list[str]:
    return [m.group(1) for m in _FENCE_RE.finditer(text)]


def balanced_brace_spans(text: str) -> list[str]:
    """All balanced ``{...}`` substrings, string-literal aware, longest first."""
    spans = []
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_str = False
        escape = False
        for pos in range(start, len(text)):
            c = text[pos]
            if in_str:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    spans.append((start, pos + 1))
                    break
    spans.sort(key=lambda s: (-(s[1] - s[0]), s[0]))
    return [text[a:b] for a, b in spans]


def _loads(candidate: str) -> Any:
    try:
        return json.loads(candidate)
    except (ValueError, RecursionError):
        return _MISSING


_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")
_PY_LITERALS = {"True": "true", "False": "false", "None": "null"}


def _close_truncated(text: str) -> str:
    stack = []
    in_str = False
    escape = False
    for c in text:
        if in_str:
            if escape:
                escape = False
            elif c == "\\":
                escape = True
            elif c == '"':
                in_str = False
            continue
        if c == '"':
            in_str = True
        elif c in "{[":
            stack.append("}" if c == "{" else "]")
        elif c in "}]" and stack:
            stack.pop()
    tail = '"' if in_str else ""
    body = (text + tail).rstrip()
    body = re.sub(r"[,:]\s*$", "", body)
    return body + "".join(reversed(stack))


def repair_json_text(text: str) -> str:
    """Best-effort cleanup of near-JSON emitted by models."""
    s = text.strip()
    s = (s.replace("“", '"').replace("”", '"')
          .replace("‘", "'").replace("’", "'"))
    s = re.sub(r"//[^\n\"]*$", "", s, flags=re.MULTILINE)
    if '"' not in s and "'" in s:
        s = s.replace("'", '"')
    s = re.sub(r"\b(True|False|None)\b", lambda m: _PY_LITERALS[m.group(1)], s)
    s = _close_truncated(s)
    s = _TRAILING_COMMA_RE.sub(r"\1", s)
    return s


def _repair_candidates(text: str) -> list[str]:
    cands = list(_fenced_blocks(text))
    first = text.find("{")
    if first != -1:
        last = text.rfind("}")
        if last > first:
            cands.append(text[first:last + 1])
        cands.append(text[first:])
    return cands


def extract_structured(raw: str | None, schema: Schema) -> ExtractionResult:
    """Pull a JSON object matching ``schema`` out of free-form model text.

    Layers run in order: direct parse, first fenced block, balanced-brace
    substrings (longest first), repaired near-JSON, then a fallback signal.
    Numeric fields are clamped to their declared ranges. Never raises.
    """
    text = raw if isinstance(raw, str) else ""
    attempted: list[str] = []

    def accept(candidates: Iterable[str], layer: str, repair: bool = False) -> ExtractionResult | None:
        attempted.append(layer)
        for cand in candidates:
            try:
                parsed = _loads(repair_json_text(cand) if repair else cand)
                if parsed is _MISSING:
                    continue
                doc = validate_document(parsed, schema)
            except Exception:  # noqa: BLE001 - extraction is total
                continue
            if doc is not _MISSING:
                return ExtractionResult("parsed", doc, layer, tuple(attempted))
        return None

    try:
        fenced = _fenced_blocks(text)
        for layer, cands, repair in (
            ("direct", [text.strip()], False),
            ("fenced", fenced[:1], False),
            ("bracket", balanced_brace_spans(text), False),
            ("repaired", _repair_candidates(text), True),
        ):
            result = accept(cands, layer, repair)
            if result is not None:
                return result
    except Exception as exc:  # noqa: BLE001
        log.debug("extraction crashed: %s", exc)
    attempted.append("rule_fallback")
    return ExtractionResult("fallback", {}, "rule_fallback", tuple(attempted))
