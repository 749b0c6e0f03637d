"""Working, episodic and long-term memory.

Long-term entries live in ``entries.json``; ``memory_summary.md`` is a
regenerated projection of them and ``USER.md`` is curated by hand and never
written by this module.
"""

from __future__ import annotations

import logging
import re
import time
import uuid
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import _io
from .gateway import ChatMessage, ClientHandle, Field, GatewayError, complete, extract_structured
from .tools import Embedder, HashEmbedder, cosine

log = logging.getLogger(__name__)

USER_FILE = "USER.md"
SUMMARY_FILE = "memory_summary.md"
ENTRIES_FILE = "entries.json"


@dataclass
class LifecycleConfig:
    access_bump: float = 1.0
    decay: float = 0.9
    eviction_floor: float = 0.2
    merge_threshold: float = 0.85
    initial_score: float = 1.0
    summary_limit: int = 50


@dataclass
class MemoryEntry:
    id: str
    content: str
    activity_score: float = 1.0
    created_at: float = 0.0
    last_accessed: float = 0.0
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.activity_score < 0:
            raise ValueError("activity_score must be >= 0")
        if self.source_ids and len(self.source_ids) < 2:
            raise ValueError("consolidated entries need at least two sources")


@dataclass
class SessionHistory:
    turns: list[ChatMessage] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.turns)

    def render(self) -> str:
        return "\n".join(f"{m.role}: {m.content}" for m in self.turns)


def record_turn(history: SessionHistory, user: str, assistant: str) -> None:
    history.turns.append(ChatMessage("user", user))
    history.turns.append(ChatMessage("assistant", assistant))


def new_id() -> str:
    return "m-" + uuid.uuid4().hex[:12]


class MemoryStore:
    """File-backed long-term memory rooted at one directory."""

    def __init__(self, root: str | Path, *, clock: Callable[[], float] = time.time,
                 config: LifecycleConfig | None = None):
        self.root = Path(root)
        self.clock = clock
        self.config = config or LifecycleConfig()
        raw = _io.read_json(self.root / ENTRIES_FILE, default=[]) or []
        self.entries: dict[str, MemoryEntry] = {e["id"]: MemoryEntry(**e) for e in raw}

    def add(self, entries: Iterable[MemoryEntry]) -> None:
        for e in entries:
            self.entries[e.id] = e

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _io.atomic_write_json(self.root / ENTRIES_FILE,
                              [asdict(e) for e in self.ranked()])
        _io.atomic_write_text(self.root / SUMMARY_FILE, self.render_summary())

    def ranked(self) -> list[MemoryEntry]:
        return sorted(self.entries.values(), key=lambda e: (-e.activity_score, e.id))

    def render_summary(self) -> str:
        lines = ["# Memory summary", ""]
        for e in self.ranked()[: self.config.summary_limit]:
            content = " ".join(e.content.split())
            lines.append(f"- [{e.id}] {content}")
        return "\n".join(lines) + "\n"


_SUMMARY_ID_RE = re.compile(r"^- \[([^\]]+)\]", re.MULTILINE)


def prefetch(store: MemoryStore) -> tuple[str, set[str]]:
    """Return USER.md followed by memory_summary.md, and the ids listed in
    the summary. Listed entries get ``last_accessed`` stamped; their score
    bump happens at session end."""
    parts = []
    for name in (USER_FILE, SUMMARY_FILE):
        path = store.root / name
        parts.append(path.read_text(encoding="utf-8") if path.is_file() else "")
    text = "\n".join(p for p in parts if p)
    accessed = set(_SUMMARY_ID_RE.findall(parts[1]))
    now = store.clock()
    for eid in accessed:
        if eid in store.entries:
            store.entries[eid].last_accessed = now
    return text, accessed & set(store.entries)


EXTRACT_SYSTEM = """You extract durable facts about the user from a conversation:
preferences, recurring goals, constraints. Skip transient task details.
Reply with JSON: {"memories": ["fact", ...]}. Use an empty list if nothing is worth keeping."""

EXTRACT_SCHEMA = {"memories": Field("list")}


def extract_memories(conversation: SessionHistory, sub: ClientHandle, *,
                     clock: Callable[[], float] = time.time,
                     make_id: Callable[[], str] = new_id,
                     initial_score: float = 1.0) -> list[MemoryEntry]:
    if not conversation.turns:
        raise ValueError("conversation is empty")
    reply = complete(sub, EXTRACT_SYSTEM, [ChatMessage("user", conversation.render())])
    result = extract_structured(reply, EXTRACT_SCHEMA)
    if not result.ok:
        return []
    now = clock()
    out = []
    for item in result.document["memories"]:
        content = item.get("content") if isinstance(item, dict) else item
        if isinstance(content, str) and content.strip():
            out.append(MemoryEntry(make_id(), content.strip(), initial_score, now, now))
    return out


@dataclass
class LifecycleReport:
    bumped: list[str] = field(default_factory=list)
    decayed: list[str] = field(default_factory=list)
    evicted: list[str] = field(default_factory=list)
    merged: list[tuple[str, str, str]] = field(default_factory=list)
    skipped_merges: list[tuple[str, str]] = field(default_factory=list)


CONSOLIDATE_SYSTEM = """Merge two overlapping memory notes into one concise note that keeps
every distinct fact. Reply with the merged note text only."""


def consolidate(entries: dict[str, MemoryEntry], sub: ClientHandle | None, embedder: Embedder,
                threshold: float, report: LifecycleReport, *,
                clock: Callable[[], float] = time.time,
                make_id: Callable[[], str] = new_id) -> None:
    """Merge pairs whose content similarity is at least ``threshold``.

    Pairs are visited in id order and each entry merges at most once per
    pass. A failed summarization leaves both entries untouched.
    """
    ids = sorted(entries)
    vectors = {i: embedder.embed(entries[i].content) for i in ids}
    used: set[str] = set()
    for ai, a in enumerate(ids):
        if a in used:
            continue
        for b in ids[ai + 1:]:
            if b in used or cosine(vectors[a], vectors[b]) < threshold:
                continue
            ea, eb = entries[a], entries[b]
            try:
                if sub is None:
                    raise GatewayError("no consolidation client")
                merged_text = complete(sub, CONSOLIDATE_SYSTEM, [ChatMessage(
                    "user", f"Note A: {ea.content}\nNote B: {eb.content}")]).strip()
                if not merged_text:
                    raise GatewayError("empty consolidation reply")
            except GatewayError as exc:
                log.warning("skipping merge of %s and %s: %s", a, b, exc)
                report.skipped_merges.append((a, b))
                continue
            now = clock()
            merged = MemoryEntry(
                id=make_id(), content=merged_text,
                activity_score=max(ea.activity_score, eb.activity_score),
                created_at=now, last_accessed=max(ea.last_accessed, eb.last_accessed),
                source_ids=[a, b],
            )
            del entries[a], entries[b]
            entries[merged.id] = merged
            used.update((a, b))
            report.merged.append((a, b, merged.id))
            break


def end_session_lifecycle(store: MemoryStore, accessed: Iterable[str], *,
                          sub: ClientHandle | None = None,
                          embedder: Embedder | None = None) -> LifecycleReport:
    """Bump accessed entries, decay the rest, evict below the floor, merge
    near-duplicates, then rewrite entries.json and memory_summary.md."""
    cfg = store.config
    accessed = set(accessed)
    report = LifecycleReport()
    for eid, entry in sorted(store.entries.items()):
        if eid in accessed:
            entry.activity_score += cfg.access_bump
            report.bumped.append(eid)
        else:
            entry.activity_score *= cfg.decay
            report.decayed.append(eid)
    for eid in sorted(e for e, entry in store.entries.items() if entry.activity_score < cfg.eviction_floor):
        del store.entries[eid]
        report.evicted.append(eid)
    consolidate(store.entries, sub, embedder or HashEmbedder(), cfg.merge_threshold, report,
                clock=store.clock)
    store.save()
    return report
