"""The eight workspace-sandboxed tools and the embedding-matched skill library."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import math
import os
import re
import string
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx
import yaml

from . import _io
from ._proc import run_shell
from .gateway import ChatMessage, ClientHandle, GatewayError, complete

log = logging.getLogger(__name__)

TOOL_NAMES = (
    "bash", "read_file", "write_file", "edit_file",
    "grep", "glob", "baidu_search", "invoke_skill",
)
READ_EDIT_TOOLS = frozenset({"read_file", "edit_file", "grep", "glob"})
ALL_TOOLS = frozenset(TOOL_NAMES)

DEFAULT_BASH_TIMEOUT = 30.0
MIN_SKILL_SIMILARITY = 0.3


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: Mapping[str, str]

    def render(self) -> str:
        params = ", ".join(f"{k}: {v}" for k, v in self.parameters.items())
        return f"- {self.name}({params}): {self.description}"


TOOL_SPECS: dict[str, ToolSpec] = {
    s.name: s for s in (
        ToolSpec("bash", "Run a shell command in the workspace (30s timeout).",
                 {"command": "string"}),
        ToolSpec("read_file", "Read a workspace file; lines are numbered.",
                 {"path": "string"}),
        ToolSpec("write_file", "Create or overwrite a file; parent directories are created.",
                 {"path": "string", "content": "string"}),
        ToolSpec("edit_file", "Replace one exact occurrence of old_string with new_string.",
                 {"path": "string", "old_string": "string", "new_string": "string"}),
        ToolSpec("grep", "Search file contents with a regular expression.",
                 {"pattern": "string", "path": "string (optional)", "include": "glob (optional)"}),
        ToolSpec("glob", "List workspace paths matching a glob pattern, sorted.",
                 {"pattern": "string"}),
        ToolSpec("baidu_search", "Web search; returns ranked title/url/snippet results.",
                 {"query": "string"}),
        ToolSpec("invoke_skill", "Find the best-matching skill and run it on the input.",
                 {"query": "string", "input": "string (optional)"}),
    )
}


@dataclass
class ToolResult:
    ok: bool
    observation: str
    side_effects: list[str] = field(default_factory=list)


class ToolError(Exception):
    """Raised inside a tool; converted into an ``ok=False`` result."""


# ---------------------------------------------------------------------------
# Search providers

class SearchError(Exception):
    pass


class SearchProvider(Protocol):
    def search(self, query: str) -> list[dict[str, str]]: ...


class FixtureSearchProvider:
    """Serves canned results keyed by exact query string."""

    def __init__(self, fixtures: Mapping[str, list[dict[str, str]]]):
        self.fixtures = dict(fixtures)

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureSearchProvider:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def search(self, query: str) -> list[dict[str, str]]:
        return [dict(r) for r in self.fixtures.get(query, [])]


class HttpSearchProvider:
    """GETs ``url?q=<query>`` and expects a JSON list of results (or
    ``{"results": [...]}``)."""

    def __init__(self, url: str, timeout_s: float = 10.0, client: httpx.Client | None = None,
                 limit: int = 10):
        self.url = url
        self.limit = limit
        self.client = client or httpx.Client(timeout=timeout_s)

    def search(self, query: str) -> list[dict[str, str]]:
        try:
            resp = self.client.get(self.url, params={"q": query})
            resp.raise_for_status()
            data = resp.json()
        except httpx.TimeoutException as exc:
            raise SearchError("search provider timeout") from exc
        except (httpx.HTTPError, ValueError) as exc:
            raise SearchError(f"search provider error: {exc}") from exc
        items = data.get("results", []) if isinstance(data, dict) else data
        return [
            {"title": str(it.get("title", "")), "url": str(it.get("url", "")),
             "snippet": str(it.get("snippet", ""))}
            for it in items[: self.limit] if isinstance(it, dict)
        ]


def search(query: str, provider: SearchProvider) -> ToolResult:
    if not query or not query.strip():
        return ToolResult(False, "empty search query")
    try:
        results = provider.search(query)
    except SearchError as exc:
        return ToolResult(False, str(exc))
    except Exception as exc:  # noqa: BLE001 - provider faults become observations
        return ToolResult(False, f"search provider error: {exc}")
    return ToolResult(True, json.dumps(results, ensure_ascii=False, indent=2))


# ---------------------------------------------------------------------------
# Embeddings and skills

class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> list[float]: ...


class HashEmbedder:
    """Deterministic bag-of-words vectorizer using signed token hashing."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for token in re.findall(r"\w+", text.lower()):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            vec[bucket] += 1.0 if digest[4] & 1 else -1.0
        return vec


class StaticEmbedder:
    """Lookup-table embedder for tests that pin exact vectors."""

    def __init__(self, table: Mapping[str, Sequence[float]], dim: int | None = None):
        self.table = {k: [float(x) for x in v] for k, v in table.items()}
        self.dim = dim or len(next(iter(self.table.values())))

    def embed(self, text: str) -> list[float]:
        return list(self.table[text])


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} != {len(b)}")
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    sim = math.fsum(x * y for x, y in zip(a, b)) / (na * nb)
    return max(-1.0, min(1.0, sim))


@dataclass
class SkillEntry:
    name: str
    description: str
    embedding: list[float]
    prompt_template: str = "$input"


@dataclass
class SkillMatch:
    entry: SkillEntry | None
    similarity: float
    diagnostic: str = ""

    def __iter__(self):
        # Allows ``best, similarity = match_skill(...)``.
        return iter((self.entry, self.similarity))


def match_skill(query: str, registry: Sequence[SkillEntry], embedder: Embedder, *,
                min_similarity: float = MIN_SKILL_SIMILARITY) -> SkillMatch:
    """Return the registry entry with the highest cosine similarity to ``query``.

    Ties go to the lexicographically smaller name. Below ``min_similarity``
    (or on embedder failure) the match is empty.
    """
    if not registry:
        raise ValueError("skill registry is empty")
    try:
        q = embedder.embed(query)
        scored = [(cosine(q, e.embedding), e) for e in registry]
    except Exception as exc:  # noqa: BLE001
        return SkillMatch(None, 0.0, f"embedder failure: {exc}")
    best_sim = max(s for s, _ in scored)
    tied = [e for s, e in scored if math.isclose(s, best_sim, rel_tol=0.0, abs_tol=1e-12)]
    best = min(tied, key=lambda e: e.name)
    if best_sim < min_similarity:
        return SkillMatch(None, best_sim, f"best similarity {best_sim:.3f} below {min_similarity}")
    return SkillMatch(best, best_sim)


def _parse_skill_md(text: str) -> tuple[str, str]:
    """Split ``skill.md`` into (description, template).

    The file starts with a YAML front-matter block holding ``description``;
    the remainder is the prompt template (``$input`` is substituted).
    """
    if text.startswith("---"):
        _, front, body = text.split("---", 2)
        meta = yaml.safe_load(front) or {}
        return str(meta.get("description", "")).strip(), body.strip()
    first, _, rest = text.strip().partition("\n\n")
    return first.strip(), rest.strip()


def load_skills(skills_dir: str | Path, embedder: Embedder) -> list[SkillEntry]:
    """Load ``<skills_dir>/<name>/skill.md`` entries, caching embeddings in
    ``<skills_dir>/index.json`` keyed by a hash of the description."""
    skills_dir = Path(skills_dir)
    if not skills_dir.is_dir():
        return []
    index_path = skills_dir / "index.json"
    index = _io.read_json(index_path, default={}) or {}
    entries, fresh, dirty = [], {}, False
    for md in sorted(skills_dir.glob("*/skill.md")):
        name = md.parent.name
        description, template = _parse_skill_md(md.read_text(encoding="utf-8"))
        digest = hashlib.sha256(f"{embedder.dim}:{description}".encode()).hexdigest()
        cached = index.get(name)
        if cached and cached.get("hash") == digest and len(cached.get("embedding", [])) == embedder.dim:
            embedding = cached["embedding"]
        else:
            embedding = embedder.embed(description)
            dirty = True
        fresh[name] = {"hash": digest, "embedding": embedding}
        entries.append(SkillEntry(name, description, embedding, template or "$input"))
    if dirty or set(fresh) != set(index):
        _io.atomic_write_json(index_path, fresh)
    return entries


# ---------------------------------------------------------------------------
# Toolbelt

_SKIP_DIRS = {".git", ".run", ".memory", "__pycache__", "node_modules"}


class Toolbelt:
    """Executes tool calls against one workspace directory."""

    def __init__(self, workspace: str | Path, *,
                 search_provider: SearchProvider | None = None,
                 skills: Sequence[SkillEntry] = (),
                 embedder: Embedder | None = None,
                 skill_client: ClientHandle | None = None,
                 bash_timeout: float = DEFAULT_BASH_TIMEOUT,
                 min_skill_similarity: float = MIN_SKILL_SIMILARITY):
        self.workspace = Path(workspace).resolve()
        self.search_provider = search_provider or FixtureSearchProvider({})
        self.skills = list(skills)
        self.embedder = embedder or HashEmbedder()
        self.skill_client = skill_client
        self.bash_timeout = bash_timeout
        self.min_skill_similarity = min_skill_similarity
        self._handlers: dict[str, Callable[[Mapping[str, Any]], ToolResult]] = {
            "bash": self._bash,
            "read_file": self._read_file,
            "write_file": self._write_file,
            "edit_file": self._edit_file,
            "grep": self._grep,
            "glob": self._glob,
            "baidu_search": self._search,
            "invoke_skill": self._invoke_skill,
        }

    def specs(self, allowed: frozenset[str] | set[str] = ALL_TOOLS) -> list[ToolSpec]:
        return [TOOL_SPECS[n] for n in TOOL_NAMES if n in allowed]

    def resolve(self, rel: str) -> Path:
        if not isinstance(rel, str) or not rel:
            raise ToolError("missing path argument")
        target = (self.workspace / rel).resolve()
        if target != self.workspace and self.workspace not in target.parents:
            raise ToolError("path outside workspace")
        return target

    def relpath(self, path: Path) -> str:
        return path.relative_to(self.workspace).as_posix()

    def execute(self, name: str, args: Mapping[str, Any] | None) -> ToolResult:
        handler = self._handlers.get(name)
        if handler is None:
            return ToolResult(False, f"unknown tool: {name}")
        if args is None:
            args = {}
        if not isinstance(args, Mapping):
            return ToolResult(False, f"{name}: arguments must be an object")
        try:
            return handler(args)
        except ToolError as exc:
            return ToolResult(False, str(exc))
        except GatewayError:
            raise
        except Exception as exc:  # noqa: BLE001 - tool faults become observations
            return ToolResult(False, f"{name} failed: {type(exc).__name__}: {exc}")

    # -- individual tools ---------------------------------------------------

    def _snapshot(self) -> dict[str, tuple[int, int]]:
        snap = {}
        for path in self._walk():
            try:
                st = path.stat()
            except OSError:
                continue
            snap[self.relpath(path)] = (st.st_mtime_ns, st.st_size)
        return snap

    def _walk(self):
        for root, dirs, files in os.walk(self.workspace):
            dirs[:] = sorted(d for d in dirs if d not in _SKIP_DIRS)
            for f in sorted(files):
                p = Path(root, f)
                if p.is_symlink():
                    resolved = p.resolve()
                    if self.workspace not in resolved.parents:
                        continue
                yield p

    def _bash(self, args: Mapping[str, Any]) -> ToolResult:
        command = args.get("command")
        if not isinstance(command, str) or not command.strip():
            raise ToolError("bash: missing command")
        before = self._snapshot()
        out = run_shell(command, self.workspace, self.bash_timeout)
        after = self._snapshot()
        touched = sorted(p for p, sig in after.items() if before.get(p) != sig)
        text = out.stdout
        if out.stderr:
            text += ("\n" if text and not text.endswith("\n") else "") + f"[stderr]\n{out.stderr}"
        if out.timed_out:
            return ToolResult(False, f"{text}\ncommand timed out after {self.bash_timeout:g}s",
                              touched)
        text += f"\n[exit code {out.exit_code}]"
        return ToolResult(out.exit_code == 0, text, touched)

    def _read_file(self, args: Mapping[str, Any]) -> ToolResult:
        path = self.resolve(args.get("path"))
        if not path.is_file():
            raise ToolError(f"file not found: {args.get('path')}")
        lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
        body = "\n".join(f"{i:>5}\t{line}" for i, line in enumerate(lines, 1))
        return ToolResult(True, body)

    def _write_file(self, args: Mapping[str, Any]) -> ToolResult:
        path = self.resolve(args.get("path"))
        content = args.get("content")
        if not isinstance(content, str):
            raise ToolError("write_file: content must be a string")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        rel = self.relpath(path)
        return ToolResult(True, f"wrote {len(content.encode('utf-8'))} bytes to {rel}", [rel])

    def _edit_file(self, args: Mapping[str, Any]) -> ToolResult:
        path = self.resolve(args.get("path"))
        old, new = args.get("old_string"), args.get("new_string")
        if not isinstance(old, str) or not old or not isinstance(new, str):
            raise ToolError("edit_file: old_string (non-empty) and new_string are required")
        if not path.is_file():
            raise ToolError(f"file not found: {args.get('path')}")
        text = path.read_text(encoding="utf-8")
        count = text.count(old)
        if count != 1:
            noun = "occurrence" if count == 1 else "occurrences"
            raise ToolError(f"edit_file: old_string must occur exactly once, found {count} {noun}")
        path.write_text(text.replace(old, new, 1), encoding="utf-8")
        rel = self.relpath(path)
        return ToolResult(True, f"edited {rel}", [rel])

    def _grep(self, args: Mapping[str, Any]) -> ToolResult:
        pattern = args.get("pattern")
        if not isinstance(pattern, str) or not pattern:
            raise ToolError("grep: missing pattern")
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            raise ToolError(f"grep: bad pattern: {exc}") from exc
        base = self.resolve(args.get("path") or ".")
        include = args.get("include")
        files = [base] if base.is_file() else [
            p for p in self._walk() if base == p or base in p.parents
        ]
        hits = []
        for p in files:
            rel = self.relpath(p)
            if include and not fnmatch.fnmatch(p.name, include) and not fnmatch.fnmatch(rel, include):
                continue
            try:
                text = p.read_text(encoding="utf-8")
            except (UnicodeDecodeError, OSError):
                continue
            for n, line in enumerate(text.splitlines(), 1):
                if rx.search(line):
                    hits.append(f"{rel}:{n}: {line}")
        return ToolResult(True, "\n".join(hits) if hits else "no matches")

    def _glob(self, args: Mapping[str, Any]) -> ToolResult:
        pattern = args.get("pattern")
        if not isinstance(pattern, str) or not pattern:
            raise ToolError("glob: missing pattern")
        if Path(pattern).is_absolute() or ".." in Path(pattern).parts:
            raise ToolError("path outside workspace")
        matches = sorted(
            self.relpath(p) for p in self.workspace.glob(pattern)
            if p.resolve() == self.workspace or self.workspace in p.resolve().parents
        )
        return ToolResult(True, "\n".join(matches) if matches else "no matches")

    def _search(self, args: Mapping[str, Any]) -> ToolResult:
        return search(str(args.get("query", "")), self.search_provider)

    def _invoke_skill(self, args: Mapping[str, Any]) -> ToolResult:
        query = args.get("query") or args.get("skill") or ""
        if not isinstance(query, str) or not query.strip():
            raise ToolError("invoke_skill: missing query")
        if not self.skills:
            return ToolResult(False, "no skills registered")
        match = match_skill(query, self.skills, self.embedder,
                            min_similarity=self.min_skill_similarity)
        if match.entry is None:
            return ToolResult(False, f"no matching skill ({match.diagnostic})")
        if self.skill_client is None:
            return ToolResult(False, f"skill {match.entry.name} matched but no client configured")
        prompt = string.Template(match.entry.prompt_template).safe_substitute(
            input=str(args.get("input", query)), query=query)
        reply = complete(self.skill_client, f"You are executing the skill '{match.entry.name}'.",
                         [ChatMessage("user", prompt)])
        return ToolResult(True, f"skill {match.entry.name} (similarity {match.similarity:.3f}):\n{reply}")


def execute_tool(name: str, args: Mapping[str, Any], workspace: str | Path, **kwargs: Any) -> ToolResult:
    return Toolbelt(workspace, **kwargs).execute(name, args)
