import itertools
import json

import pytest

from agentkernel.gateway import make_scripted_client
from agentkernel.memory import (
    LifecycleConfig, MemoryEntry, MemoryStore, SessionHistory, end_session_lifecycle,
    extract_memories, prefetch, record_turn,
)
from agentkernel.tools import StaticEmbedder


def _ids():
    counter = itertools.count(1)
    return lambda: f"n{next(counter)}"


def _store(root, entries):
    store = MemoryStore(root, clock=lambda: 100.0)
    store.add(entries)
    store.save()
    return MemoryStore(root, clock=lambda: 100.0)


def test_session_history_counts():
    h = SessionHistory()
    assert len(h) == 0
    record_turn(h, "u1", "a1")
    record_turn(h, "u2", "a2")
    assert len(h) == 4
    assert "user: u2" in h.render()


def test_extract_two_facts():
    h = SessionHistory()
    record_turn(h, "I always travel by train", "noted")
    sub = make_scripted_client("sub", [json.dumps({"memories": ["likes trains", "prefers HTML"]})])
    out = extract_memories(h, sub, clock=lambda: 5.0, make_id=_ids())
    assert [e.content for e in out] == ["likes trains", "prefers HTML"]
    assert all(e.activity_score == 1.0 and e.created_at == 5.0 for e in out)


@pytest.mark.parametrize("reply", ['{"memories": []}', "nothing salient here", "{{garbage"])
def test_extract_empty_or_garbage(reply):
    h = SessionHistory()
    record_turn(h, "hi", "hello")
    assert extract_memories(h, make_scripted_client("sub", [reply])) == []


def test_extract_rejects_empty_conversation():
    with pytest.raises(ValueError):
        extract_memories(SessionHistory(), make_scripted_client("sub", ["{}"]))


def test_prefetch_order_and_absence(tmp_path):
    store = MemoryStore(tmp_path / "mem")
    assert prefetch(store) == ("", set())
    store = _store(tmp_path / "mem", [MemoryEntry("e1", "fact one"), MemoryEntry("e2", "fact two")])
    (tmp_path / "mem" / "USER.md").write_text("Name: Sam\n")
    text, accessed = prefetch(store)
    assert text.index("Name: Sam") < text.index("[e1] fact one")
    assert accessed == {"e1", "e2"}
    assert store.entries["e1"].last_accessed == 100.0


def test_prefetched_entries_are_bumped(tmp_path):
    store = _store(tmp_path, [MemoryEntry("e1", "alpha"), MemoryEntry("e2", "beta")])
    _, accessed = prefetch(store)
    end_session_lifecycle(store, accessed, embedder=StaticEmbedder({"alpha": [1, 0], "beta": [0, 1]}))
    assert {e.id: e.activity_score for e in store.entries.values()} == {"e1": 2.0, "e2": 2.0}


def test_bump_and_decay(tmp_path):
    store = _store(tmp_path, [MemoryEntry("acc", "alpha", 1.0), MemoryEntry("idle", "beta", 1.0)])
    report = end_session_lifecycle(store, {"acc"},
                                   embedder=StaticEmbedder({"alpha": [1, 0], "beta": [0, 1]}))
    assert store.entries["acc"].activity_score == 2.0
    assert store.entries["idle"].activity_score == pytest.approx(0.9)
    assert report.bumped == ["acc"] and report.decayed == ["idle"]


def test_eviction_below_floor(tmp_path):
    store = _store(tmp_path, [MemoryEntry("old", "alpha", 0.21), MemoryEntry("ok", "beta", 0.5)])
    report = end_session_lifecycle(store, set(),
                                   embedder=StaticEmbedder({"alpha": [1, 0], "beta": [0, 1]}))
    assert report.evicted == ["old"]
    assert set(store.entries) == {"ok"}
    assert "old" not in (tmp_path / "memory_summary.md").read_text()


def test_sessions_until_eviction():
    # oracle: smallest n with 0.9**n < 0.2
    n = next(k for k in range(100) if 0.9 ** k < 0.2)
    score, sessions = 1.0, 0
    cfg = LifecycleConfig()
    while score >= cfg.eviction_floor:
        score *= cfg.decay
        sessions += 1
    assert sessions == n == 16


def test_consolidation_carries_max_and_sources(tmp_path):
    a, b = "User likes trains.", "User likes trains a lot."
    store = _store(tmp_path, [MemoryEntry("d1", a, 1.0 / 0.9), MemoryEntry("d2", b, 0.5 / 0.9)])
    sub = make_scripted_client("sub", ["User strongly likes trains."])
    report = end_session_lifecycle(store, set(), sub=sub,
                                   embedder=StaticEmbedder({a: [1, 0.1], b: [1, 0.12]}))
    (merged,) = store.entries.values()
    assert merged.activity_score == pytest.approx(1.0)
    assert merged.source_ids == ["d1", "d2"]
    assert merged.content == "User strongly likes trains."
    assert report.merged[0][:2] == ("d1", "d2")
    on_disk = json.loads((tmp_path / "entries.json").read_text())
    assert len(on_disk) == 1 and on_disk[0]["source_ids"] == ["d1", "d2"]


def test_failed_merge_keeps_both(tmp_path):
    a, b = "x one", "x two"
    store = _store(tmp_path, [MemoryEntry("d1", a), MemoryEntry("d2", b)])
    report = end_session_lifecycle(store, set(), sub=None,
                                   embedder=StaticEmbedder({a: [1, 0], b: [1, 0]}))
    assert set(store.entries) == {"d1", "d2"}
    assert report.skipped_merges == [("d1", "d2")]


def test_entry_invariants():
    with pytest.raises(ValueError):
        MemoryEntry("x", "y", -1.0)
    with pytest.raises(ValueError):
        MemoryEntry("x", "y", source_ids=["only-one"])


def test_summary_lists_top_entries(tmp_path):
    store = MemoryStore(tmp_path, config=LifecycleConfig(summary_limit=2))
    store.add([MemoryEntry(f"e{i}", f"fact {i}", float(i)) for i in range(1, 5)])
    store.save()
    lines = (tmp_path / "memory_summary.md").read_text().splitlines()
    assert [ln for ln in lines if ln.startswith("- ")] == ["- [e4] fact 4", "- [e3] fact 3"]
