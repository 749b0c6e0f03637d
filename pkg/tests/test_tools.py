import json
import math
import time

import httpx
import pytest

from agentkernel.gateway import make_scripted_client
from agentkernel.tools import (
    FixtureSearchProvider, HashEmbedder, HttpSearchProvider, SkillEntry, StaticEmbedder, Toolbelt,
    cosine, execute_tool, load_skills, match_skill, search,
)
from scenarios import search_fixtures


@pytest.fixture
def belt(workspace):
    return Toolbelt(workspace, bash_timeout=5)


def test_write_then_read_round_trip(belt, workspace):
    w = belt.execute("write_file", {"path": "a/b.txt", "content": "hi"})
    assert w.ok and w.side_effects == ["a/b.txt"]
    r = belt.execute("read_file", {"path": "a/b.txt"})
    assert r.ok and "hi" in r.observation
    assert (workspace / "a" / "b.txt").read_text() == "hi"


def test_edit_requires_unique_occurrence(belt, workspace):
    text = "x = 1\nx = 1\n"
    (workspace / "f.py").write_text(text)
    r = belt.execute("edit_file", {"path": "f.py", "old_string": "x = 1", "new_string": "y"})
    assert not r.ok
    assert f"{text.count('x = 1')} occurrences" in r.observation
    assert (workspace / "f.py").read_text() == text


def test_edit_single_occurrence(belt, workspace):
    (workspace / "f.py").write_text("a\nb\n")
    r = belt.execute("edit_file", {"path": "f.py", "old_string": "b", "new_string": "c"})
    assert r.ok and (workspace / "f.py").read_text() == "a\nc\n"


@pytest.mark.parametrize("path", ["../../etc/hosts", "/etc/hosts", "a/../../x"])
def test_sandbox_guard(belt, path):
    r = belt.execute("read_file", {"path": path})
    assert not r.ok and "path outside workspace" in r.observation


def test_write_outside_workspace_refused(belt, workspace):
    r = belt.execute("write_file", {"path": "../escape.txt", "content": "x"})
    assert not r.ok
    assert not (workspace.parent / "escape.txt").exists()


def test_symlink_escape_refused(belt, workspace, tmp_path):
    (tmp_path / "secret.txt").write_text("s")
    (workspace / "link").symlink_to(tmp_path / "secret.txt")
    assert "path outside workspace" in belt.execute("read_file", {"path": "link"}).observation


def test_bash_captures_output_and_side_effects(belt):
    r = belt.execute("bash", {"command": "echo hello > out.txt; cat out.txt"})
    assert r.ok and "hello" in r.observation
    assert r.side_effects == ["out.txt"]


def test_bash_nonzero_exit(belt):
    r = belt.execute("bash", {"command": "echo oops >&2; exit 4"})
    assert not r.ok
    assert "oops" in r.observation and "exit code 4" in r.observation


def test_bash_timeout(workspace):
    belt = Toolbelt(workspace, bash_timeout=0.5)
    t0 = time.monotonic()
    r = belt.execute("bash", {"command": "sleep 30"})
    assert time.monotonic() - t0 < 5
    assert not r.ok and "timed out" in r.observation


def test_grep_and_glob(belt, workspace):
    (workspace / "src").mkdir()
    (workspace / "src" / "a.py").write_text("def main():\n    pass\n")
    (workspace / "b.txt").write_text("main street\n")
    g = belt.execute("grep", {"pattern": r"def main"})
    assert g.ok and g.observation == "src/a.py:1: def main():"
    assert belt.execute("grep", {"pattern": "main", "include": "*.txt"}).observation == "b.txt:1: main street"
    assert belt.execute("glob", {"pattern": "**/*.py"}).observation == "src/a.py"
    assert belt.execute("glob", {"pattern": "*.zip"}).observation == "no matches"
    assert not belt.execute("glob", {"pattern": "../*"}).ok


def test_unknown_tool_and_bad_args(belt):
    assert not belt.execute("rm_rf", {}).ok
    assert not belt.execute("read_file", "oops").ok
    assert not belt.execute("read_file", {}).ok


def test_execute_tool_helper(workspace):
    assert execute_tool("write_file", {"path": "z.txt", "content": "z"}, workspace).ok


# --- search -----------------------------------------------------------------

def test_search_fixture_verbatim():
    fixtures = search_fixtures()
    r = search("Beijing weather May", FixtureSearchProvider(fixtures))
    assert r.ok
    assert json.loads(r.observation) == fixtures["Beijing weather May"]
    assert len(json.loads(r.observation)) == 3


def test_search_unknown_key_is_empty_not_error():
    r = search("no such query", FixtureSearchProvider({}))
    assert r.ok and json.loads(r.observation) == []


def test_search_provider_timeout():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    provider = HttpSearchProvider("http://search.stub/q",
                                  client=httpx.Client(transport=httpx.MockTransport(handler)))
    r = search("anything", provider)
    assert not r.ok and r.observation == "search provider timeout"


def test_http_search_provider_parses_results():
    payload = {"results": [{"title": "t", "url": "u", "snippet": "s", "extra": 1}]}
    provider = HttpSearchProvider("http://search.stub/q", client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(200, json=payload))))
    assert provider.search("q") == [{"title": "t", "url": "u", "snippet": "s"}]


# --- skills -----------------------------------------------------------------

def _registry():
    return [SkillEntry("alpha", "a", [1.0, 0.0]), SkillEntry("beta", "b", [0.0, 1.0])]


def test_cosine_orthogonal_basis():
    best, sim = match_skill("q", _registry(), StaticEmbedder({"q": [1, 0]}))
    assert best.name == "alpha" and sim == 1.0


def test_cosine_hand_computed():
    best, sim = match_skill("q", _registry(), StaticEmbedder({"q": [0.6, 0.8]}))
    # oracle: (0.6*0 + 0.8*1) / (|q|=1 * 1)
    assert best.name == "beta" and math.isclose(sim, 0.8)


def test_cosine_tie_breaks_by_name():
    reg = list(reversed(_registry()))
    best, sim = match_skill("q", reg, StaticEmbedder({"q": [0.1, 0.1]}))
    assert best.name == "alpha"
    assert math.isclose(sim, 1 / math.sqrt(2))


def test_below_threshold_is_no_match():
    m = match_skill("q", _registry(), StaticEmbedder({"q": [1, 1]}), min_similarity=0.9)
    assert m.entry is None and "below" in m.diagnostic


def test_empty_registry_and_dimension_mismatch():
    with pytest.raises(ValueError):
        match_skill("q", [], StaticEmbedder({"q": [1, 0]}))
    m = match_skill("q", _registry(), StaticEmbedder({"q": [1, 0, 0]}))
    assert m.entry is None and "embedder failure" in m.diagnostic
    with pytest.raises(ValueError):
        cosine([1], [1, 2])


def test_hash_embedder_is_deterministic():
    e = HashEmbedder(64)
    assert e.embed("render an html page") == e.embed("render an html page")
    assert cosine(e.embed("html page"), e.embed("html page")) == pytest.approx(1.0)


def test_load_skills_and_invoke(tmp_path, workspace):
    skills = tmp_path / "skills"
    for name, desc in [("html_report", "render an html report page"),
                       ("csv_stats", "compute statistics over csv columns")]:
        (skills / name).mkdir(parents=True)
        (skills / name / "skill.md").write_text(
            f"---\ndescription: {desc}\n---\nDo this: $input\n")
    emb = HashEmbedder()
    entries = load_skills(skills, emb)
    assert [e.name for e in entries] == ["csv_stats", "html_report"]
    assert (skills / "index.json").exists()
    assert load_skills(skills, emb)[1].embedding == entries[1].embedding

    client = make_scripted_client("sub", ["skill output"])
    belt = Toolbelt(workspace, skills=entries, embedder=emb, skill_client=client,
                    min_skill_similarity=0.1)
    r = belt.execute("invoke_skill", {"query": "html report page", "input": "data"})
    assert r.ok and "html_report" in r.observation and "skill output" in r.observation
    assert "Do this: data" in client.context[1].content


def test_invoke_skill_without_registry(belt):
    assert not belt.execute("invoke_skill", {"query": "x"}).ok
