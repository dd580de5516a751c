import io
import json
import os
import threading
import urllib.error
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgrefine import ndmath as nd
from hgrefine.interpret import (
    DispatchError,
    TypicalityScore,
    compute_typicality,
    dispatch,
    dispatch_all,
    load_template,
    prompt_items,
    rank_ingredients,
    render_prompt,
    write_prompts,
)
from hgrefine.micro import AttentionRecord, average_heads, build_structure, export_user_attention, init_micro, micro_forward
from hgrefine.refine import filter_by_scores
from hgrefine.hetgraph import HeteroGraph, Relation

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("HGREFINE_REGEN_GOLDEN") == "1"


# -- typicality on a 10-user fixture ------------------------------------

# labels: -1 marks users whose labels are hidden (valid/test)
TEN_LABELS = np.array([1, 1, 1, 0, 0, -1, 1, -1, 0, 1])
TEN_PAIRS = [(0, 1), (0, 2), (0, 6), (0, 9), (1, 2), (1, 3), (2, 5), (3, 4), (3, 8), (4, 8), (5, 7), (6, 9)]

# (user, same, total) counted by hand from TEN_PAIRS / TEN_LABELS
HAND = {
    0: (4, 4),   # neighbours 1,2,6,9 all label 1
    1: (2, 3),   # 0,2 same; 3 differs
    2: (2, 3),   # 0,1 same; 5 hidden
    3: (2, 3),   # 4,8 same (label 0); 1 differs
    4: (2, 2),
    5: (0, 2),   # own label hidden
    6: (2, 2),
    7: (0, 1),
    8: (2, 2),
    9: (2, 2),
}


def ten_refined():
    return filter_by_scores(10, TEN_PAIRS, np.ones(len(TEN_PAIRS)), 0.5)


def test_typicality_hand_counts():
    rg = ten_refined()
    for u, (same, total) in HAND.items():
        t = compute_typicality(u, rg, TEN_LABELS, min_peers=3)
        assert (t.same, t.total) == (same, total), u
        assert t.ratio == (same / total if total else 0.0)
    t0 = compute_typicality(0, rg, TEN_LABELS, min_peers=3)
    assert t0.ratio == 1.0 and t0.typical
    assert compute_typicality(1, rg, TEN_LABELS).ratio == pytest.approx(2 / 3)


def test_typicality_examples():
    # 3 of 4 same label
    rg = filter_by_scores(5, [(0, 1), (0, 2), (0, 3), (0, 4)], np.ones(4))
    t = compute_typicality(0, rg, [1, 1, 1, 1, 0], min_peers=3)
    assert (t.same, t.total, t.ratio, t.typical) == (3, 4, 0.75, True)
    lonely = compute_typicality(4, filter_by_scores(5, [(0, 1)], np.ones(1)), [1, 1, 1, 1, 0])
    assert lonely == TypicalityScore(4, 0, 0, 0.0, False)
    with pytest.raises(KeyError):
        compute_typicality(7, rg, [1, 1, 1, 1, 0])


def test_typicality_uses_reference_label_for_hidden_user():
    rg = ten_refined()
    t = compute_typicality(5, rg, TEN_LABELS, min_peers=1, reference_label=1)
    assert (t.same, t.total) == (1, 2)   # neighbour 2 is labelled 1, 7 is hidden


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 9), st.integers(0, 5))
def test_typicality_ratio_range_and_min_peer_monotonicity(u, k):
    rg = ten_refined()
    a = compute_typicality(u, rg, TEN_LABELS, min_peers=k)
    b = compute_typicality(u, rg, TEN_LABELS, min_peers=k + 1)
    assert 0.0 <= a.ratio <= 1.0
    assert not (b.typical and not a.typical)


# -- ranking --------------------------------------------------------------


def test_rank_ingredients():
    assert rank_ingredients("f", [("i3", 1.0)]) == [("i3", 1.0)]
    order = {"i10": 10, "i2": 2, "i7": 7}
    assert [i for i, _ in rank_ingredients("f", [("i10", 0.5), ("i7", 0.5), ("i2", 0.5)], order)] == ["i2", "i7", "i10"]
    rec = AttentionRecord("u0", [], {"f0": [("a", 0.2), ("b", 0.7), ("c", 0.1)]})
    assert rank_ingredients("f0", rec) == sorted(rec.ingredients["f0"], key=lambda e: -e[1])
    assert rank_ingredients("f9", rec) == []


# -- rendering ------------------------------------------------------------


def fixture_record():
    items = [("f2", "food", "eats", 0.4), ("f0", "food", "eats", 0.25), ("f1", "food", "eats", 0.15),
             ("h1", "habit", "has", 0.12), ("h0", "habit", "has", 0.08)]
    ings = {"f2": [("i1", 0.6), ("i0", 0.4)], "f0": [("i0", 1.0)], "f1": []}
    return AttentionRecord("u0", items, ings)


NAMES = {"food": {"f0": "oat porridge", "f1": "cola", "f2": "glazed doughnut"},
         "habit": {"h0": "little or no salt at table", "h1": "lots of sugared drinks"},
         "ingredient": {"i0": "sugar", "i1": "wheat flour"}}


def fixture_bundles():
    rec = fixture_record()
    typ = TypicalityScore(0, 4, 5, 0.8, True)
    b1 = render_prompt("u0", rec, typ, top_k=2, prediction=1, probability=0.9134,
                       demographics={"age band": "30-39", "sex": "F"}, names=NAMES)
    b2 = render_prompt("u0", rec, TypicalityScore(0, 0, 0, 0.0, False), top_k=10, names=NAMES)
    return {"prompt_top2.txt": b1, "prompt_all.txt": b2}


def test_golden_files():
    for name, bundle in fixture_bundles().items():
        data = bundle.text().encode("utf-8")
        path = GOLDEN / name
        if REGEN:
            GOLDEN.mkdir(exist_ok=True)
            path.write_bytes(data)
        assert path.read_bytes() == data, name


def test_render_structure():
    b = fixture_bundles()["prompt_top2.txt"]
    text = b.text()
    for head in ("Instruction:", "Context:", "Notes:"):
        assert text.count(head) == 1
    assert b.instruction and b.context and b.notes
    assert "1. glazed doughnut (attention 0.4000)" in b.context
    assert "2. oat porridge" in b.context and "3. " not in b.context.split("habits are")[0]
    assert "cola" in b.context.split("Other recorded foods")[1]
    assert "typical of that group" in b.context and "not typical" not in b.context


def test_render_fewer_than_k_no_padding():
    rec = AttentionRecord("u1", [("f0", "food", "eats", 0.5), ("f1", "food", "eats", 0.3),
                                 ("f2", "food", "eats", 0.2)])
    b = render_prompt("u1", rec, None, top_k=10)
    lines = [l for l in b.context.splitlines() if l[:2] in ("1.", "2.", "3.", "4.")]
    assert len(lines) == 3
    assert "Other recorded" not in b.context


def test_render_is_pure():
    a, b = fixture_bundles(), fixture_bundles()
    assert {k: v.text() for k, v in a.items()} == {k: v.text() for k, v in b.items()}


def test_template_validation(tmp_path):
    t = load_template()
    bad = dict(t, instruction="   ")
    with pytest.raises(ValueError, match="empty"):
        render_prompt("u0", fixture_record(), None, template=bad)
    p = tmp_path / "t.json"
    p.write_text(json.dumps(dict(t, notes="")))
    with pytest.raises(ValueError, match="empty"):
        load_template(p)
    with pytest.raises(ValueError, match="missing"):
        render_prompt("u0", fixture_record(), None, template={"instruction": "x"})
    with pytest.raises(ValueError, match="no attention record"):
        render_prompt("u0", None, None)


def test_prompt_items_are_graph_edges(rng):
    # users / foods / habits / ingredients; micro export drives the prompt
    ids = {"user": [f"u{i}" for i in range(4)], "food": [f"f{i}" for i in range(5)],
           "habit": [f"h{i}" for i in range(3)], "ingredient": [f"i{i}" for i in range(4)]}
    feats = {t: rng.standard_normal((len(v), 3)) for t, v in ids.items()}
    eats = [(0, 0), (0, 1), (0, 3), (1, 1), (2, 4), (3, 2), (3, 0)]
    has = [(0, 2), (1, 0), (2, 1), (3, 2)]
    contains = [(0, 0), (0, 1), (1, 2), (3, 3), (4, 0)]
    rels = [Relation.from_edges("user", "eats", "food", *zip(*eats), 4, 5),
            Relation.from_edges("user", "has", "habit", *zip(*has), 4, 3),
            Relation.from_edges("food", "contains", "ingredient", *zip(*contains), 5, 4)]
    g = HeteroGraph(tuple(ids), ids, feats, [0, 1, 0, 1], rels)
    p = init_micro(rng, g.feature_dims(), [r.name for r in rels], d=8, heads=2)
    st_ = build_structure(g)
    _, alphas = micro_forward(st_, g.features, p)
    recs = export_user_attention(g, st_, average_heads(alphas), top_k=2)
    edges = {("food", f"u{u}", f"f{f}") for u, f in eats} | {("habit", f"u{u}", f"h{h}") for u, h in has}
    food_ing = {(f"f{f}", f"i{i}") for f, i in contains}
    for uid, rec in recs.items():
        b = render_prompt(uid, rec, None, top_k=2)
        for node_type, nid in prompt_items(rec, top_k=2):
            if node_type == "ingredient":
                assert any((f, nid) in food_ing for f, _, _, _ in rec.top("food", 2))
            else:
                assert (node_type, uid, nid) in edges
                assert nid in b.context
        named = [l.split(". ", 1)[1].split(" ")[0] for l in b.context.splitlines() if l[:1].isdigit()]
        for nid in named:
            assert ("food", uid, nid) in edges or ("habit", uid, nid) in edges


def test_write_prompts_manifest(tmp_path):
    bundles = list(fixture_bundles().values())[:1]
    m = write_prompts(bundles, tmp_path)
    assert (tmp_path / "prompts" / "u0.txt").read_text(encoding="utf-8") == bundles[0].text()
    man = json.loads((tmp_path / "prompts" / "manifest.json").read_text())
    assert man["count"] == 1 and man["prompts"][0]["sha256"] == m[0]["sha256"]


# -- dispatch -------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    mode = "echo"
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        body = self.rfile.read(int(self.headers["Content-Length"]))
        if self.mode == "fail":
            self.send_response(500)
            self.end_headers()
            return
        payload = body if self.mode == "echo" else b"not json {"
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *a):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    _Handler.calls = 0
    yield srv
    srv.shutdown()


def _bundle():
    return fixture_bundles()["prompt_top2.txt"]


def test_dispatch_noop_without_endpoint(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("network used")
    monkeypatch.setattr("urllib.request.urlopen", boom)
    r = dispatch(_bundle(), None, tmp_path)
    assert Path(r.prompt_path).read_text(encoding="utf-8") == _bundle().text()
    assert r.response_path is None
    assert dispatch(_bundle(), {"url": ""}, tmp_path).response_path is None


def test_dispatch_echo(tmp_path, server, monkeypatch):
    _Handler.mode = "echo"
    monkeypatch.setenv("HG_TEST_TOKEN", "secret")
    ep = {"url": f"http://127.0.0.1:{server.server_port}/gen", "model": "m", "auth_env": "HG_TEST_TOKEN"}
    r = dispatch(_bundle(), ep, tmp_path)
    stored = json.loads(Path(r.response_path).read_text(encoding="utf-8"))
    assert stored["prompt"] == _bundle().text() and stored["model"] == "m"
    assert not r.malformed and r.status == 200


def test_dispatch_malformed_stored_raw(tmp_path, server):
    _Handler.mode = "garbage"
    r = dispatch(_bundle(), {"url": f"http://127.0.0.1:{server.server_port}/"}, tmp_path)
    assert r.malformed and Path(r.response_path).read_bytes() == b"not json {"


def test_dispatch_retries_with_backoff(tmp_path, server, caplog):
    _Handler.mode = "fail"
    sleeps = []
    ep = {"url": f"http://127.0.0.1:{server.server_port}/", "backoff": 0.25}
    with caplog.at_level("WARNING"), pytest.raises(DispatchError) as ei:
        dispatch(_bundle(), ep, tmp_path, sleep=sleeps.append)
    assert _Handler.calls == 3
    assert len(ei.value.attempts) == 3
    assert sleeps == [0.25, 0.5]
    ts = [t for t, _ in ei.value.attempts]
    assert ts == sorted(ts)
    assert sum("attempt" in r.message for r in caplog.records) == 3


def test_dispatch_all_concurrency(tmp_path):
    seen = []

    class Resp(io.BytesIO):
        status = 200

        def __enter__(self):
            return self

        def __exit__(self, *a):
            return False

    def opener(req, timeout):
        seen.append(req.full_url)
        return Resp(b"{}")

    bundles = [render_prompt(f"u{i}", fixture_record(), None) for i in range(5)]
    out = dispatch_all(bundles, {"url": "http://x/", "max_concurrent": 2}, tmp_path, opener=opener)
    assert len(out) == 5 and len(seen) == 5 and all(r.status == 200 for r in out)
