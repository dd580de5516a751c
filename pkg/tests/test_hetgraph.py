import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgrefine.hetgraph import (
    GraphFormatError,
    HeteroGraph,
    SyntheticConfig,
    bin_habits,
    edge_homophily,
    generate_synthetic,
    graphs_equal,
    habit_edges_from_measures,
    load_graph,
    split_nodes,
    write_manifest,
)
from hgrefine.metapath import build_subgraphs

from .conftest import make_graph


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


@pytest.fixture
def minimal_manifest(tmp_path):
    _write(tmp_path / "users.csv", "id,label,age\nu0,1,0.5\nu1,0,0.25\n")
    _write(tmp_path / "foods.csv", 'id,name,embedding\nf0,apple pie,"[0.1, 0.2]"\n')
    _write(tmp_path / "eats.csv", "src_id,dst_id\nu0,f0\nu1,f0\n")
    man = {"nodes": {"user": "users.csv", "food": {"path": "foods.csv"}},
           "relations": [{"src": "user", "name": "eats", "dst": "food", "path": "eats.csv"}]}
    _write(tmp_path / "manifest.json", json.dumps(man))
    return tmp_path / "manifest.json"


def test_load_minimal_manifest(minimal_manifest):
    g = load_graph(minimal_manifest)
    assert g.node_counts == {"user": 2, "food": 1}
    assert g.relation("eats").n_edges == 2
    assert g.labels.tolist() == [1, 0]
    assert g.names["food"] == ["apple pie"]
    np.testing.assert_array_equal(g.features["food"], [[0.1, 0.2]])


def test_unknown_edge_id_names_row(minimal_manifest):
    _write(minimal_manifest.parent / "eats.csv", "src_id,dst_id\nu0,f0\nu9,f0\n")
    with pytest.raises(GraphFormatError, match=r"eats.csv:3: row 'u9,f0'"):
        load_graph(minimal_manifest)


def test_missing_label_column(minimal_manifest):
    _write(minimal_manifest.parent / "users.csv", "id,age\nu0,0.5\nu1,0.25\n")
    with pytest.raises(GraphFormatError, match="label"):
        load_graph(minimal_manifest)


def test_non_numeric_feature(minimal_manifest):
    _write(minimal_manifest.parent / "users.csv", "id,label,age\nu0,1,old\nu1,0,0.25\n")
    with pytest.raises(GraphFormatError, match=r"users.csv:2: non-numeric"):
        load_graph(minimal_manifest)


def test_missing_file(minimal_manifest):
    os.remove(minimal_manifest.parent / "foods.csv")
    with pytest.raises(GraphFormatError, match="missing node file"):
        load_graph(minimal_manifest)


def test_manifest_round_trip(tmp_path):
    cfg = SyntheticConfig(n_users=30, n_foods=20, n_habits=8, n_ingredients=10, n_categories=3,
                          food_degree=4, habit_degree=2, ingredient_degree=2, seed=5)
    g, _ = generate_synthetic(cfg)
    path = write_manifest(g, tmp_path / "csv")
    g2 = load_graph(path)
    assert graphs_equal(g, g2)
    g.save(tmp_path / "g.json")
    assert graphs_equal(g, HeteroGraph.load(tmp_path / "g.json"))


def test_serialized_header_is_versioned(tmp_path):
    g = make_graph(3, 2, [(0, 0), (1, 1)])
    d = json.loads(g.dumps())
    assert d["format"] == "hgrefine-graph" and d["version"] == 1
    d["version"] = 99
    with pytest.raises(GraphFormatError, match="version"):
        HeteroGraph.from_dict(d)


def test_graph_is_immutable():
    g = make_graph(3, 2, [(0, 0), (1, 1)])
    with pytest.raises(ValueError):
        g.features["user"][0, 0] = 5.0


def test_csr_and_reverse_agree():
    g = make_graph(4, 3, [(0, 0), (0, 2), (3, 2), (2, 1), (0, 0)])
    r = g.relation("eats")
    s, d = r.edges()
    fwd = sorted(zip(s.tolist(), d.tolist()))
    rs = np.repeat(np.arange(3), np.diff(r.rev_indptr))
    rev = sorted(zip(r.rev_indices.tolist(), rs.tolist()))
    assert fwd == rev


# -- habit binning ---------------------------------------------------------


def _sort_oracle(values, low_pct, high_pct):
    n = len(values)
    order = sorted(range(n), key=lambda i: (-values[i], i))
    hi = set(order[: int(n * high_pct + 1e-9)])
    rest = sorted((i for i in range(n) if i not in hi), key=lambda i: (values[i], i))
    lo = set(rest[: int(n * low_pct + 1e-9)])
    return ["high" if i in hi else "low" if i in lo else "none" for i in range(n)]


def test_bin_habits_ten_values():
    tags = bin_habits(np.arange(1, 11), 0.1, 0.1)
    assert tags[9] == "high" and tags[0] == "low"
    assert list(tags) == _sort_oracle(list(range(1, 11)), 0.1, 0.1)


def test_bin_habits_twenty_percent():
    tags = bin_habits(np.arange(1, 11), 0.2, 0.2)
    assert sorted(np.flatnonzero(tags == "high")) == [8, 9]
    assert sorted(np.flatnonzero(tags == "low")) == [0, 1]


def test_bin_habits_ties_lowest_id():
    tags = bin_habits(np.full(10, 3.0), 0.1, 0.1)
    assert tags[0] == "high" and tags[1] == "low"
    assert (tags == "none").sum() == 8


def test_bin_habits_errors():
    with pytest.raises(ValueError):
        bin_habits([], 0.1, 0.1)
    with pytest.raises(ValueError):
        bin_habits([1.0, np.nan], 0.1, 0.1)
    with pytest.raises(ValueError):
        bin_habits([1.0, 2.0], 0.6, 0.6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=40),
       st.sampled_from([(0.1, 0.1), (0.2, 0.3), (0.5, 0.5), (0.05, 0.25)]), st.randoms())
def test_bin_habits_bucket_sizes_permutation_invariant(vals, pcts, rnd):
    lo, hi = pcts
    tags = bin_habits(vals, lo, hi)
    n = len(vals)
    assert (tags == "high").sum() == int(n * hi + 1e-9)
    assert (tags == "low").sum() == int(n * lo + 1e-9)
    assert list(tags) == _sort_oracle(vals, lo, hi)
    perm = list(range(n))
    rnd.shuffle(perm)
    tags2 = bin_habits([vals[i] for i in perm], lo, hi)
    assert (tags2 == "high").sum() == (tags == "high").sum()
    # the multiset of values per bucket is permutation invariant
    assert sorted(vals[p] for p, t in zip(perm, tags2) if t == "high") == \
        sorted(v for v, t in zip(vals, tags) if t == "high")


def test_habit_edges_from_measures_skips_nonrespondents():
    vals = np.array([1.0, 2.0, np.nan, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0])
    names, users, habits = habit_edges_from_measures({"milk": vals})
    assert names == ["lots of milk", "little or no milk"]
    assert users[habits == 0].tolist() == [10] and users[habits == 1].tolist() == [0]


# -- splits ----------------------------------------------------------------


def test_split_sizes_and_partition():
    s = split_nodes(10, (0.2, 0.4, 0.4), seed=3)
    assert (len(s.train_ids), len(s.valid_ids), len(s.test_ids)) == (2, 4, 4)
    allids = set(s.train_ids) | set(s.valid_ids) | set(s.test_ids)
    assert allids == set(range(10))
    assert not (set(s.train_ids) & set(s.valid_ids) or set(s.train_ids) & set(s.test_ids)
                or set(s.valid_ids) & set(s.test_ids))
    assert s == split_nodes(10, (0.2, 0.4, 0.4), seed=3)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500), st.integers(0, 100))
def test_split_partition_property(n, seed):
    s = split_nodes(n, (0.4, 0.3, 0.3), seed)
    ids = list(s.train_ids) + list(s.valid_ids) + list(s.test_ids)
    assert sorted(ids) == list(range(n))
    assert abs(len(s.train_ids) - 0.4 * n) <= 1


def test_split_errors():
    with pytest.raises(ValueError):
        split_nodes(2, (0.2, 0.4, 0.4))
    with pytest.raises(ValueError):
        split_nodes(10, (0.5, 0.5, 0.5))


# -- synthetic -------------------------------------------------------------

SMALL = dict(n_users=400, n_foods=200, n_habits=40, n_ingredients=60, n_categories=5,
             food_degree=10, habit_degree=4, ingredient_degree=2)


def test_synthetic_deterministic():
    a, _ = generate_synthetic(SyntheticConfig(**SMALL, seed=11))
    b, _ = generate_synthetic(SyntheticConfig(**SMALL, seed=11))
    assert a.dumps() == b.dumps()
    c, _ = generate_synthetic(SyntheticConfig(**SMALL, seed=12))
    assert a.dumps() != c.dumps()


def test_synthetic_noise_free_uhu_homophily():
    g, _ = generate_synthetic(SyntheticConfig(**SMALL, noise_rate=0.0, seed=1))
    sub = build_subgraphs(g, [{"name": "UHU", "k": 1}])[0]
    assert edge_homophily(sub.pairs, g.labels) >= 0.95


def test_synthetic_cross_class_fraction():
    cfg = SyntheticConfig(**{**SMALL, "n_users": 1000}, noise_rate=0.3, seed=2)
    g, meta = generate_synthetic(cfg)
    assert abs(meta.cross_class_fraction - 0.3) <= 0.03
    # recount independently from the edge lists and the pool ground truth
    pool_cls = {}
    for c, pool in enumerate(meta.food_pools[:2]):
        pool_cls.update({f: c for f in pool})
    s, d = g.relation("eats").edges()
    hits = [(pool_cls[f], g.labels[u]) for u, f in zip(s, d) if f in pool_cls]
    frac = np.mean([a != b for a, b in hits])
    assert abs(frac - 0.3) <= 0.03


@pytest.mark.parametrize("frac", [0.5, 0.2])
def test_synthetic_class_balance(frac):
    g, _ = generate_synthetic(SyntheticConfig(**SMALL, positive_fraction=frac, seed=4))
    assert abs(g.labels.sum() - frac * SMALL["n_users"]) <= 1


def test_synthetic_degree_error():
    with pytest.raises(ValueError, match="exceeds"):
        generate_synthetic(SyntheticConfig(**{**SMALL, "habit_degree": 100}))


def test_heterogeneity_condition():
    from hgrefine.hetgraph import Relation
    ids = {"user": ["a", "b"]}
    with pytest.raises(GraphFormatError, match="heterogeneous"):
        HeteroGraph(["user"], ids, {"user": np.zeros((2, 1))}, [0, 1],
                    [Relation.from_edges("user", "knows", "user", [0], [1], 2, 2)])


def test_full_scale_counts_default_config():
    cfg = SyntheticConfig()
    assert (cfg.n_users, cfg.n_foods, cfg.n_ingredients, cfg.n_categories, cfg.n_habits) == \
        (4826, 5896, 2792, 174, 54)
