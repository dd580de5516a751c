import numpy as np
import pytest

from hgrefine.hetgraph import DEFAULT_NODE_TYPES, HeteroGraph, Relation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_graph(n_users, n_foods, eats, n_habits=0, has=(), labels=None, dims=None, seed=0):
    """Small hand-made graph over user/food/habit types."""
    r = np.random.default_rng(seed)
    dims = dims or {"user": 3, "food": 4, "habit": 2}
    types = ("user", "food", "habit")
    counts = {"user": n_users, "food": n_foods, "habit": max(n_habits, 1)}
    ids = {t: [f"{t[0]}{i}" for i in range(counts[t])] for t in types}
    feats = {t: r.standard_normal((counts[t], dims[t])) for t in types}
    eats = np.asarray(list(eats), dtype=np.int64).reshape(-1, 2)
    has = np.asarray(list(has), dtype=np.int64).reshape(-1, 2)
    rels = [
        Relation.from_edges("user", "eats", "food", eats[:, 0], eats[:, 1], n_users, n_foods),
        Relation.from_edges("user", "has", "habit", has[:, 0], has[:, 1], n_users, counts["habit"]),
    ]
    if labels is None:
        labels = np.arange(n_users) % 2
    return HeteroGraph(types, ids, feats, labels, rels)


def random_graph(seed, n_users=None, n_foods=None, n_habits=None, p=None):
    r = np.random.default_rng(seed)
    n_users = n_users or int(r.integers(3, 20))
    n_foods = n_foods or int(r.integers(1, 15))
    n_habits = n_habits or int(r.integers(1, 10))
    p = p if p is not None else float(r.uniform(0.05, 0.5))
    eats = [(u, f) for u in range(n_users) for f in range(n_foods) if r.random() < p]
    has = [(u, h) for u in range(n_users) for h in range(n_habits) if r.random() < p]
    return make_graph(n_users, n_foods, eats, n_habits, has, seed=seed)
