"""One-hop heterogeneous attention with type- and relation-specific transforms.

Every node attends over its direct neighbours across all relations. For an
entry i <- j on relation r, head h scores

    (W_type(i) x_i)^T  W_rel(r)  (W_type(j) x_j) / sqrt(d_head)

and the output is ``ELU(1/|N(i)| * sum_j alpha_ij W_type(j) x_j)`` per head,
heads concatenated. Nodes without neighbours attend to themselves only.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd


@dataclass
class MicroParams:
    node_types: tuple
    relations: tuple
    W_type: dict     # node type -> (d_type, d)
    W_rel: dict      # relation name -> list of (d_head, d_head) per head
    heads: int
    mean_norm: bool = True

    @property
    def d(self):
        return next(iter(self.W_type.values())).shape[1]

    def parameters(self):
        out = [self.W_type[t] for t in self.node_types]
        for r in self.relations:
            out.extend(self.W_rel[r])
        return out


def init_micro(rng, feature_dims, relations, d=256, heads=4, mean_norm=True, dtype=np.float64):
    if d % heads:
        raise ValueError(f"d={d} not divisible by heads={heads}")
    dh = d // heads
    types = tuple(feature_dims)
    W_type = {t: nd.glorot(rng, feature_dims[t], d, f"micro.W_{t}", dtype) for t in types}
    W_rel = {r: [nd.glorot(rng, dh, dh, f"micro.W_{r}{h}", dtype) for h in range(heads)] for r in relations}
    return MicroParams(types, tuple(relations), W_type, W_rel, heads, mean_norm)


@dataclass(frozen=True)
class MicroStructure:
    """Global node indexing and incoming-entry segments for a whole graph.

    Entry ``e`` carries a message from ``src[e]`` to ``dst[e]`` over relation
    ``rel[e]``; ``rel == len(relations)`` marks the self entry of an isolated
    node. Entries are sorted by (dst, src, rel).
    """

    node_types: tuple
    offsets: dict
    relations: tuple
    indptr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    n_total: int

    @property
    def degree(self):
        return np.diff(self.indptr)

    def type_of(self, gidx):
        for t in reversed(self.node_types):
            if gidx >= self.offsets[t]:
                return t
        raise IndexError(gidx)

    def local(self, gidx):
        t = self.type_of(gidx)
        return t, gidx - self.offsets[t]


def build_structure(g):
    offsets, pos = {}, 0
    for t in g.node_types:
        offsets[t] = pos
        pos += g.node_counts[t]
    n = pos
    rel_names = tuple(r.name for r in g.relations)
    d_all, s_all, r_all = [], [], []
    for k, r in enumerate(g.relations):
        s, d = r.edges()
        gs = s + offsets[r.src]
        gd = d + offsets[r.dst]
        d_all += [gd, gs]
        s_all += [gs, gd]
        r_all += [np.full(len(s), k), np.full(len(s), k)]
    dst = np.concatenate(d_all) if d_all else np.zeros(0, dtype=np.int64)
    src = np.concatenate(s_all) if s_all else np.zeros(0, dtype=np.int64)
    rel = np.concatenate(r_all) if r_all else np.zeros(0, dtype=np.int64)
    isolated = np.flatnonzero(np.bincount(dst, minlength=n) == 0)
    dst = np.concatenate([dst, isolated]).astype(np.int64)
    src = np.concatenate([src, isolated]).astype(np.int64)
    rel = np.concatenate([rel, np.full(len(isolated), len(rel_names))]).astype(np.int64)
    order = np.lexsort((rel, src, dst))
    dst, src, rel = dst[order], src[order], rel[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
    return MicroStructure(tuple(g.node_types), offsets, rel_names, indptr, src, dst, rel, n)


def micro_forward(st, X, p):
    """Micro-level embeddings for all nodes plus per-head attention (E, 1).

    ``X`` maps node type to its feature tensor/array.
    """
    for t in st.node_types:
        if X[t].shape[1] != p.W_type[t].shape[0]:
            raise ValueError(f"features for {t!r} have width {X[t].shape[1]}, W expects {p.W_type[t].shape[0]}")
    Z = nd.concat_rows([nd.matmul(X[t], p.W_type[t]) for t in st.node_types])
    dh = p.d // p.heads
    n = st.n_total
    query_rows = st.rel * n + st.dst
    norm = 1.0 / math.sqrt(dh)
    inv_deg = None
    if p.mean_norm:
        inv_deg = nd.const((1.0 / st.degree[st.dst]).reshape(-1, 1).astype(Z.dtype))
    zeros = nd.const(np.zeros((n, dh), dtype=Z.dtype))
    outs, alphas = [], []
    for h in range(p.heads):
        Zh = nd.slice_cols(Z, h * dh, (h + 1) * dh) if p.heads > 1 else Z
        # row (r, i) holds z_i^T W_rel(r); the self relation scores zero
        queries = nd.concat_rows([nd.matmul(Zh, p.W_rel[r][h]) for r in st.relations] + [zeros])
        logits = nd.scale(nd.edge_dot(queries, Zh, query_rows, st.src), norm)
        alpha = nd.segment_softmax(logits, st.indptr)
        w = nd.mul(alpha, inv_deg) if inv_deg is not None else alpha
        outs.append(nd.segment_weighted_sum(w, Zh, st.src, st.indptr))
        alphas.append(alpha)
    out = outs[0] if len(outs) == 1 else nd.concat_cols(outs)
    return nd.elu(out), alphas


# -- attention export ----------------------------------------------------


@dataclass
class AttentionRecord:
    """Ranked head-averaged micro attention for one user."""

    user: str
    items: list = field(default_factory=list)            # (id, type, relation, score), best first
    ingredients: dict = field(default_factory=dict)      # food id -> [(ingredient id, score), ...]

    def top(self, node_type, k):
        return [it for it in self.items if it[1] == node_type][:k]

    def rest(self, node_type, k):
        return [it for it in self.items if it[1] == node_type][k:]

    def to_dict(self):
        return {
            "user": self.user,
            "items": [{"id": i, "type": t, "relation": r, "score": s} for i, t, r, s in self.items],
            "ingredients": {f: [{"id": i, "score": s} for i, s in v] for f, v in self.ingredients.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["user"],
            [(x["id"], x["type"], x["relation"], x["score"]) for x in d["items"]],
            {f: [(x["id"], x["score"]) for x in v] for f, v in d["ingredients"].items()},
        )


def average_heads(alphas):
    return np.mean([a.data.reshape(-1) for a in alphas], axis=0)


def _ranked(entries):
    """Sort (local idx, id, ..., score) descending by score, ties by ascending local index."""
    return sorted(entries, key=lambda e: (-e[-1], e[0]))


def rank_incoming(st, g, alpha_avg, node_type, local_idx, neighbor_type=None):
    """Neighbours of one node ranked by head-averaged attention: [(local idx, type, relation, score)]."""
    gi = st.offsets[node_type] + local_idx
    lo, hi = st.indptr[gi], st.indptr[gi + 1]
    out = []
    for e in range(lo, hi):
        if st.rel[e] >= len(st.relations):
            continue
        t, li = st.local(int(st.src[e]))
        if neighbor_type is not None and t != neighbor_type:
            continue
        out.append((li, t, st.relations[st.rel[e]], float(alpha_avg[e])))
    return _ranked(out)


def export_user_attention(g, st, alpha_avg, users=None, top_k=10, item_types=("food", "habit"),
                          ingredient_type="ingredient"):
    """Build an :class:`AttentionRecord` per user.

    Items of each type in ``item_types`` are ranked by the user's incoming
    attention; for each of the user's top-``top_k`` foods, ingredients are
    ranked by that food's incoming ingredient attention.
    """
    users = range(g.n_users) if users is None else users
    records = {}
    for u in users:
        if not 0 <= u < g.n_users:
            raise KeyError(f"user index {u} not in graph")
        ranked = rank_incoming(st, g, alpha_avg, "user", u)
        items = []
        for t in item_types:
            items += [(g.ids[t][li], t, r, s) for li, tt, r, s in ranked if tt == t]
        rec = AttentionRecord(g.ids["user"][u], items)
        if ingredient_type in g.node_types and "food" in g.node_types:
            for li, tt, _, _ in [x for x in ranked if x[1] == "food"][:top_k]:
                ing = rank_incoming(st, g, alpha_avg, "food", li, ingredient_type)
                rec.ingredients[g.ids["food"][li]] = [(g.ids[ingredient_type][j], s) for j, _, _, s in ing]
        records[rec.user] = rec
    return records


def save_attention_json(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({u: r.to_dict() for u, r in records.items()}, fh, indent=1)


def load_attention_json(path):
    with open(path, encoding="utf-8") as fh:
        return {u: AttentionRecord.from_dict(d) for u, d in json.load(fh).items()}


def save_attention_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "type", "relation", "score"])
        for u, rec in records.items():
            for i, t, r, s in rec.items:
                w.writerow([u, i, t, r, repr(s)])
