"""User-user meta-path graphs: path counting, connectivity filtering, union."""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True)
class MetaPath:
    """A user-to-user path of relation steps; each step is (relation name, reversed?)."""

    name: str
    steps: tuple

    def resolve(self, g):
        """Return per-step (src_type, dst_type, indptr, indices), checking type compatibility."""
        out = []
        for rel_name, rev in self.steps:
            rel = g.relation(rel_name)
            src, dst = (rel.dst, rel.src) if rev else (rel.src, rel.dst)
            indptr, indices = rel.adjacency(reverse=rev)
            out.append((src, dst, indptr, indices))
        if not out or out[0][0] != "user" or out[-1][1] != "user":
            raise ValueError(f"meta-path {self.name} must start and end at 'user'")
        for a, b in zip(out, out[1:]):
            if a[1] != b[0]:
                raise ValueError(f"meta-path {self.name}: step types {a[1]!r} -> {b[0]!r} do not chain")
        return out


BUILTIN_METAPATHS = {
    "UFU": MetaPath("UFU", (("eats", False), ("eats", True))),
    "UHU": MetaPath("UHU", (("has", False), ("has", True))),
}


def get_metapath(spec):
    """Look up a built-in by name, or build one from ``{"name":..., "steps": [[rel, rev], ...]}``."""
    if isinstance(spec, MetaPath):
        return spec
    if isinstance(spec, str):
        try:
            return BUILTIN_METAPATHS[spec]
        except KeyError:
            raise ValueError(f"unknown meta-path {spec!r}; built-ins are {sorted(BUILTIN_METAPATHS)}") from None
    steps = tuple((str(r), bool(rev)) for r, rev in spec["steps"])
    if len(steps) != 2:
        raise ValueError("only two-relation meta-paths are supported")
    return MetaPath(spec["name"], steps)


@dataclass(frozen=True)
class PathCounts:
    """Sparse symmetric path-count matrix in CSR form (diagonal excluded)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    counts: np.ndarray

    def to_dict(self):
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return {(int(i), int(j)): int(c) for i, j, c in zip(rows, self.indices, self.counts)}

    def dense(self):
        m = np.zeros((self.n, self.n), dtype=np.int64)
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        m[rows, self.indices] = self.counts
        return m


def count_paths(g, mp):
    """Count paths between distinct users along a two-step meta-path."""
    mp = get_metapath(mp)
    (_, _, p1, i1), (_, _, p2, i2) = mp.resolve(g)
    n = g.n_users
    indptr, indices, counts = kernels.count_paths(p1, i1, p2, i2, n)
    return PathCounts(n, indptr, indices, counts)


def counts_from_dict(n, entries):
    """Build a symmetric ``PathCounts`` from ``{(i, j): count}`` (either orientation given)."""
    sym = {}
    for (i, j), c in entries.items():
        if i == j or c <= 0:
            continue
        sym[(i, j)] = c
        sym[(j, i)] = c
    rows = np.zeros(n + 1, dtype=np.int64)
    keys = sorted(sym)
    for i, _ in keys:
        rows[i + 1] += 1
    return PathCounts(n, np.cumsum(rows), np.asarray([j for _, j in keys], dtype=np.int64),
                      np.asarray([sym[k] for k in keys], dtype=np.int64))


@dataclass(frozen=True)
class MetaPathSubgraph:
    """Connectivity-filtered user graph: undirected pairs (i < j) with path counts >= k."""

    name: str
    n: int
    pairs: np.ndarray
    counts: np.ndarray
    k: int

    @property
    def n_edges(self):
        return len(self.pairs)

    def edge_set(self):
        return {(int(a), int(b)) for a, b in self.pairs}

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst", "count"])
            for (a, b), c in zip(self.pairs, self.counts):
                w.writerow([int(a), int(b), int(c)])


def extract_subgraph(counts, k=1, name=""):
    """Keep the user pairs whose path count reaches ``k``; every user stays a node."""
    if k < 1:
        raise ValueError(f"threshold k must be >= 1, got {k}")
    rows = np.repeat(np.arange(counts.n), np.diff(counts.indptr))
    keep = (counts.counts >= k) & (rows < counts.indices)
    pairs = np.stack([rows[keep], counts.indices[keep]], axis=1).astype(np.int64).reshape(-1, 2)
    return MetaPathSubgraph(name, counts.n, pairs, counts.counts[keep].astype(np.int64), int(k))


@dataclass(frozen=True)
class UnifiedGraph:
    """Deduplicated union of meta-path subgraphs with per-edge provenance."""

    n: int
    pairs: np.ndarray
    provenance: tuple = field(default=())
    sources: tuple = field(default=())

    @property
    def n_edges(self):
        return len(self.pairs)

    def edge_set(self):
        return {(int(a), int(b)) for a, b in self.pairs}


def union_graphs(subgraphs):
    """Union of subgraph edge sets; ``provenance[e]`` lists the contributing subgraph names."""
    if not subgraphs:
        raise ValueError("union_graphs: no subgraphs given")
    n = subgraphs[0].n
    for s in subgraphs:
        if s.n != n:
            raise ValueError(f"union_graphs: user counts differ ({s.n} vs {n})")
    prov = {}
    for s in subgraphs:
        for a, b in s.pairs:
            key = (int(min(a, b)), int(max(a, b)))
            prov.setdefault(key, []).append(s.name)
    keys = sorted(prov)
    pairs = np.asarray(keys, dtype=np.int64).reshape(-1, 2)
    return UnifiedGraph(n, pairs, tuple(tuple(prov[k]) for k in keys), tuple(s.name for s in subgraphs))


@dataclass(frozen=True)
class Neighborhoods:
    """Per-node incoming segments over an undirected pair list.

    Segment ``i`` holds the neighbours of ``i`` in ascending order; nodes
    with no neighbours get a single self entry so every segment is non-empty.
    ``is_self`` flags those injected entries.
    """

    indptr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    is_self: np.ndarray

    @property
    def degree(self):
        return np.diff(self.indptr)


def neighborhoods(n, pairs, self_loops="isolated"):
    """Build segments from undirected ``pairs``.

    ``self_loops``: "isolated" adds a self entry only for neighbour-less nodes,
    "all" adds one to every node, "none" adds nothing (segments may be empty).
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    d = np.concatenate([pairs[:, 0], pairs[:, 1]])
    s = np.concatenate([pairs[:, 1], pairs[:, 0]])
    flag = np.zeros(len(d), dtype=bool)
    if self_loops == "all":
        extra = np.arange(n)
    elif self_loops == "isolated":
        deg = np.bincount(d, minlength=n)
        extra = np.flatnonzero(deg == 0)
    elif self_loops == "none":
        extra = np.zeros(0, dtype=np.int64)
    else:
        raise ValueError(f"unknown self_loops mode {self_loops!r}")
    d = np.concatenate([d, extra])
    s = np.concatenate([s, extra])
    flag = np.concatenate([flag, np.ones(len(extra), dtype=bool)])
    order = np.lexsort((s, d))
    d, s, flag = d[order], s[order], flag[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(d, minlength=n), out=indptr[1:])
    return Neighborhoods(indptr, s, d, flag)


def build_subgraphs(g, specs):
    """Extract one filtered subgraph per ``{"name": ..., "k": ...}`` spec."""
    out = []
    for spec in specs:
        mp = get_metapath(spec.get("path", spec["name"]) if isinstance(spec, dict) else spec)
        k = spec.get("k", 1) if isinstance(spec, dict) else 1
        out.append(extract_subgraph(count_paths(g, mp), k, name=mp.name))
    return out
