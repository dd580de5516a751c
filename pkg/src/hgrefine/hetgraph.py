"""Typed heterogeneous graph: storage, CSV ingestion, habit binning, synthetic data, splits."""
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

FORMAT_NAME = "hgrefine-graph"
FORMAT_VERSION = 1

DEFAULT_NODE_TYPES = ("user", "food", "habit", "ingredient", "category")
DEFAULT_RELATIONS = (
    ("user", "eats", "food"),
    ("user", "has", "habit"),
    ("food", "contains", "ingredient"),
    ("food", "in_category", "category"),
)


class GraphFormatError(ValueError):
    """Malformed graph input; the message names the file and line."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _csr(src, dst, n_src):
    order = np.lexsort((dst, src))
    counts = np.bincount(src, minlength=n_src)
    indptr = np.zeros(n_src + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, np.asarray(dst, dtype=np.int64)[order]


@dataclass(frozen=True)
class Relation:
    """One typed relation with forward (src -> dst) and reverse CSR adjacency."""

    src: str
    name: str
    dst: str
    indptr: np.ndarray
    indices: np.ndarray
    rev_indptr: np.ndarray
    rev_indices: np.ndarray

    @classmethod
    def from_edges(cls, src, name, dst, s, d, n_src, n_dst):
        s = np.asarray(s, dtype=np.int64)
        d = np.asarray(d, dtype=np.int64)
        indptr, indices = _csr(s, d, n_src)
        rindptr, rindices = _csr(d, s, n_dst)
        return cls(
            src, name, dst,
            _frozen(indptr, np.int64), _frozen(indices, np.int64),
            _frozen(rindptr, np.int64), _frozen(rindices, np.int64),
        )

    @property
    def n_edges(self):
        return len(self.indices)

    def edges(self):
        """Edge list as (src_idx, dst_idx), sorted by source then destination."""
        src = np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr))
        return src, np.asarray(self.indices)

    def adjacency(self, reverse=False):
        return (self.rev_indptr, self.rev_indices) if reverse else (self.indptr, self.indices)


class HeteroGraph:
    """Immutable typed graph with per-type features and per-user binary labels."""

    def __init__(self, node_types, ids, features, labels, relations, names=None):
        self.node_types = tuple(node_types)
        self.ids = {t: list(ids[t]) for t in self.node_types}
        self.features = {t: _frozen(features[t], np.float64) for t in self.node_types}
        self.labels = _frozen(labels, np.int64)
        self.relations = tuple(relations)
        self.names = {t: list(names[t]) if names and t in names else list(self.ids[t]) for t in self.node_types}
        self._rel_index = {r.name: r for r in self.relations}
        self._id_index = {t: {x: i for i, x in enumerate(self.ids[t])} for t in self.node_types}
        self.validate()

    @property
    def node_counts(self):
        return {t: len(self.ids[t]) for t in self.node_types}

    @property
    def n_users(self):
        return len(self.ids["user"])

    def feature_dims(self):
        return {t: self.features[t].shape[1] for t in self.node_types}

    def relation(self, name):
        try:
            return self._rel_index[name]
        except KeyError:
            raise KeyError(f"relation {name!r} not in graph (have {sorted(self._rel_index)})") from None

    def index_of(self, node_type, node_id):
        return self._id_index[node_type][node_id]

    def validate(self):
        counts = self.node_counts
        if "user" not in self.node_types:
            raise GraphFormatError("graph has no 'user' node type")
        if len(self.node_types) + len(self.relations) <= 2:
            raise GraphFormatError("not heterogeneous: need |node types| + |relations| > 2")
        for t in self.node_types:
            f = self.features[t]
            if f.ndim != 2 or f.shape[0] != counts[t]:
                raise GraphFormatError(f"features for {t!r} have shape {f.shape}, expected ({counts[t]}, d)")
            if len(set(self.ids[t])) != counts[t]:
                raise GraphFormatError(f"duplicate ids in node type {t!r}")
        if self.labels.shape != (counts["user"],):
            raise GraphFormatError(f"labels shape {self.labels.shape} != ({counts['user']},)")
        if counts["user"] and not np.all((self.labels == 0) | (self.labels == 1)):
            raise GraphFormatError("labels must be 0 or 1")
        for r in self.relations:
            for t in (r.src, r.dst):
                if t not in counts:
                    raise GraphFormatError(f"relation {r.name!r} uses unknown node type {t!r}")
            if len(r.indptr) != counts[r.src] + 1 or len(r.rev_indptr) != counts[r.dst] + 1:
                raise GraphFormatError(f"relation {r.name!r} CSR does not match node counts")
            if r.n_edges and (r.indices.max() >= counts[r.dst] or r.indices.min() < 0):
                raise GraphFormatError(f"relation {r.name!r} has out-of-range endpoints")
            if r.n_edges != len(r.rev_indices):
                raise GraphFormatError(f"relation {r.name!r} forward/reverse edge counts differ")

    def with_labels(self, labels):
        """Copy with replaced user labels (used for leakage tests)."""
        return HeteroGraph(self.node_types, self.ids, self.features, labels, self.relations, self.names)

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "node_types": list(self.node_types),
            "ids": self.ids,
            "names": self.names,
            "features": {t: self.features[t].tolist() for t in self.node_types},
            "labels": self.labels.tolist(),
            "relations": [
                {"src": r.src, "name": r.name, "dst": r.dst,
                 "indptr": r.indptr.tolist(), "indices": r.indices.tolist()}
                for r in self.relations
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT_NAME:
            raise GraphFormatError(f"not a serialized graph (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise GraphFormatError(f"unsupported graph format version {d.get('version')!r}")
        counts = {t: len(d["ids"][t]) for t in d["node_types"]}
        rels = []
        for r in d["relations"]:
            indptr = np.asarray(r["indptr"], dtype=np.int64)
            src = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
            rels.append(Relation.from_edges(r["src"], r["name"], r["dst"], src, r["indices"],
                                            counts[r["src"]], counts[r["dst"]]))
        feats = {t: np.asarray(d["features"][t], dtype=np.float64).reshape(counts[t], -1)
                 for t in d["node_types"]}
        return cls(d["node_types"], d["ids"], feats, d["labels"], rels, d.get("names"))

    def dumps(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def graphs_equal(a, b):
    if a.node_types != b.node_types or a.ids != b.ids or a.names != b.names:
        return False
    if not np.array_equal(a.labels, b.labels):
        return False
    for t in a.node_types:
        if a.features[t].shape != b.features[t].shape or not np.array_equal(a.features[t], b.features[t]):
            return False
    if len(a.relations) != len(b.relations):
        return False
    for ra, rb in zip(a.relations, b.relations):
        if (ra.src, ra.name, ra.dst) != (rb.src, rb.name, rb.dst):
            return False
        if not (np.array_equal(ra.indptr, rb.indptr) and np.array_equal(ra.indices, rb.indices)):
            return False
    return True


# -- CSV ingestion -------------------------------------------------------


def _read_node_csv(path, node_type, need_label):
    if not os.path.exists(path):
        raise GraphFormatError(f"{path}: missing node file for type {node_type!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GraphFormatError(f"{path}:1: empty node file") from None
        if "id" not in header:
            raise GraphFormatError(f"{path}:1: node file needs an 'id' column")
        if need_label and "label" not in header:
            raise GraphFormatError(f"{path}:1: user node file needs a 'label' column")
        col = {h: i for i, h in enumerate(header)}
        reserved = {"id", "name", "label", "embedding"}
        feat_cols = [i for i, h in enumerate(header) if h not in reserved]
        ids, names, labels, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise GraphFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[col["id"]])
            names.append(row[col["name"]] if "name" in col else row[col["id"]])
            try:
                if "embedding" in col:
                    vec = [float(v) for v in json.loads(row[col["embedding"]])]
                    vec += [float(row[i]) for i in feat_cols]
                else:
                    vec = [float(row[i]) for i in feat_cols]
            except (ValueError, TypeError) as exc:
                raise GraphFormatError(f"{path}:{lineno}: non-numeric feature cell ({exc})") from None
            if not all(math.isfinite(v) for v in vec):
                raise GraphFormatError(f"{path}:{lineno}: non-finite feature value")
            rows.append(vec)
            if need_label:
                cell = row[col["label"]].strip()
                if cell not in ("0", "1"):
                    raise GraphFormatError(f"{path}:{lineno}: label must be 0 or 1, got {cell!r}")
                labels.append(int(cell))
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise GraphFormatError(f"{path}: rows have differing feature widths {sorted(widths)}")
    width = widths.pop() if widths else 0
    feats = np.asarray(rows, dtype=np.float64).reshape(len(rows), width)
    return ids, names, feats, labels


def _read_edge_csv(path, rel, src_index, dst_index):
    if not os.path.exists(path):
        raise GraphFormatError(f"{path}: missing edge file for relation {rel!r}")
    s, d = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise GraphFormatError(f"{path}:{lineno}: edge row needs src_id,dst_id")
            a, b = row[0], row[1]
            if a not in src_index:
                raise GraphFormatError(f"{path}:{lineno}: row {','.join(row)!r} references unknown source id {a!r}")
            if b not in dst_index:
                raise GraphFormatError(f"{path}:{lineno}: row {','.join(row)!r} references unknown target id {b!r}")
            s.append(src_index[a])
            d.append(dst_index[b])
    return s, d


def load_graph(manifest_path):
    """Build a validated graph from a JSON manifest of node and edge CSV files.

    Manifest layout::

        {"nodes": {"user": "users.csv", "food": {"path": "foods.csv"}, ...},
         "relations": [{"src": "user", "name": "eats", "dst": "food", "path": "eats.csv"}, ...]}

    Paths are relative to the manifest's directory. Ids are remapped to dense
    per-type indices in file order; ``graph.ids`` keeps the mapping.
    """
    if not os.path.exists(manifest_path):
        raise GraphFormatError(f"{manifest_path}: missing manifest")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            man = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    base = os.path.dirname(os.path.abspath(manifest_path))
    if "nodes" not in man or "relations" not in man:
        raise GraphFormatError(f"{manifest_path}: manifest needs 'nodes' and 'relations'")
    node_types, ids, names, feats = [], {}, {}, {}
    labels = None
    for t, entry in man["nodes"].items():
        rel_path = entry if isinstance(entry, str) else entry["path"]
        i, n, f, lab = _read_node_csv(os.path.join(base, rel_path), t, need_label=(t == "user"))
        node_types.append(t)
        ids[t], names[t], feats[t] = i, n, f
        if t == "user":
            labels = lab
    if labels is None:
        raise GraphFormatError(f"{manifest_path}: manifest declares no 'user' node file")
    index = {t: {x: k for k, x in enumerate(ids[t])} for t in node_types}
    for t in node_types:
        if len(index[t]) != len(ids[t]):
            raise GraphFormatError(f"{manifest_path}: duplicate ids in node type {t!r}")
    rels = []
    for r in man["relations"]:
        for key in ("src", "name", "dst", "path"):
            if key not in r:
                raise GraphFormatError(f"{manifest_path}: relation entry missing {key!r}")
        if r["src"] not in index or r["dst"] not in index:
            raise GraphFormatError(f"{manifest_path}: relation {r['name']!r} uses undeclared node type")
        s, d = _read_edge_csv(os.path.join(base, r["path"]), r["name"], index[r["src"]], index[r["dst"]])
        rels.append(Relation.from_edges(r["src"], r["name"], r["dst"], s, d,
                                        len(ids[r["src"]]), len(ids[r["dst"]])))
    return HeteroGraph(node_types, ids, feats, labels, rels, names)


def write_manifest(graph, directory):
    """Write ``graph`` as node/edge CSVs plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    man = {"version": FORMAT_VERSION, "nodes": {}, "relations": []}
    for t in graph.node_types:
        fname = f"nodes_{t}.csv"
        feats = graph.features[t]
        with open(os.path.join(directory, fname), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["id", "name"] + (["label"] if t == "user" else []) + [f"f{k}" for k in range(feats.shape[1])]
            w.writerow(head)
            for i, nid in enumerate(graph.ids[t]):
                row = [nid, graph.names[t][i]]
                if t == "user":
                    row.append(int(graph.labels[i]))
                row += [repr(float(v)) for v in feats[i]]
                w.writerow(row)
        man["nodes"][t] = fname
    for r in graph.relations:
        fname = f"edges_{r.src}_{r.name}_{r.dst}.csv"
        s, d = r.edges()
        with open(os.path.join(directory, fname), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src_id", "dst_id"])
            for a, b in zip(s, d):
                w.writerow([graph.ids[r.src][a], graph.ids[r.dst][b]])
        man["relations"].append({"src": r.src, "name": r.name, "dst": r.dst, "path": fname})
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2)
    return path


# -- habit binning -------------------------------------------------------


def bin_habits(values, low_pct=0.1, high_pct=0.1):
    """Tag the top ``high_pct`` of users "high" and the bottom ``low_pct`` "low".

    Bucket sizes are ``floor(n * pct)``. Ties resolve toward the lowest user
    index: "high" is filled first from the order (-value, index), then "low"
    from the remaining users in (value, index) order.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("bin_habits: empty series")
    if not np.all(np.isfinite(v)):
        raise ValueError("bin_habits: non-finite value")
    if not (0 < low_pct and 0 < high_pct and low_pct + high_pct <= 1):
        raise ValueError("bin_habits: need 0 < low_pct, high_pct and low_pct + high_pct <= 1")
    n = v.size
    n_high = math.floor(n * high_pct + 1e-9)
    n_low = math.floor(n * low_pct + 1e-9)
    idx = np.arange(n)
    tags = np.full(n, "none", dtype=object)
    high = np.lexsort((idx, -v))[:n_high]
    tags[high] = "high"
    rest = np.setdiff1d(idx, high)
    low = rest[np.lexsort((rest, v[rest]))][:n_low]
    tags[low] = "low"
    return tags


def habit_edges_from_measures(measures, low_pct=0.1, high_pct=0.1):
    """Turn per-user behavioural measures into habit nodes and user-habit edges.

    ``measures`` maps a measure name to a per-user array where NaN marks a
    non-respondent. Each measure yields two habits, "lots of <name>" and
    "little or no <name>". Returns (habit names, user indices, habit indices).
    """
    names, users, habits = [], [], []
    for name, vals in measures.items():
        vals = np.asarray(vals, dtype=np.float64)
        answered = np.flatnonzero(np.isfinite(vals))
        if answered.size == 0:
            continue
        tags = bin_habits(vals[answered], low_pct, high_pct)
        for tag, label in (("high", f"lots of {name}"), ("low", f"little or no {name}")):
            h = len(names)
            names.append(label)
            members = answered[tags == tag]
            users.extend(members.tolist())
            habits.extend([h] * len(members))
    return names, np.asarray(users, dtype=np.int64), np.asarray(habits, dtype=np.int64)


# -- splits --------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple
    valid_ids: tuple
    test_ids: tuple
    seed: int

    def arrays(self):
        return (np.asarray(self.train_ids, dtype=np.int64),
                np.asarray(self.valid_ids, dtype=np.int64),
                np.asarray(self.test_ids, dtype=np.int64))

    def train_mask(self, n):
        m = np.zeros(n, dtype=bool)
        m[list(self.train_ids)] = True
        return m

    def to_dict(self):
        return {"train": list(self.train_ids), "valid": list(self.valid_ids),
                "test": list(self.test_ids), "seed": self.seed}


STREAM_SPLIT = 1


def split_nodes(n_users, ratios=(0.2, 0.4, 0.4), seed=0):
    """Random train/valid/test partition of ``range(n_users)``."""
    if n_users < 3:
        raise ValueError(f"split_nodes: need at least 3 users, got {n_users}")
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r <= 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"split_nodes: ratios must be 3 positive numbers summing to 1, got {ratios}")
    # own stream: a bare ``default_rng(seed)`` permutation would mirror other seed-derived draws
    perm = np.random.default_rng([int(seed), STREAM_SPLIT]).permutation(n_users)
    n_train = max(1, int(round(n_users * r[0])))
    n_valid = max(1, int(round(n_users * r[1])))
    n_valid = min(n_valid, n_users - n_train - 1)
    tr = tuple(int(x) for x in np.sort(perm[:n_train]))
    va = tuple(int(x) for x in np.sort(perm[n_train:n_train + n_valid]))
    te = tuple(int(x) for x in np.sort(perm[n_train + n_valid:]))
    return SplitSpec(tr, va, te, int(seed))


def edge_homophily(pairs, labels):
    """Fraction of (i, j) pairs with equal labels; NaN for an empty edge set."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return float("nan")
    labels = np.asarray(labels)
    return float(np.mean(labels[pairs[:, 0]] == labels[pairs[:, 1]]))


# -- synthetic generator -------------------------------------------------

_ADJ = ["chocolate", "fried", "sweet", "salted", "grilled", "baked", "creamy", "spicy", "low fat",
        "whole wheat", "frozen", "fresh", "canned", "roasted", "sugared", "plain", "smoked",
        "steamed", "iced", "toasted"]
_NOUN = ["cookie", "chicken", "milk", "cake", "bread", "salad", "soup", "rice", "cereal", "soda",
         "coffee", "cheese", "yogurt", "pasta", "beans", "fish", "pie", "candy", "juice", "potato"]
_HABIT = ["salt at table", "salt in preparation", "milk", "supplements", "alcohol", "tobacco",
          "frozen meals", "fast food", "sugary drinks", "caffeine", "snacks", "vegetables",
          "fruit", "eating out", "water", "diet awareness", "breakfast", "late meals"]


@dataclass
class SyntheticConfig:
    """Planted-signal dietary graph. Node counts default to the full survey scale."""

    n_users: int = 4826
    n_foods: int = 5896
    n_habits: int = 54
    n_ingredients: int = 2792
    n_categories: int = 174
    feature_dims: dict = field(default_factory=lambda: {
        "user": 16, "food": 32, "habit": 16, "ingredient": 16, "category": 8})
    positive_fraction: float = 0.5
    food_signal: float = 0.5
    habit_signal: float = 1.0
    ingredient_signal: float = 0.5
    noise_rate: float = 0.2
    food_degree: float = 28.0
    habit_degree: float = 10.0
    ingredient_degree: float = 3.3
    user_feature_signal: float = 0.3
    node_feature_signal: float = 1.0
    split_ratios: tuple = (0.2, 0.4, 0.4)
    seed: int = 0

    def validate(self):
        for k in ("n_users", "n_foods", "n_habits", "n_ingredients", "n_categories"):
            if getattr(self, k) < 1:
                raise ValueError(f"SyntheticConfig.{k} must be >= 1")
        for k in ("positive_fraction", "food_signal", "habit_signal", "ingredient_signal", "noise_rate"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"SyntheticConfig.{k}={v} outside [0, 1]")
        for deg, n, what in ((self.food_degree, self.n_foods, "food"),
                             (self.habit_degree, self.n_habits, "habit"),
                             (self.ingredient_degree, self.n_ingredients, "ingredient")):
            if deg < 1:
                raise ValueError(f"{what}_degree must be >= 1")
            if deg > n:
                raise ValueError(f"{what}_degree={deg} exceeds the {n} available {what} nodes")
        missing = set(DEFAULT_NODE_TYPES) - set(self.feature_dims)
        if missing:
            raise ValueError(f"feature_dims missing {sorted(missing)}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass
class SyntheticMeta:
    """Ground truth kept alongside a generated graph."""

    split: SplitSpec
    food_pools: tuple
    habit_pools: tuple
    signal_edges: int
    rewired_edges: int

    @property
    def cross_class_fraction(self):
        return self.rewired_edges / self.signal_edges if self.signal_edges else 0.0


def _pools(rng, n, signal):
    perm = rng.permutation(n)
    k = int(math.floor(n * signal / 2))
    return np.sort(perm[:k]), np.sort(perm[k:2 * k]), np.sort(perm[2 * k:])


def _class_features(rng, n, dim, cls_of_node, strength):
    """Unit-variance Gaussian features; nodes of class c are shifted by ±strength/2 along one direction."""
    x = rng.standard_normal((n, dim))
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    sign = np.where(cls_of_node < 0, 0.0, np.where(cls_of_node == 1, 0.5, -0.5))
    return x + (strength * sign)[:, None] * u[None, :]


def _draw(rng, pool, count):
    count = min(int(count), len(pool))
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=count, replace=False)


def _user_edges(rng, labels, pools, degree, signal, noise):
    """Each edge goes to a class pool with prob ``signal`` (the other class's with prob ``noise``)."""
    p0, p1, shared = pools
    cls_pool = (p0, p1)
    src, dst = [], []
    n_sig = n_rew = 0
    if len(p0) == 0 or len(p1) == 0:
        signal = 0.0
    for u, y in enumerate(labels):
        d = max(1, int(rng.poisson(degree)))
        k_sig = int(rng.binomial(d, signal)) if len(shared) else d
        k_other = int(rng.binomial(k_sig, noise))
        own = _draw(rng, cls_pool[y], k_sig - k_other)
        other = _draw(rng, cls_pool[1 - y], k_other)
        sh = _draw(rng, shared, d - k_sig)
        n_sig += len(own) + len(other)
        n_rew += len(other)
        nodes = np.concatenate([own, other, sh]).astype(np.int64)
        src.extend([u] * len(nodes))
        dst.extend(nodes.tolist())
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), n_sig, n_rew


def generate_synthetic(cfg):
    """Generate a labelled dietary graph with planted class structure.

    Users of each class prefer their class's pool of discriminative foods and
    habits; with probability ``noise_rate`` a pooled edge is rewired to the
    other class's pool. Discriminative nodes carry class-conditional features,
    shared nodes do not. Fully determined by ``cfg.seed``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_pos = int(round(cfg.n_users * cfg.positive_fraction))
    labels = np.zeros(cfg.n_users, dtype=np.int64)
    labels[rng.permutation(cfg.n_users)[:n_pos]] = 1

    fpools = _pools(rng, cfg.n_foods, cfg.food_signal)
    hpools = _pools(rng, cfg.n_habits, cfg.habit_signal)
    ipools = _pools(rng, cfg.n_ingredients, cfg.ingredient_signal)

    def node_class(n, pools):
        c = np.full(n, -1)
        c[pools[0]] = 0
        c[pools[1]] = 1
        return c

    food_cls = node_class(cfg.n_foods, fpools)
    dims = cfg.feature_dims
    feats = {
        "user": _class_features(rng, cfg.n_users, dims["user"], labels, cfg.user_feature_signal),
        "food": _class_features(rng, cfg.n_foods, dims["food"], food_cls, cfg.node_feature_signal),
        "habit": _class_features(rng, cfg.n_habits, dims["habit"], node_class(cfg.n_habits, hpools),
                                 cfg.node_feature_signal),
        "ingredient": _class_features(rng, cfg.n_ingredients, dims["ingredient"],
                                      node_class(cfg.n_ingredients, ipools), cfg.node_feature_signal),
        "category": rng.standard_normal((cfg.n_categories, dims["category"])),
    }

    uf_s, uf_d, sig_f, rew_f = _user_edges(rng, labels, fpools, cfg.food_degree, cfg.food_signal, cfg.noise_rate)
    uh_s, uh_d, sig_h, rew_h = _user_edges(rng, labels, hpools, cfg.habit_degree, cfg.habit_signal, cfg.noise_rate)

    fi_s, fi_d = [], []
    for f in range(cfg.n_foods):
        k = max(1, int(rng.poisson(cfg.ingredient_degree)))
        c = food_cls[f]
        if c >= 0 and len(ipools[c]):
            k_cls = int(rng.binomial(k, 1.0 - cfg.noise_rate)) if len(ipools[2]) else k
        else:
            k_cls = 0
        pool_c = ipools[c] if c >= 0 else np.zeros(0, dtype=np.int64)
        shared = ipools[2] if len(ipools[2]) else np.concatenate([ipools[0], ipools[1]])
        nodes = np.concatenate([_draw(rng, pool_c, k_cls), _draw(rng, shared, k - k_cls)])
        fi_s.extend([f] * len(nodes))
        fi_d.extend(nodes.tolist())
    fc_d = rng.integers(0, cfg.n_categories, size=cfg.n_foods)

    ids = {
        "user": [f"u{i}" for i in range(cfg.n_users)],
        "food": [f"f{i}" for i in range(cfg.n_foods)],
        "habit": [f"h{i}" for i in range(cfg.n_habits)],
        "ingredient": [f"i{i}" for i in range(cfg.n_ingredients)],
        "category": [f"c{i}" for i in range(cfg.n_categories)],
    }
    names = {
        "user": ids["user"],
        "food": [f"{_ADJ[i % len(_ADJ)]} {_NOUN[(i // len(_ADJ)) % len(_NOUN)]} #{i}" for i in range(cfg.n_foods)],
        "habit": [f"{'lots of' if i % 2 == 0 else 'little or no'} {_HABIT[(i // 2) % len(_HABIT)]} #{i}"
                  for i in range(cfg.n_habits)],
        "ingredient": [f"{_NOUN[i % len(_NOUN)]} extract #{i}" for i in range(cfg.n_ingredients)],
        "category": [f"category {i}" for i in range(cfg.n_categories)],
    }
    rels = [
        Relation.from_edges("user", "eats", "food", uf_s, uf_d, cfg.n_users, cfg.n_foods),
        Relation.from_edges("user", "has", "habit", uh_s, uh_d, cfg.n_users, cfg.n_habits),
        Relation.from_edges("food", "contains", "ingredient", fi_s, fi_d, cfg.n_foods, cfg.n_ingredients),
        Relation.from_edges("food", "in_category", "category", np.arange(cfg.n_foods), fc_d,
                            cfg.n_foods, cfg.n_categories),
    ]
    g = HeteroGraph(DEFAULT_NODE_TYPES, ids, feats, labels, rels, names)
    meta = SyntheticMeta(
        split=split_nodes(cfg.n_users, cfg.split_ratios, cfg.seed),
        food_pools=tuple(p.tolist() for p in fpools),
        habit_pools=tuple(p.tolist() for p in hpools),
        signal_edges=sig_f + sig_h,
        rewired_edges=rew_f + rew_h,
    )
    return g, meta
