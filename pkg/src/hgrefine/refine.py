"""Embedding fusion, edge-reliability refinement and the final graph classifier."""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .hetgraph import edge_homophily
from .metapath import neighborhoods

log = logging.getLogger(__name__)


# -- fusion --------------------------------------------------------------


@dataclass
class FusionParams:
    W: nd.Tensor
    b: nd.Tensor

    def parameters(self):
        return [self.W, self.b]


def init_fusion(rng, d_in, d_out=256, dtype=np.float64):
    return FusionParams(nd.glorot(rng, d_in, d_out, "fusion.W", dtype), nd.zeros((1, d_out), "fusion.b", dtype))


def fuse_embeddings(parts, p):
    """``ReLU(W [h_1 || h_2 || ...] + b)`` over the present embedding blocks (users only)."""
    parts = [x for x in parts if x is not None]
    if not parts:
        raise ValueError("fuse_embeddings: nothing to fuse")
    rows = {x.shape[0] for x in parts}
    if len(rows) != 1:
        raise ValueError(f"fuse_embeddings: row counts differ {rows}")
    x = parts[0] if len(parts) == 1 else nd.concat_cols(parts)
    if x.shape[1] != p.W.shape[0]:
        raise ValueError(f"fuse_embeddings: input width {x.shape[1]} != {p.W.shape[0]}")
    return nd.relu(nd.add_bias(nd.matmul(x, p.W), p.b))


# -- refinement ----------------------------------------------------------


def build_refine_trainset(pairs, train_ids, labels):
    """Edges with both endpoints in the training set and their same-label targets.

    Only ``labels[train_ids]`` is ever read. Returns (pairs (m, 2), targets (m,)).
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    train = np.zeros(int(max(pairs.max(initial=-1) + 1, max(train_ids, default=-1) + 1)), dtype=bool)
    train[list(train_ids)] = True
    keep = train[pairs[:, 0]] & train[pairs[:, 1]]
    kept = pairs[keep]
    if len(kept) == 0:
        raise ValueError("refine trainset is empty: no edge joins two training users")
    lab = np.full(len(train), -1, dtype=np.int64)
    tid = np.asarray(list(train_ids), dtype=np.int64)
    lab[tid] = np.asarray(labels)[tid]
    targets = (lab[kept[:, 0]] == lab[kept[:, 1]]).astype(np.int64)
    return kept, targets


@dataclass
class RefinerModel:
    W1: nd.Tensor
    b1: nd.Tensor
    W2: nd.Tensor
    b2: nd.Tensor
    threshold: float = 0.5
    single_class: bool = False
    loss_trace: list = field(default_factory=list)

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]


def init_refiner(rng, d_in, hidden=64, threshold=0.5, dtype=np.float64):
    return RefinerModel(
        nd.glorot(rng, 2 * d_in, hidden, "refiner.W1", dtype), nd.zeros((1, hidden), "refiner.b1", dtype),
        nd.glorot(rng, hidden, 1, "refiner.W2", dtype), nd.zeros((1, 1), "refiner.b2", dtype),
        threshold,
    )


def _mlp_prob(m, x):
    h = nd.relu(nd.add_bias(nd.matmul(x, m.W1), m.b1))
    return nd.sigmoid(nd.add_bias(nd.matmul(h, m.W2), m.b2))


def refiner_scores(m, H, pairs):
    """Symmetric reliability: mean of the probabilities for [h_i||h_j] and [h_j||h_i]."""
    H = H.data if isinstance(H, nd.Tensor) else np.asarray(H)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a, b = H[pairs[:, 0]], H[pairs[:, 1]]
    fwd = _mlp_prob(m, nd.const(np.concatenate([a, b], axis=1)))
    rev = _mlp_prob(m, nd.const(np.concatenate([b, a], axis=1)))
    return nd.scale(nd.add(fwd, rev), 0.5)


def train_refiner(pairs, targets, H, epochs=200, lr=0.005, weight_decay=0.0, hidden=64, threshold=0.5,
                  class_weighting=False, seed=0):
    """Fit the edge-reliability MLP by full-batch Adam on binary cross-entropy.

    ``H`` must be a fixed (detached) embedding matrix. With
    ``class_weighting`` the two target classes contribute equally.
    """
    H = H.data if isinstance(H, nd.Tensor) else np.asarray(H)
    rng = np.random.default_rng([int(seed), 3])
    m = init_refiner(rng, H.shape[1], hidden, threshold, H.dtype)
    targets = np.asarray(targets, dtype=np.int64)
    m.single_class = len(np.unique(targets)) < 2
    if m.single_class:
        log.warning("refiner trainset has a single target class (%d edges)", len(targets))
    params = m.parameters()
    opt = nd.Adam(params, lr=lr, weight_decay=weight_decay)
    y = targets.reshape(-1, 1).astype(H.dtype)
    sample_w = None
    if class_weighting and not m.single_class:
        pos = targets.mean()
        sample_w = np.where(targets == 1, 0.5 / pos, 0.5 / (1 - pos)).reshape(-1, 1)
    for _ in range(epochs):
        with nd.Tape() as tape:
            prob = refiner_scores(m, H, pairs)
            loss = nd.binary_cross_entropy(prob, y, weight=sample_w)
        grads = nd.backward(tape, loss, params)
        m.loss_trace.append(loss.item())
        opt.step(grads)
    return m


@dataclass
class RefinedGraph:
    n: int
    pairs: np.ndarray     # kept undirected pairs
    scores: np.ndarray    # reliability score of each kept pair
    all_pairs: np.ndarray
    all_scores: np.ndarray
    threshold: float

    @property
    def n_edges(self):
        return len(self.pairs)

    def edge_set(self):
        return {(int(a), int(b)) for a, b in self.pairs}

    def kept_mask(self):
        return self.all_scores >= self.threshold

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst", "score", "kept"])
            for (a, b), s, k in zip(self.all_pairs, self.all_scores, self.kept_mask()):
                w.writerow([int(a), int(b), repr(float(s)), int(k)])

    def report(self, labels=None):
        out = {"n_nodes": self.n, "edges_before": int(len(self.all_pairs)), "edges_kept": int(self.n_edges),
               "edges_dropped": int(len(self.all_pairs) - self.n_edges), "threshold": self.threshold}
        if labels is not None:
            out["homophily_before"] = edge_homophily(self.all_pairs, labels)
            out["homophily_after"] = edge_homophily(self.pairs, labels)
        return out


def filter_by_scores(n, pairs, scores, threshold=0.5):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    keep = scores >= threshold
    return RefinedGraph(n, pairs[keep], scores[keep], pairs, scores, float(threshold))


def score_and_filter(uni, H, model, threshold=None):
    """Score every unified-graph edge and keep those at or above the threshold."""
    th = model.threshold if threshold is None else threshold
    if uni.n_edges == 0:
        return filter_by_scores(uni.n, uni.pairs, np.zeros(0), th)
    scores = refiner_scores(model, H, uni.pairs).data.reshape(-1)
    return filter_by_scores(uni.n, uni.pairs, scores, th)


# -- final classifier ----------------------------------------------------


@dataclass
class FinalGNNParams:
    W1: nd.Tensor
    b1: nd.Tensor
    W2: nd.Tensor
    b2: nd.Tensor
    dropout: float = 0.6

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, s in zip(self.parameters(), snap):
            p.data = s.copy()


def init_final(rng, d_in, hidden=128, n_classes=2, dropout=0.6, dtype=np.float64):
    return FinalGNNParams(
        nd.glorot(rng, d_in, hidden, "final.W1", dtype), nd.zeros((1, hidden), "final.b1", dtype),
        nd.glorot(rng, hidden, n_classes, "final.W2", dtype), nd.zeros((1, n_classes), "final.b2", dtype),
        dropout,
    )


@dataclass(frozen=True)
class GCNStructure:
    """Symmetric-normalised adjacency with self-loops as weighted segments."""

    indptr: np.ndarray
    src: np.ndarray
    weights: np.ndarray


def gcn_structure(n, pairs):
    nb = neighborhoods(n, pairs, self_loops="all")
    deg = nb.degree.astype(np.float64)
    w = 1.0 / np.sqrt(deg[nb.dst] * deg[nb.src])
    return GCNStructure(nb.indptr, nb.src, w.reshape(-1, 1))


def final_forward(H, gs, p, training=False, rng=None):
    """Returns (node embeddings, class logits)."""
    H = H if isinstance(H, nd.Tensor) else nd.const(H)
    x = nd.dropout(H, p.dropout, rng=rng, training=training)
    xw = nd.matmul(x, p.W1)
    agg = nd.segment_weighted_sum(nd.const(gs.weights.astype(xw.dtype)), xw, gs.src, gs.indptr)
    h = nd.relu(nd.add_bias(agg, p.b1))
    logits = nd.add_bias(nd.matmul(nd.dropout(h, p.dropout, rng=rng, training=training), p.W2), p.b2)
    return h, logits


def final_predict(H, refined_pairs, p, n=None):
    """Evaluation-mode prediction: (embeddings, class probabilities, hard labels)."""
    n = H.shape[0] if n is None else n
    gs = gcn_structure(n, refined_pairs)
    h, logits = final_forward(H, gs, p, training=False)
    prob = nd.row_softmax(logits).data
    return h.data, prob, prob.argmax(axis=1)
