"""Shared-pattern learning over meta-path user graphs.

Per meta-path, a multi-head node-level attention layer aggregates neighbour
projections; a semantic attention layer then weighs the meta-paths.
"""
from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .metapath import neighborhoods


@dataclass
class MacroParams:
    names: tuple
    W: dict          # meta-path name -> (d_in, d_hidden); all entries alias one tensor when shared
    a_src: dict      # meta-path name -> list of (d_head, 1) per head, scores the centre node
    a_nbr: dict      # meta-path name -> list of (d_head, 1) per head, scores the neighbour
    W_sem: nd.Tensor
    b_sem: nd.Tensor
    q: nd.Tensor
    heads: int
    slope: float = 0.2

    @property
    def d_hidden(self):
        return next(iter(self.W.values())).shape[1]

    def parameters(self):
        seen, out = set(), []
        for m in self.names:
            for p in [self.W[m], *self.a_src[m], *self.a_nbr[m]]:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out + [self.W_sem, self.b_sem, self.q]


def init_macro(rng, names, d_in, d_hidden=64, heads=4, d_sem=None, shared_W=False, dtype=np.float64):
    if d_hidden % heads:
        raise ValueError(f"d_hidden={d_hidden} not divisible by heads={heads}")
    dh = d_hidden // heads
    d_sem = d_sem or d_hidden
    W, a_src, a_nbr = {}, {}, {}
    shared = nd.glorot(rng, d_in, d_hidden, "macro.W", dtype) if shared_W else None
    for m in names:
        W[m] = shared if shared_W else nd.glorot(rng, d_in, d_hidden, f"macro.{m}.W", dtype)
        a_src[m] = [nd.glorot(rng, dh, 1, f"macro.{m}.a_src{h}", dtype) for h in range(heads)]
        a_nbr[m] = [nd.glorot(rng, dh, 1, f"macro.{m}.a_nbr{h}", dtype) for h in range(heads)]
    return MacroParams(
        tuple(names), W, a_src, a_nbr,
        nd.glorot(rng, d_hidden, d_sem, "macro.W_sem", dtype),
        nd.zeros((1, d_sem), "macro.b_sem", dtype),
        nd.glorot(rng, d_sem, 1, "macro.q", dtype),
        heads,
    )


def subgraph_neighborhoods(sub):
    return neighborhoods(sub.n, sub.pairs, self_loops="isolated")


def node_attention(nb, H, p, name):
    """Multi-head attention aggregation for one meta-path.

    ``nb`` are the subgraph's neighbourhoods (isolated users carry a single
    self entry, so their output is their own projection). Returns the ELU'd
    concatenated head outputs and the per-head attention weights (E, 1).
    """
    H = nd.as_tensor(H) if not isinstance(H, nd.Tensor) else H
    if H.shape[0] != len(nb.indptr) - 1:
        raise ValueError(f"H has {H.shape[0]} rows, subgraph has {len(nb.indptr) - 1} users")
    W = p.W[name]
    if H.shape[1] != W.shape[0]:
        raise ValueError(f"H width {H.shape[1]} != W input dim {W.shape[0]}")
    Z = nd.matmul(H, W)
    dh = W.shape[1] // p.heads
    outs, alphas = [], []
    for h in range(p.heads):
        Zh = nd.slice_cols(Z, h * dh, (h + 1) * dh) if p.heads > 1 else Z
        s_ctr = nd.gather_rows(nd.matmul(Zh, p.a_src[name][h]), nb.dst)
        s_nbr = nd.gather_rows(nd.matmul(Zh, p.a_nbr[name][h]), nb.src)
        logits = nd.leaky_relu(nd.add(s_ctr, s_nbr), p.slope)
        alpha = nd.segment_softmax(logits, nb.indptr)
        outs.append(nd.segment_weighted_sum(alpha, Zh, nb.src, nb.indptr))
        alphas.append(alpha)
    out = outs[0] if len(outs) == 1 else nd.concat_cols(outs)
    return nd.elu(out), alphas


def semantic_fuse(embeddings, p, rows=None):
    """Weigh meta-path embeddings by semantic attention.

    ``embeddings`` maps meta-path name to its (n, d_hidden) node-level output.
    The per-path score is the mean over ``rows`` (all rows when None) of
    ``q . tanh(W_sem h + b_sem)``; beta is its softmax across paths. Returns
    (ELU(sum_m beta_m H^m), beta as a (1, M) tensor).
    """
    if not embeddings:
        raise ValueError("semantic_fuse: no meta-path embeddings")
    names = list(embeddings)
    shapes = {embeddings[m].shape for m in names}
    if len(shapes) != 1:
        raise ValueError(f"semantic_fuse: embeddings differ in shape {shapes}")
    scores = []
    for m in names:
        proj = nd.tanh(nd.add_bias(nd.matmul(embeddings[m], p.W_sem), p.b_sem))
        scores.append(nd.matmul(nd.mean_rows(proj, rows), p.q))
    beta = nd.row_softmax(nd.concat_cols(scores) if len(scores) > 1 else scores[0])
    acc = None
    for k, m in enumerate(names):
        term = nd.scale_by(embeddings[m], nd.slice_cols(beta, k, k + 1)) if len(names) > 1 else \
            nd.scale_by(embeddings[m], beta)
        acc = term if acc is None else nd.add(acc, term)
    return nd.elu(acc), beta


def macro_forward(nbs, H, p, rows=None):
    """Run node attention for every meta-path and fuse; returns (H^Ma, beta, {name: alphas})."""
    embs, alphas = {}, {}
    for m in p.names:
        embs[m], alphas[m] = node_attention(nbs[m], H, p, m)
    out, beta = semantic_fuse(embs, p, rows)
    return out, beta, alphas


def edge_attention_rows(nb, alphas):
    """Flatten head-averaged attention into (centre, neighbour, alpha) rows for export."""
    avg = np.mean([a.data.reshape(-1) for a in alphas], axis=0)
    return [(int(d), int(s), float(w)) for d, s, w in zip(nb.dst, nb.src, avg)]
