"""Two-stage training schedule, evaluation metrics and the ablation grid."""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import ndmath as nd
from .hetgraph import split_nodes, SplitSpec
from .macro import init_macro, macro_forward, subgraph_neighborhoods
from .metapath import build_subgraphs, union_graphs
from .micro import average_heads, build_structure, export_user_attention, init_micro, micro_forward
from .refine import (
    RefinedGraph,
    build_refine_trainset,
    filter_by_scores,
    final_forward,
    fuse_embeddings,
    gcn_structure,
    init_final,
    init_fusion,
    score_and_filter,
    train_refiner,
)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """A loss or gradient went non-finite; ``diagnostics`` says where."""

    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class RunConfig:
    """Everything that determines a training run. Flat so ``key=value`` overrides stay simple."""

    seed: int = 0
    seeds: tuple = (0,)
    split_ratios: tuple = (0.2, 0.4, 0.4)
    # stage 1: aggregators + fusion + linear probe
    stage1_epochs: int = 100
    stage1_lr: float = 1e-3
    stage1_weight_decay: float = 1e-3
    # stage 2: final graph classifier
    stage2_epochs: int = 500
    stage2_lr: float = 1e-4
    stage2_weight_decay: float = 1e-3
    dropout: float = 0.6
    d_macro: int = 64
    d_micro: int = 256
    d_fused: int = 256
    d_final: int = 128
    heads: int = 4
    metapaths: tuple = ({"name": "UFU", "k": 2}, {"name": "UHU", "k": 1})
    macro: bool = True
    micro: bool = True
    refine: bool = True
    shared_macro_W: bool = False
    micro_mean_norm: bool = True
    class_weighting: bool = False
    # refiner. Only observed edges are scored/trained on; sampling non-edges as
    # extra negatives is a possible extension but deliberately not done.
    refine_threshold: float = 0.5
    refine_epochs: int = 200
    refine_lr: float = 5e-3
    refine_hidden: int = 64
    refine_class_weighting: bool = False
    # baseline MLP on raw user features
    mlp_epochs: int = 500
    mlp_lr: float = 1e-3
    mlp_hidden: int = 128
    dtype: str = "float64"
    top_k: int = 10

    def validate(self):
        if not (self.macro or self.micro):
            raise ValueError("at least one of macro/micro must be enabled")
        if len(self.split_ratios) != 3 or not math.isclose(sum(self.split_ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split_ratios must be three fractions summing to 1, got {self.split_ratios}")
        for k in ("stage1_epochs", "stage2_epochs", "d_macro", "d_micro", "d_fused", "d_final", "heads"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("seeds", "split_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        if "metapaths" in d:
            d["metapaths"] = tuple(dict(m) if isinstance(m, dict) else {"name": m, "k": 1} for m in d["metapaths"])
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["split_ratios"] = list(self.split_ratios)
        d["metapaths"] = [dict(m) for m in self.metapaths]
        return d

    @property
    def flags(self):
        return {"macro": self.macro, "micro": self.micro, "refine": self.refine}


# -- metrics -------------------------------------------------------------

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "roc_auc")


def roc_auc(scores, y):
    """Probability that a random positive outscores a random negative (ties count half).

    Computed from average ranks; ``None`` when ``y`` holds a single class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # average 1-based ranks over tie groups
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(prob_pos, hard, y):
    """Classification metrics with class 1 as positive. Returns a dict."""
    prob_pos = np.asarray(prob_pos, dtype=np.float64)
    hard = np.asarray(hard).astype(np.int64)
    y = np.asarray(y).astype(np.int64)
    if not (len(prob_pos) == len(hard) == len(y)):
        raise ValueError("evaluate: length mismatch")
    if len(y) == 0:
        raise ValueError("evaluate: no samples")
    tp = int(np.sum((hard == 1) & (y == 1)))
    fp = int(np.sum((hard == 1) & (y == 0)))
    fn = int(np.sum((hard == 0) & (y == 1)))
    tn = int(np.sum((hard == 0) & (y == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = roc_auc(prob_pos, y)
    if auc is None:
        log.warning("ROC-AUC undefined: evaluation labels contain a single class")
    return {
        "accuracy": (tp + tn) / len(y),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "roc_auc": auc,
        "confusion": [[tn, fp], [fn, tp]],
    }


@dataclass
class MetricsReport:
    """Per-seed metrics and their mean / population std."""

    per_seed: list
    seeds: list

    def values(self, name):
        return [m[name] for m in self.per_seed if m[name] is not None]

    def mean(self, name):
        v = self.values(name)
        return float(np.mean(v)) if v else None

    def std(self, name):
        v = self.values(name)
        return float(np.std(v)) if v else None

    def summary(self):
        return {k: {"mean": self.mean(k), "std": self.std(k)} for k in METRIC_NAMES}

    def to_dict(self):
        return {"seeds": list(self.seeds), "summary": self.summary(), "per_seed": self.per_seed}

    def format_row(self, label=""):
        cells = []
        for k in METRIC_NAMES:
            m, s = self.mean(k), self.std(k)
            cells.append("   n/a       " if m is None else f"{100 * m:6.2f}±{100 * s:4.2f}")
        return f"{label:<14}" + " ".join(cells)


def format_table(rows):
    """``rows``: [(label, MetricsReport)] -> fixed-width text table."""
    head = f"{'variant':<14}" + " ".join(f"{k:>11}" for k in METRIC_NAMES)
    return "\n".join([head] + [r.format_row(label) for label, r in rows])


# -- pipeline ------------------------------------------------------------


@dataclass
class Stage1Model:
    macro: object = None
    micro: object = None
    fusion: object = None
    probe_W: nd.Tensor = None
    probe_b: nd.Tensor = None

    def parameters(self):
        out = []
        if self.macro is not None:
            out += self.macro.parameters()
        if self.micro is not None:
            out += self.micro.parameters()
        return out + self.fusion.parameters() + [self.probe_W, self.probe_b]


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    split: SplitSpec
    stage1_losses: list
    stage2_losses: list
    valid_auc_trace: list
    best_epoch: int
    H: np.ndarray                    # fused stage-1 embeddings (last epoch)
    embeddings: np.ndarray           # final-layer user embeddings (best validation)
    prob: np.ndarray                 # (n_users, 2)
    pred: np.ndarray
    metrics: dict                    # test split
    valid_metrics: dict
    unified: object
    subgraphs: list
    refined: RefinedGraph
    refine_report: dict
    refiner_losses: list = field(default_factory=list)
    beta: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    micro_structure: object = None
    micro_alpha: np.ndarray = None

    def attention_records(self, g, users=None, top_k=None):
        if self.micro_structure is None:
            raise ValueError("run has no micro aggregation; no attention to export")
        return export_user_attention(g, self.micro_structure, self.micro_alpha, users,
                                     self.config.top_k if top_k is None else top_k)


def _features(g, dtype):
    return {t: np.ascontiguousarray(g.features[t], dtype=dtype) for t in g.node_types}


def _stage1_forward(model, X, nbs, mst, train_rows=None):
    """Fused user embeddings, probe logits and diagnostics."""
    parts, beta, alphas = [], None, None
    if model.macro is not None:
        h_ma, beta, _ = macro_forward(nbs, X["user"], model.macro, rows=train_rows)
        parts.append(h_ma)
    if model.micro is not None:
        h_mi_all, alphas = micro_forward(mst, X, model.micro)
        n_users = X["user"].shape[0]
        u0 = mst.offsets["user"]
        parts.append(nd.slice_rows(h_mi_all, u0, u0 + n_users))
    H = fuse_embeddings(parts, model.fusion)
    logits = nd.add_bias(nd.matmul(H, model.probe_W), model.probe_b)
    return H, logits, beta, alphas


def _class_weight(labels, rows):
    counts = np.bincount(labels[rows], minlength=2).astype(np.float64)
    counts[counts == 0] = 1.0
    return counts.sum() / (2.0 * counts)


def _guarded(stage, epoch, losses, fn):
    try:
        return fn()
    except FloatingPointError as e:
        diag = {"stage": stage, "epoch": epoch, "last_losses": losses[-5:], "error": str(e)}
        raise TrainingDivergence(f"{stage} diverged at epoch {epoch}: {e}", diag) from e


def build_stage1(g, cfg, rng):
    """Initialise the stage-1 model and its inputs: (model, X, nbs, mst, subgraphs, unified)."""
    dt = cfg.np_dtype
    X = _features(g, dt)
    subgraphs = build_subgraphs(g, cfg.metapaths)
    uni = union_graphs(subgraphs)

    model = Stage1Model()
    nbs, mst = None, None
    d_in = 0
    if cfg.macro:
        names = [s.name for s in subgraphs]
        model.macro = init_macro(rng, names, X["user"].shape[1], cfg.d_macro, cfg.heads,
                                 shared_W=cfg.shared_macro_W, dtype=dt)
        nbs = {s.name: subgraph_neighborhoods(s) for s in subgraphs}
        d_in += cfg.d_macro
    if cfg.micro:
        rels = [r.name for r in g.relations]
        model.micro = init_micro(rng, g.feature_dims(), rels, cfg.d_micro, cfg.heads, cfg.micro_mean_norm, dt)
        mst = build_structure(g)
        d_in += cfg.d_micro
    model.fusion = init_fusion(rng, d_in, cfg.d_fused, dt)
    model.probe_W = nd.glorot(rng, cfg.d_fused, 2, "probe.W", dt)
    model.probe_b = nd.zeros((1, 2), "probe.b", dt)
    return model, X, nbs, mst, subgraphs, uni


def stage1_gradcheck(g, cfg, seed=0, eps=1e-5):
    """Finite-difference check of the stage-1 loss (macro, micro, fusion, probe) w.r.t. every parameter.

    Returns ``{parameter name: relative error}``. Intended for small graphs in float64.
    """
    cfg.validate()
    train, _, _ = split_nodes(g.n_users, cfg.split_ratios, seed).arrays()
    labels = np.full(g.n_users, -1, dtype=np.int64)
    labels[train] = np.asarray(g.labels, dtype=np.int64)[train]
    model, X, nbs, mst, _, _ = build_stage1(g, cfg, np.random.default_rng([int(seed), 2]))

    def loss():
        _, logits, _, _ = _stage1_forward(model, X, nbs, mst, train_rows=train)
        return nd.cross_entropy(logits, labels, rows=train)

    return nd.check_gradients(loss, model.parameters(), eps)


def train_pipeline(g, cfg, split=None, seed=None):
    """Run stage 1, refinement and stage 2 for one seed; returns a :class:`RunResult`."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    split = split or split_nodes(g.n_users, cfg.split_ratios, seed)
    train, valid, test = split.arrays()
    labels = np.asarray(g.labels, dtype=np.int64)
    # labels outside the training split are never read before stage-2 model selection
    train_labels = np.full(g.n_users, -1, dtype=np.int64)
    train_labels[train] = labels[train]
    rng = np.random.default_rng([int(seed), 2])
    dt = cfg.np_dtype
    model, X, nbs, mst, subgraphs, uni = build_stage1(g, cfg, rng)

    cw = _class_weight(train_labels, train) if cfg.class_weighting else None
    params = model.parameters()
    opt = nd.Adam(params, lr=cfg.stage1_lr, weight_decay=cfg.stage1_weight_decay)
    s1_losses = []
    for epoch in range(cfg.stage1_epochs):
        def step():
            with nd.Tape() as tape:
                _, logits, _, _ = _stage1_forward(model, X, nbs, mst, train_rows=train)
                loss = nd.cross_entropy(logits, train_labels, rows=train, class_weight=cw)
            grads = nd.backward(tape, loss, params)
            opt.step(grads)
            return loss.item()
        s1_losses.append(_guarded("stage1", epoch, s1_losses, step))

    # last-epoch snapshot feeds refinement and the final classifier
    H_t, _, beta_t, alphas = _stage1_forward(model, X, nbs, mst)
    H = H_t.data.copy()
    beta = {}
    if beta_t is not None:
        beta = dict(zip(model.macro.names, beta_t.data.reshape(-1).tolist()))

    refiner_losses = []
    if cfg.refine:
        pairs, targets = build_refine_trainset(uni.pairs, train, train_labels)
        refiner = train_refiner(pairs, targets, H, cfg.refine_epochs, cfg.refine_lr, 0.0, cfg.refine_hidden,
                                cfg.refine_threshold, cfg.refine_class_weighting, seed)
        refiner_losses = refiner.loss_trace
        refined = score_and_filter(uni, H, refiner)
        report = refined.report()
        report.update(trainset_edges=int(len(pairs)), trainset_positive=int(targets.sum()),
                      single_class=bool(refiner.single_class))
    else:
        refined = filter_by_scores(uni.n, uni.pairs, np.ones(uni.n_edges), 0.0)
        report = refined.report()

    # stage 2: final graph classifier, best-validation selection by ROC-AUC
    fin = init_final(rng, cfg.d_fused, cfg.d_final, 2, cfg.dropout, dt)
    gs = gcn_structure(uni.n, refined.pairs)
    fparams = fin.parameters()
    opt2 = nd.Adam(fparams, lr=cfg.stage2_lr, weight_decay=cfg.stage2_weight_decay)
    s2_losses, val_trace = [], []
    best = (-np.inf, -1, fin.snapshot())
    yv = labels[valid]
    for epoch in range(cfg.stage2_epochs):
        def step():
            with nd.Tape() as tape:
                _, logits = final_forward(H, gs, fin, training=True, rng=rng)
                loss = nd.cross_entropy(logits, train_labels, rows=train, class_weight=cw)
            grads = nd.backward(tape, loss, fparams)
            opt2.step(grads)
            return loss.item()
        s2_losses.append(_guarded("stage2", epoch, s2_losses, step))
        _, logits = final_forward(H, gs, fin, training=False)
        pv = nd.row_softmax(logits).data[valid, 1]
        auc = roc_auc(pv, yv) if len(valid) else None
        auc = -s2_losses[-1] if auc is None else auc
        val_trace.append(auc)
        if auc > best[0]:
            best = (auc, epoch, fin.snapshot())
    fin.restore(best[2])
    emb, logits = final_forward(H, gs, fin, training=False)
    prob = nd.row_softmax(logits).data.astype(np.float64)
    pred = prob.argmax(axis=1)

    report.update(homophily_before_test=_homophily_on(uni.pairs, labels, test),
                  homophily_after_test=_homophily_on(refined.pairs, labels, test))
    result = RunResult(
        config=cfg, seed=seed, split=split,
        stage1_losses=s1_losses, stage2_losses=s2_losses, valid_auc_trace=val_trace, best_epoch=best[1],
        H=H, embeddings=emb.data.copy(), prob=prob, pred=pred,
        metrics=evaluate(prob[test, 1], pred[test], labels[test]) if len(test) else {},
        valid_metrics=evaluate(prob[valid, 1], pred[valid], labels[valid]) if len(valid) else {},
        unified=uni, subgraphs=subgraphs, refined=refined, refine_report=report,
        refiner_losses=refiner_losses, beta=beta,
        params={p.name: p.data.copy() for p in params + fparams},
    )
    if cfg.micro:
        result.micro_structure = mst
        result.micro_alpha = average_heads(alphas)
    return result


def _homophily_on(pairs, labels, rows):
    """Homophily restricted to edges with both endpoints in ``rows``; None when there are none."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    mask = np.zeros(len(labels), dtype=bool)
    mask[rows] = True
    sel = pairs[mask[pairs[:, 0]] & mask[pairs[:, 1]]]
    if len(sel) == 0:
        return None
    return float(np.mean(labels[sel[:, 0]] == labels[sel[:, 1]]))


# -- baseline ------------------------------------------------------------


def train_mlp_baseline(g, cfg, split=None, seed=None):
    """Two-layer MLP on raw user features, same split and selection protocol. Returns test metrics."""
    seed = cfg.seed if seed is None else seed
    split = split or split_nodes(g.n_users, cfg.split_ratios, seed)
    train, valid, test = split.arrays()
    labels = np.asarray(g.labels, dtype=np.int64)
    train_labels = np.full(g.n_users, -1, dtype=np.int64)
    train_labels[train] = labels[train]
    rng = np.random.default_rng([int(seed), 4])
    dt = cfg.np_dtype
    X = nd.const(np.asarray(g.features["user"], dtype=dt))
    W1 = nd.glorot(rng, X.shape[1], cfg.mlp_hidden, "mlp.W1", dt)
    b1 = nd.zeros((1, cfg.mlp_hidden), "mlp.b1", dt)
    W2 = nd.glorot(rng, cfg.mlp_hidden, 2, "mlp.W2", dt)
    b2 = nd.zeros((1, 2), "mlp.b2", dt)
    params = [W1, b1, W2, b2]

    def fwd(training):
        x = nd.dropout(X, cfg.dropout, rng=rng, training=training)
        h = nd.relu(nd.add_bias(nd.matmul(x, W1), b1))
        return nd.add_bias(nd.matmul(nd.dropout(h, cfg.dropout, rng=rng, training=training), W2), b2)

    opt = nd.Adam(params, lr=cfg.mlp_lr, weight_decay=cfg.stage2_weight_decay)
    best = (-np.inf, [p.data.copy() for p in params])
    for _ in range(cfg.mlp_epochs):
        with nd.Tape() as tape:
            loss = nd.cross_entropy(fwd(True), train_labels, rows=train)
        opt.step(nd.backward(tape, loss, params))
        pv = nd.row_softmax(fwd(False)).data[valid, 1]
        auc = roc_auc(pv, labels[valid])
        auc = -loss.item() if auc is None else auc
        if auc > best[0]:
            best = (auc, [p.data.copy() for p in params])
    for p, s in zip(params, best[1]):
        p.data = s
    prob = nd.row_softmax(fwd(False)).data.astype(np.float64)
    return evaluate(prob[test, 1], prob[test].argmax(axis=1), labels[test])


# -- multi-seed runs and ablations ---------------------------------------

# Six flag combinations: (label, macro, micro, refine)
ABLATION_ROWS = (
    ("macro", True, False, False),
    ("micro", False, True, False),
    ("macro+micro", True, True, False),
    ("macro+refine", True, False, True),
    ("micro+refine", False, True, True),
    ("full", True, True, True),
)


def _graph_for(g, seed):
    return g(seed) if callable(g) else g


def run_seeds(g, cfg, seeds=None):
    """``g`` is a graph or a ``seed -> graph`` factory. Returns (MetricsReport, [RunResult])."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    runs = [train_pipeline(_graph_for(g, s), replace(cfg, seed=s), seed=s) for s in seeds]
    return MetricsReport([r.metrics for r in runs], seeds), runs


def run_ablation_grid(g, cfg, seeds=None, keep_runs=False):
    """Train every ablation variant over the seed list; returns [(label, flags, MetricsReport[, runs])]."""
    rows = []
    for label, ma, mi, rf in ABLATION_ROWS:
        vcfg = replace(cfg, macro=ma, micro=mi, refine=rf)
        rep, runs = run_seeds(g, vcfg, seeds)
        row = (label, vcfg.flags, rep)
        rows.append(row + (runs,) if keep_runs else row)
    return rows


def run_mlp_seeds(g, cfg, seeds=None):
    seeds = list(cfg.seeds if seeds is None else seeds)
    return MetricsReport([train_mlp_baseline(_graph_for(g, s), cfg, seed=s) for s in seeds], seeds)


# -- export --------------------------------------------------------------


def export_embeddings(h, labels, ids, path):
    """One row per user: id, label, embedding values (``repr`` floats, exact round trip)."""
    h = np.asarray(h)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{k}" for k in range(h.shape[1])])
        for i, row in enumerate(h):
            w.writerow([ids[i], int(labels[i])] + [repr(float(v)) for v in row])


def load_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    labels = np.asarray([int(r[1]) for r in rows], dtype=np.int64)
    h = np.asarray([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)
    return ids, labels, h
