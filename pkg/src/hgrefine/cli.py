"""Command-line entry point: ``hgrefine <command> [--config F] [--seed N] [--run-dir D] [--set k=v]...``.

Every command writes ``config.json`` (the frozen effective config) and
``run.json`` (command, seed, versions) into its run directory, followed by
its artifacts. Re-running a command with ``--config <run>/config.json``
reproduces the artifacts byte-for-byte at the default single BLAS thread.

numpy and the package modules are imported only after ``--threads`` has been
applied to the BLAS environment variables.
"""
import argparse
import copy
import csv
import json
import os
import platform
import sys
from pathlib import Path

NEEDS_GRAPH = ("metapath", "train", "eval", "stats")
COMMANDS = ("gen", "ingest", "metapath", "train", "ablate", "eval", "explain", "stats", "gradcheck")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

# top-level config sections; the contents of "synthetic" and "run" are checked by their dataclasses
DEFAULTS = {
    "seed": 0,
    "graph": None,
    "synthetic": {},
    "run": {},
    "ablate": {"with_mlp": True},
    "explain": {"users": None, "max_users": 5, "min_peers": 3, "template": None},
    "endpoint": None,
    "stats": {"relation": "has", "correction": False, "stopwords": [], "nutrients": {}, "max_terms": 20},
    "gradcheck": {"n_users": 12, "tolerance": 1e-4},
}
_SECTION_KEYS = {k: set(v) for k, v in DEFAULTS.items() if isinstance(v, dict) and v}


class UsageError(Exception):
    pass


# -- config ----------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, item):
    """Apply one ``dotted.key=value`` override in place; values are parsed as JSON when possible."""
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in DEFAULTS:
        raise UsageError(f"unknown config key {parts[0]!r}")
    node = cfg
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        if not isinstance(node[p], dict):
            raise UsageError(f"config key {p!r} is not a section")
        node = node[p]
    node[parts[-1]] = _parse_value(raw)


def check_config(cfg):
    unknown = set(cfg) - set(DEFAULTS) - {"command"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for sec, keys in _SECTION_KEYS.items():
        extra = set(cfg.get(sec) or {}) - keys
        if extra:
            raise UsageError(f"unknown keys in {sec!r}: {sorted(extra)}")


def effective_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}:{e.lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        check_config(user)
        for k, v in user.items():
            if k in _SECTION_KEYS and isinstance(v, dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    for item in args.set or []:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "graph", None):
        cfg["graph"] = args.graph
    check_config(cfg)
    if cfg.get("graph"):
        cfg["graph"] = os.path.abspath(cfg["graph"])
    cfg["seed"] = int(cfg["seed"])
    # the single seed drives generation, splitting and initialisation
    cfg["synthetic"] = {**cfg["synthetic"], "seed": cfg["seed"]}
    cfg["run"] = {**cfg["run"], "seed": cfg["seed"]}
    cfg["command"] = args.command
    try:
        _synthetic_config(cfg)
        _run_config(cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


def _versions():
    import numpy as np
    from . import BACKEND, __version__
    return {"hgrefine": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "kernel_backend": BACKEND}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def prepare_run_dir(cfg, run_dir):
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    _write_json(out / "run.json", {"command": cfg["command"], "seed": cfg["seed"], "versions": _versions()})
    return out


# -- shared helpers --------------------------------------------------------


def _run_config(cfg):
    from .trainer import RunConfig
    rc = RunConfig.from_dict(cfg["run"])
    rc.validate()
    return rc


def _synthetic_config(cfg):
    from .hetgraph import SyntheticConfig
    return SyntheticConfig.from_dict(cfg["synthetic"])


def load_any_graph(path):
    """A serialized graph (``graph.json``) or a CSV manifest."""
    from .hetgraph import FORMAT_NAME, GraphFormatError, HeteroGraph, load_graph
    try:
        with open(path, encoding="utf-8") as fh:
            head = json.load(fh)
    except FileNotFoundError:
        raise GraphFormatError(f"{path}: no such graph file") from None
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if isinstance(head, dict) and head.get("format") == FORMAT_NAME:
        g = HeteroGraph.from_dict(head)
        g.validate()
        return g
    return load_graph(path)


def _require_graph(cfg):
    if not cfg.get("graph"):
        raise UsageError(f"{cfg['command']} needs a graph: pass --graph or set \"graph\" in the config")
    return load_any_graph(cfg["graph"])


def _graph_summary(g):
    rel = {f"{r.src}-{r.name}-{r.dst}": int(r.n_edges) for r in g.relations}
    return {"node_counts": {t: int(c) for t, c in g.node_counts.items()}, "relations": rel,
            "positive_users": int(sum(g.labels)), "users": int(g.n_users)}


def _split_name(split, n):
    names = ["unused"] * n
    for label, idx in zip(("train", "valid", "test"), split.arrays()):
        for i in idx:
            names[int(i)] = label
    return names


# -- commands ----------------------------------------------------------------


def cmd_gen(cfg, out, args):
    from .hetgraph import generate_synthetic, write_manifest
    g, meta = generate_synthetic(_synthetic_config(cfg))
    g.save(out / "graph.json")
    write_manifest(g, out / "graph_csv")
    summary = _graph_summary(g)
    summary.update(signal_edges=int(meta.signal_edges), rewired_edges=int(meta.rewired_edges),
                   cross_class_fraction=meta.cross_class_fraction)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_ingest(cfg, out, args):
    from .hetgraph import load_graph
    src = args.manifest or cfg.get("graph")
    if not src:
        raise UsageError("ingest needs --manifest")
    g = load_graph(src)
    g.validate()
    g.save(out / "graph.json")
    summary = _graph_summary(g)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_metapath(cfg, out, args):
    from .hetgraph import edge_homophily
    from .metapath import build_subgraphs, union_graphs
    g = _require_graph(cfg)
    rc = _run_config(cfg)
    subs = build_subgraphs(g, rc.metapaths)
    uni = union_graphs(subs)
    rows = [{"name": s.name, "k": int(spec.get("k", 1)), "edges": int(s.n_edges),
             "homophily": edge_homophily(s.pairs, g.labels)} for s, spec in zip(subs, rc.metapaths)]
    report = {"metapaths": rows, "unified_edges": int(uni.n_edges),
              "unified_homophily": edge_homophily(uni.pairs, g.labels)}
    with open(out / "unified_edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(uni.pairs.tolist())
    _write_json(out / "metapaths.json", report)
    return report


def write_train_artifacts(g, r, out):
    from .micro import save_attention_csv, save_attention_json
    from .trainer import export_embeddings
    split = _split_name(r.split, g.n_users)
    metrics = {"test": r.metrics, "valid": r.valid_metrics, "best_epoch": r.best_epoch, "beta": r.beta,
               "refine": r.refine_report}
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "losses.json", {"stage1": r.stage1_losses, "stage2": r.stage2_losses,
                                      "refiner": r.refiner_losses, "valid_auc": r.valid_auc_trace})
    r.refined.to_csv(out / "refined_edges.csv")
    export_embeddings(r.embeddings, g.labels, g.ids["user"], out / "embeddings.csv")
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split", "prob", "pred"])
        for i, uid in enumerate(g.ids["user"]):
            w.writerow([uid, split[i], repr(float(r.prob[i, 1])), int(r.pred[i])])
    if r.micro_structure is not None:
        recs = r.attention_records(g)
        save_attention_json(recs, out / "attention.json")
        save_attention_csv(recs, out / "attention.csv")
    return metrics


def cmd_train(cfg, out, args):
    from .trainer import train_pipeline
    g = _require_graph(cfg)
    r = train_pipeline(g, _run_config(cfg))
    write_train_artifacts(g, r, out)
    return {"test": r.metrics, "refine": r.refine_report}


def cmd_ablate(cfg, out, args):
    from .hetgraph import SyntheticConfig, generate_synthetic
    from .trainer import format_table, run_ablation_grid, run_mlp_seeds
    rc = _run_config(cfg)
    seeds = list(rc.seeds)
    if cfg.get("graph"):
        g = load_any_graph(cfg["graph"])
    else:
        # one synthetic graph per seed, all derived from the synthetic section
        syn = cfg["synthetic"]
        g = lambda s: generate_synthetic(SyntheticConfig.from_dict({**syn, "seed": int(s)}))[0]  # noqa: E731
    grid = run_ablation_grid(g, rc, seeds)
    rows = [(label, rep) for label, _, rep in grid]
    result = {"seeds": seeds, "rows": [{"variant": label, "flags": flags, **rep.to_dict()}
                                       for label, flags, rep in grid]}
    if cfg["ablate"].get("with_mlp", True):
        mlp = run_mlp_seeds(g, rc, seeds)
        rows.append(("mlp", mlp))
        result["mlp"] = mlp.to_dict()
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "ablation.json", result)
    return {"table": table}


def read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"id", "prob", "pred"} - set(rows[0] if rows else {})
    if missing:
        raise ValueError(f"{path}: predictions need columns {sorted(missing)}")
    return rows


def cmd_eval(cfg, out, args):
    import numpy as np
    from .hetgraph import split_nodes
    from .trainer import evaluate
    src = args.predictions or (os.path.join(args.from_run, "predictions.csv") if args.from_run else None)
    if not src:
        raise UsageError("eval needs --predictions or --from-run")
    g = _require_graph(cfg)
    rc = _run_config(cfg)
    rows = read_predictions(src)
    index = {uid: i for i, uid in enumerate(g.ids["user"])}
    prob = np.full(g.n_users, np.nan)
    pred = np.zeros(g.n_users, dtype=np.int64)
    for row in rows:
        if row["id"] not in index:
            raise KeyError(f"prediction for unknown user {row['id']!r}")
        prob[index[row["id"]]] = float(row["prob"])
        pred[index[row["id"]]] = int(row["pred"])
    split = split_nodes(g.n_users, rc.split_ratios, rc.seed)
    labels = np.asarray(g.labels)
    res = {}
    for name, idx in zip(("train", "valid", "test"), split.arrays()):
        if np.isnan(prob[idx]).any():
            raise ValueError(f"predictions missing for some {name} users")
        res[name] = evaluate(prob[idx], pred[idx], labels[idx]) if len(idx) else {}
    _write_json(out / "eval.json", res)
    return {"test": res["test"]}


def _from_run_config(path):
    with open(os.path.join(path, "config.json"), encoding="utf-8") as fh:
        return json.load(fh)


def cmd_explain(cfg, out, args):
    import numpy as np
    from .hetgraph import split_nodes
    from .interpret import compute_typicality, dispatch_all, load_template, render_prompt, write_prompts
    from .micro import load_attention_json
    from .refine import filter_by_scores
    if not args.from_run:
        raise UsageError("explain needs --from-run <train run dir>")
    src = Path(args.from_run)
    train_cfg = _from_run_config(src)
    if not cfg.get("graph"):
        cfg["graph"] = train_cfg.get("graph")
        _write_json(out / "config.json", cfg)
    g = _require_graph(cfg)
    if not (src / "attention.json").exists():
        raise ValueError(f"{src} has no attention.json (was micro aggregation disabled?)")
    records = load_attention_json(src / "attention.json")
    with open(src / "refined_edges.csv", newline="", encoding="utf-8") as fh:
        edges = [r for r in csv.DictReader(fh)]
    kept = [(int(r["src"]), int(r["dst"])) for r in edges if r["kept"] == "1"]
    refined = filter_by_scores(g.n_users, kept, np.ones(len(kept)), 0.0)
    preds = {r["id"]: r for r in read_predictions(src / "predictions.csv")}

    tr = train_cfg.get("run", {})
    split = split_nodes(g.n_users, tuple(tr.get("split_ratios", (0.2, 0.4, 0.4))), int(train_cfg.get("seed", 0)))
    train, _, test = split.arrays()
    known = np.full(g.n_users, -1, dtype=np.int64)
    known[train] = np.asarray(g.labels)[train]

    ex = cfg["explain"]
    index = {uid: i for i, uid in enumerate(g.ids["user"])}
    if ex.get("users"):
        users = [str(u) for u in ex["users"]]
        unknown = [u for u in users if u not in index]
        if unknown:
            raise KeyError(f"unknown users {unknown}")
    else:
        users = [g.ids["user"][i] for i in sorted(test.tolist())[: int(ex.get("max_users", 5))]]
    template = load_template(ex.get("template"))
    top_k = int(cfg["run"].get("top_k", tr.get("top_k", 10)))
    bundles = []
    for uid in users:
        p = preds[uid]
        pred = int(p["pred"])
        typ = compute_typicality(index[uid], refined, known, int(ex.get("min_peers", 3)), reference_label=pred)
        bundles.append(render_prompt(uid, records.get(uid), typ, template, top_k, pred, float(p["prob"]),
                                     names={t: dict(zip(g.ids[t], g.names[t])) for t in g.node_types}))
    manifest = write_prompts(bundles, out)
    if cfg.get("endpoint") and cfg["endpoint"].get("url"):
        results = dispatch_all(bundles, cfg["endpoint"], out / "responses")
        _write_json(out / "responses" / "results.json", [r.__dict__ for r in results])
    return {"prompts": len(manifest)}


def cmd_stats(cfg, out, args):
    import numpy as np
    from .stats import habit_contingency_report, keyword_freq_by_group, nutrient_ttest_report
    g = _require_graph(cfg)
    st = cfg["stats"]
    rep = habit_contingency_report(g, st.get("relation", "has"), bool(st.get("correction", False)))
    rep.to_json(out / "habits.json")
    rep.to_csv(out / "habits.csv")
    (out / "habits.txt").write_text(rep.format() + "\n", encoding="utf-8")
    labels = np.asarray(g.labels)
    res = {"habits_tested": len(rep.rows), "habits_skipped": len(rep.skipped)}
    if "food" in g.node_types and any(r.dst == "food" for r in g.relations):
        rel = next(r for r in g.relations if r.src == "user" and r.dst == "food")
        s, d = rel.edges()
        groups = {"positive": [], "negative": []}
        for u, f in zip(s, d):
            groups["positive" if labels[u] == 1 else "negative"].append(g.names["food"][f])
        sizes = {"positive": int(labels.sum()), "negative": int(len(labels) - labels.sum())}
        kw = keyword_freq_by_group(groups, st.get("stopwords", []), normalize=True, sizes=sizes)
        limit = int(st.get("max_terms", 20))
        _write_json(out / "keywords.json", {k: [[t, c] for t, c in v[:limit]] for k, v in kw.items()})
    if st.get("nutrients"):
        feats = g.features["user"]
        values = {name: feats[:, int(col)] for name, col in st["nutrients"].items()}
        _write_json(out / "nutrients.json", nutrient_ttest_report(values, labels))
    return res


def cmd_gradcheck(cfg, out, args):
    from .hetgraph import SyntheticConfig, generate_synthetic
    from .trainer import RunConfig, stage1_gradcheck
    gc = cfg["gradcheck"]
    n = int(gc.get("n_users", 12))
    syn = {"n_users": n, "n_foods": max(4, n), "n_habits": 6, "n_ingredients": 8, "n_categories": 3,
           "feature_dims": {"user": 3, "food": 3, "habit": 2, "ingredient": 2, "category": 2},
           "food_degree": 3, "habit_degree": 2, "ingredient_degree": 2, **cfg["synthetic"]}
    g, _ = generate_synthetic(SyntheticConfig.from_dict(syn))
    run = {"d_macro": 4, "d_micro": 4, "d_fused": 4, "heads": 2,
           "metapaths": [{"name": "UFU", "k": 1}, {"name": "UHU", "k": 1}], **cfg["run"], "dtype": "float64"}
    errs = stage1_gradcheck(g, RunConfig.from_dict(run), cfg["seed"])
    tol = float(gc.get("tolerance", 1e-4))
    worst = max(errs, key=errs.get)
    res = {"max_relative_error": errs[worst], "worst_parameter": worst, "tolerance": tol,
           "passed": errs[worst] < tol, "errors": errs}
    _write_json(out / "gradcheck.json", res)
    if not res["passed"]:
        raise FloatingPointError(f"gradient check failed: {worst} relative error {errs[worst]:.3g} >= {tol}")
    return {"max_relative_error": errs[worst], "passed": True}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# -- entry point -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="single seed for generation, split and initialisation")
    common.add_argument("--run-dir", help="output directory (default runs/<command>-seed<seed>)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. run.stage1_epochs=10 (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1: deterministic)")
    parser = argparse.ArgumentParser(prog="hgrefine", description="Heterogeneous-graph risk detection runs.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {"gen": "generate a synthetic graph", "ingest": "load node/edge CSVs via a manifest",
             "metapath": "extract meta-path subgraphs", "train": "train the full pipeline",
             "ablate": "run the ablation grid", "eval": "score a predictions file",
             "explain": "render prompts from a train run", "stats": "habit and keyword statistics",
             "gradcheck": "finite-difference check of the stage-1 model"}
    ps = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    for name in ("metapath", "train", "ablate", "eval", "explain", "stats"):
        ps[name].add_argument("--graph", help="graph.json or CSV manifest")
    ps["ingest"].add_argument("--manifest", help="CSV manifest to ingest")
    for name in ("eval", "explain"):
        ps[name].add_argument("--from-run", help="run directory of a previous train command")
    ps["eval"].add_argument("--predictions", help="predictions CSV (id, prob, pred)")
    parser.subparsers = ps
    return parser


def _error_record(cmd, exc):
    rec = {"error": type(exc).__name__, "message": str(exc), "command": cmd}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        rec["diagnostics"] = diag
    return rec


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(args.threads)
    sub = parser.subparsers[args.command]
    try:
        cfg = effective_config(args)
        if args.command in NEEDS_GRAPH and not cfg.get("graph"):
            raise UsageError(f"{args.command} needs a graph: pass --graph or set \"graph\" in the config")
    except UsageError as e:
        sub.error(str(e))
    run_dir = args.run_dir or os.path.join("runs", f"{args.command}-seed{cfg['seed']}")
    out = None
    try:
        out = prepare_run_dir(cfg, run_dir)
        summary = HANDLERS[args.command](cfg, out, args)
    except UsageError as e:
        sub.error(str(e))
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as e:
        rec = _error_record(args.command, e)
        if out is not None:
            _write_json(out / "error.json", rec)
        print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr)
        return 1
    text = summary.pop("table", None) if isinstance(summary, dict) else None
    if text:
        print(text)
    print(json.dumps({"command": args.command, "run_dir": str(out), **(summary or {})},
                     sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
