"""Time the compiled kernels against their numpy fallbacks on graph-sized inputs.

    python3 benchmarks/bench_kernels.py [--edges 200000] [--nodes 5000] [--dim 64] [--repeat 5]

Each kernel runs on identical inputs under both backends; the outputs are
checked for agreement before timings are reported.
"""
import argparse
import time

import numpy as np

from hgrefine import kernels


def make_inputs(n_nodes, n_edges, dim, seed=0):
    rng = np.random.default_rng(seed)
    dst = np.sort(rng.integers(0, n_nodes, n_edges))
    src = rng.integers(0, n_nodes, n_edges)
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n_nodes), out=indptr[1:])
    x = rng.standard_normal((n_nodes, dim))
    logits = rng.standard_normal(n_edges)
    grad_e = rng.standard_normal(n_edges)
    grad_x = rng.standard_normal((n_nodes, dim))
    # bipartite user-item CSR pair for path counting
    n_items = max(1, n_nodes // 2)
    deg = rng.poisson(8, n_nodes)
    ind1 = np.concatenate([np.sort(rng.choice(n_items, min(d, n_items), replace=False)) for d in deg])
    ptr1 = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.minimum(deg, n_items), out=ptr1[1:])
    order = np.argsort(ind1, kind="stable")
    users = np.repeat(np.arange(n_nodes), np.diff(ptr1))
    ptr2 = np.zeros(n_items + 1, dtype=np.int64)
    np.cumsum(np.bincount(ind1, minlength=n_items), out=ptr2[1:])
    ind2 = users[order]
    return dict(dst=dst, src=src, indptr=indptr, x=x, logits=logits, grad_e=grad_e, grad_x=grad_x,
                ptr1=ptr1, ind1=ind1, ptr2=ptr2, ind2=ind2, n=n_nodes)


def cases(d):
    w = kernels.segment_softmax(d["logits"], d["indptr"])
    return {
        "segment_softmax": lambda: kernels.segment_softmax(d["logits"], d["indptr"]),
        "segment_softmax_backward": lambda: kernels.segment_softmax_backward(w, d["grad_e"], d["indptr"]),
        "segment_spmm": lambda: kernels.segment_spmm(w, d["x"], d["src"], d["indptr"]),
        "segment_spmm_backward": lambda: kernels.segment_spmm_backward(d["grad_x"], w, d["x"], d["src"], d["indptr"]),
        "edge_dot": lambda: kernels.edge_dot(d["x"], d["x"], d["dst"], d["src"]),
        "edge_dot_backward": lambda: kernels.edge_dot_backward(d["grad_e"], d["x"], d["x"], d["dst"], d["src"]),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(d["x"][d["src"] % d["n"]], d["dst"], d["n"]),
        "count_paths": lambda: kernels.count_paths(d["ptr1"], d["ind1"], d["ptr2"], d["ind2"], d["n"]),
    }


def best_time(fn, repeat):
    out = fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    if a is None or b is None:
        return a is b
    if hasattr(a, "toarray"):
        a, b = a.toarray(), b.toarray()
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=5000)
    ap.add_argument("--edges", type=int, default=200000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    d = make_inputs(args.nodes, args.edges, args.dim)
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled extension not built; only the python backend is available")
        return 1
    results = {}
    for backend in ("cython", "python"):
        kernels.use_backend(backend)
        for name, fn in cases(d).items():
            results.setdefault(name, {})[backend] = best_time(fn, args.repeat)
    kernels.use_backend("cython")
    print(f"nodes={args.nodes} edges={args.edges} dim={args.dim} (best of {args.repeat})")
    print(f"{'kernel':<26} {'cython ms':>10} {'python ms':>10} {'speedup':>8}  agree")
    for name, r in results.items():
        (tc, oc), (tp, op) = r["cython"], r["python"]
        print(f"{name:<26} {tc * 1e3:>10.2f} {tp * 1e3:>10.2f} {tp / tc:>8.2f}  {_close(oc, op)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
