"""Compiled vs numpy kernels, and the cost of a full flow step as a function of n.

Run with ``python benchmarks/bench_kernels.py``. Prints per-call timings for
both backends and a least-squares fit of step time against n^2, which is what
the runtime estimates of the acceptance scenarios are based on.
"""

import argparse
import json
import timeit

import numpy as np

from lorflow import _pykernels
from lorflow.flow import FlowConfig, FlowProblem, flow_step, initial_state
from lorflow.grid import Grid, MapField
from lorflow.kernels import TARGET_SPHERE, tune_allocator
from lorflow.target import make_target, make_warp

try:
    from lorflow import _ckernels
except ImportError:  # numpy fallback only
    _ckernels = None


def bump(n):
    X, Y = Grid(n).mesh()
    th = 1.5 * np.sin(np.pi * X) * np.sin(np.pi * Y)
    return np.stack([np.sin(th) * np.cos(2 * Y), np.sin(th) * np.sin(2 * Y), np.cos(th)])


def best(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def kernel_table(n):
    h = 1.0 / (n - 1)
    u = bump(n)
    X, _ = Grid(n).mesh()
    beta = 2.0 + u[2]
    dens = np.ascontiguousarray(np.random.default_rng(0).random((n, n)))
    g = np.array([0.0, 0.0, 1.0])
    rows = {}
    for name, mod in (("python", _pykernels), ("compiled", _ckernels)):
        if mod is None:
            continue
        ax, ay = mod.face_coefficients(beta)

        def solve():
            v = X.copy()
            v[1:-1, 1:-1] = 0.0
            mod.pcg(ax, ay, v, 1e-10, 50 * n)

        rows[name] = {
            "cell_density": best(lambda: mod.cell_density(u, h), 200),
            "apply_operator": best(lambda: mod.apply_operator(ax, ay, X), 200),
            "explicit_step": best(lambda: mod.explicit_step(u, dens, g, 0.2 * h * h, h, TARGET_SPHERE, 1.0), 100),
            "pcg_cold_solve": best(solve, 3),
        }
    return rows


def step_time(n, steps=200):
    S = make_target("sphere2")
    W = make_warp("affine", 2.0, 1.0, 3, S, samples=1 << 12)
    X, _ = Grid(n).mesh()
    prob = FlowProblem(S, W, MapField(Grid(n), S.project(bump(n))), 0.2 * X)
    cfg = FlowConfig(n=n)
    s = initial_state(prob, cfg)
    for _ in range(10):
        s = flow_step(s, cfg, S, W, prob)
    t = timeit.default_timer()
    for _ in range(steps):
        s = flow_step(s, cfg, S, W, prob)
    return (timeit.default_timer() - t) / steps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[33, 65, 129, 257])
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args()
    tune_allocator()

    out = {"kernels": {}, "step": {}}
    for n in (65, 129):
        out["kernels"][n] = kernel_table(n)
        for backend, row in out["kernels"][n].items():
            cells = ", ".join(f"{k} {v * 1e6:9.1f} us" for k, v in row.items())
            print(f"n={n:4d} {backend:9s} {cells}")
    if _ckernels is not None:
        for n, rows in out["kernels"].items():
            sp = {k: rows["python"][k] / rows["compiled"][k] for k in rows["python"]}
            print(f"n={n:4d} speedup   " + ", ".join(f"{k} x{v:.1f}" for k, v in sp.items()))

    sizes = np.array(args.sizes, dtype=float)
    times = np.array([step_time(int(n)) for n in sizes])
    for n, t in zip(sizes, times):
        out["step"][int(n)] = t
        print(f"flow step n={int(n):4d}: {t * 1e6:9.1f} us")
    # t(n) ~ c0 + c1 n^2 ; steps to reach time T scale as T/(0.2 h^2), so a run costs ~ n^4
    A = np.stack([np.ones_like(sizes), sizes ** 2], axis=1)
    c, *_ = np.linalg.lstsq(A, times, rcond=None)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    out["fit"] = {"c0": c[0], "c1": c[1], "loglog_slope": slope}
    print(f"fit: step ~ {c[0] * 1e6:.1f} us + {c[1] * 1e9:.2f} ns * n^2 (log-log slope {slope:.2f})")
    for n, T in ((129, 1.0),):
        steps = T / (0.2 / (n - 1) ** 2)
        print(f"estimate: flow to t={T} at n={n} needs {steps:.0f} steps, about {steps * (c[0] + c[1] * n * n):.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
