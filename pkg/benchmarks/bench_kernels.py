"""Time the python and cython kernels on the shapes the trainer uses.

    python benchmarks/bench_kernels.py [--repeat 5] [--with-run]
"""

import argparse
import time
import timeit

import numpy as np

from kifusion import _backend
from kifusion.model import Classifier, loss_and_grad
from kifusion.numkit import Rng, ema_update, masked_add
from kifusion.tasks import LabeledBatch


def cases():
    rng = Rng(0)
    model = Classifier.build(32, (64, 64), 4, rng.split(0, "model"))
    params = model.zero_params().like(rng.split(0, "p").normal(model.n_params, scale=0.05))
    batch = LabeledBatch(rng.split(0, "x").normal((8, 32)), rng.split(0, "y").integers(4, 8).astype(np.int64))
    n = model.n_params
    u, v = rng.normal(n), rng.normal(n)
    m1, m2 = rng.uniform(n) < 0.2, rng.uniform(n) < 0.2
    return {
        f"ema (n={n})": lambda: ema_update(u, v, 0.55),
        f"masked_add (n={n})": lambda: masked_add(u, m1, v, m2, v),
        "loss_and_grad (32-64-64-4, batch 8)": lambda: loss_and_grad(model, params, batch),
        "loss_and_grad (batch 500)": lambda: loss_and_grad(model, params, LabeledBatch(
            np.repeat(batch.inputs, 63, axis=0)[:500], np.repeat(batch.labels, 63)[:500])),
    }


def bench(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.2:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def fmt(seconds):
    if seconds >= 1:
        return f"{seconds:.2f} s"
    if seconds >= 1e-3:
        return f"{1e3 * seconds:.2f} ms"
    return f"{1e6 * seconds:.1f} us"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--with-run", action="store_true", help="also time one desk-scale kif run")
    args = ap.parse_args()
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels not built; timing the python backend only")
    rows = {}
    for name in backends:
        _backend.use(name)
        for label, fn in cases().items():
            rows.setdefault(label, {})[name] = bench(fn, args.repeat)
        if args.with_run:
            from kifusion.experiment import execute, load_config, run_grid
            exp = load_config("paper-desk", [("seeds", [0])])
            spec = run_grid(exp)[0]
            t = time.perf_counter()
            execute(exp, spec)
            rows.setdefault("desk kif run (5 tasks)", {})[name] = time.perf_counter() - t
    width = max(map(len, rows))
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, times in rows.items():
        cells = "  ".join(f"{fmt(times[b]):>12}" for b in backends)
        extra = f"  {times['python'] / times['cython']:>9.2f}x" if len(backends) > 1 else ""
        print(f"{label:<{width}}  {cells}{extra}")


if __name__ == "__main__":
    main()
