"""Compare the compiled and pure-Python kernel backends.

Times the individual kernels on fixed random inputs, then full VMP sweeps on
a ratings-style dataset and on a head-to-head dataset (which exercises the
sequential coupled-parent kernel).

    python3 bench/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from schemagm import kernels
from schemagm.compiler import compile
from schemagm.data import standardize
from schemagm.engine import VMP, FitConfig
from schemagm.schema import ModelConfig
from schemagm.synthbench import UMR_K, generate, h2h_params, umr_params


def kernel_cases(rng):
    x = rng.uniform(0.01, 50.0, 200_000)
    index = rng.integers(0, 1000, 200_000)
    values = rng.random((200_000, 5))
    logits = rng.normal(size=(200_000, 5))
    return {
        "digamma 200k": lambda: kernels.digamma(x),
        "scatter_add_rows 200k x 5": lambda: kernels.scatter_add_rows(np.zeros((1000, 5)), index, values),
        "softmax_rows 200k x 5": lambda: kernels.softmax_rows(logits.copy()),
    }


def sweep_case(dataset, k):
    ds = standardize(dataset)
    vmp = VMP(compile(ds.schema, ModelConfig(components=k)), ds, FitConfig())
    state = vmp.init_state()
    vmp.update_parameters(state)
    return lambda: vmp.sweep(state)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; timing the python backend only")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    umr = generate(umr_params(0, {"users": 943, "movies": 1682, "ratings": 40_000}))[0]
    h2h = generate(h2h_params(0, players=90, matches=3000))[0]

    results = {}
    for name in backends:
        kernels.set_backend(name)
        timings = dict(cases)
        timings["sweep, ratings 40k"] = sweep_case(umr, UMR_K)
        timings["sweep, head-to-head 3k matches"] = sweep_case(h2h, {"players": 3, "matches": 2})
        for label, fn in timings.items():
            fn()  # warm up
            results[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    labels = list(dict.fromkeys(label for label, _ in results))
    width = max(map(len, labels))
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label in labels:
        row = [results[label, b] for b in backends]
        line = f"{label:<{width}}  " + "  ".join(f"{t * 1e3:8.2f}ms" for t in row)
        if len(backends) > 1:
            line += f"  {results[label, 'python'] / results[label, 'compiled']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
