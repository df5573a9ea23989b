"""Benchmark the compiled kernels against the pure-NumPy fallback.

Times the three hot kernels (CSR propagation, int8 scoring, fp32 scoring) on
representative shapes through both backends, then runs the packed-vs-fp32
inference benchmark through each backend for context.

Usage: python benchmarks/compare_backends.py [--quick]
"""

import argparse
import time

import numpy as np

from bitgcf import synthetic
from bitgcf.bench import bench_inference
from bitgcf.kernels import HAVE_COMPILED, get_backend
from bitgcf.store import QuantizedTable


def median_time(fn, repetitions=5, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def random_table(rng, num_users, num_items, dim, layers_plus_one):
    n = num_users + num_items
    packed = np.empty((n, layers_plus_one, (dim + 7) // 8), dtype=np.uint8)
    for layer in range(layers_plus_one):
        bits = rng.integers(0, 2, size=(n, dim), dtype=np.uint8)
        packed[:, layer] = np.packbits(bits, axis=1, bitorder="little")
    return QuantizedTable(num_users=num_users, num_items=num_items, dim=dim,
                          packed_codes=packed)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller shapes")
    args = parser.parse_args()
    if not HAVE_COMPILED:
        raise SystemExit("compiled extension not built; nothing to compare")

    rng = np.random.default_rng(0)
    scale = 4 if args.quick else 1
    num_users, num_items = 2000 // scale, 12000 // scale
    dim = 128
    graph = synthetic.generate(num_users, num_items, 40 * num_users, seed=3)
    indptr, indices, weights = graph.propagation_operator
    x = np.ascontiguousarray(rng.standard_normal((graph.num_nodes, dim)))
    out = np.empty_like(x)

    itable = rng.integers(-3, 4, size=(num_items, dim)).astype(np.int8)
    iquery = rng.integers(-3, 4, size=dim).astype(np.int8)
    iout = np.empty(num_items, dtype=np.int32)
    ftable = rng.standard_normal((num_items, dim)).astype(np.float32)
    fquery = rng.standard_normal(dim).astype(np.float32)
    fout = np.empty(num_items, dtype=np.float32)

    kernels = {
        f"propagate_csr  ({graph.num_nodes} nodes x {dim})":
            lambda mod: mod.propagate_csr(indptr, indices, weights, x, out),
        f"score_int8     ({num_items} items x {dim})":
            lambda mod: mod.score_int8(itable, iquery, iout),
        f"score_f32      ({num_items} items x {dim})":
            lambda mod: mod.score_f32(ftable, fquery, fout),
    }

    print(f"{'kernel':42s} {'compiled':>10s} {'fallback':>10s} {'ratio':>7s}")
    for name, call in kernels.items():
        times = {}
        for backend in ("compiled", "fallback"):
            mod = get_backend(backend)
            times[backend] = median_time(lambda: call(mod))
        ratio = times["fallback"] / times["compiled"]
        print(f"{name:42s} {times['compiled']*1e3:9.3f}ms {times['fallback']*1e3:9.3f}ms "
              f"{ratio:6.2f}x")

    print("\npacked-table vs fp32 inference (see also `bitgcf bench`):")
    table = random_table(rng, 64, num_items, dim, 3)
    float_table = rng.standard_normal((table.num_nodes, dim)).astype(np.float32)
    workload = np.arange(32)
    for backend in ("compiled", "fallback"):
        report = bench_inference(table, float_table, workload, k=20,
                                 repetitions=3, backend=backend)
        print(f"  {backend:9s} {report}")


if __name__ == "__main__":
    main()
