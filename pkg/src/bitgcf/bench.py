"""Inference benchmark: packed-table scoring vs an fp32 reference path.

Both paths run the same workload single-threaded through kernels of the same
backend: score every item for each user, then rank. Aggregated tables are
prepared once at load time; the timed region covers score estimation plus
sorting, matching how an online ranker would serve queries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from bitgcf.evaluate import topk
from bitgcf.kernels import score_f32, score_int8
from bitgcf.store import QuantizedTable


@dataclass
class BenchReport:
    int_path_seconds: float
    float_path_seconds: float
    speedup: float
    mode: str
    num_items: int
    dim: int
    num_layers_plus_one: int
    k: int
    workload_size: int
    repetitions: int

    def to_csv(self, path) -> None:
        fields = ("int_path_seconds", "float_path_seconds", "speedup", "mode",
                  "num_items", "dim", "num_layers_plus_one", "k",
                  "workload_size", "repetitions")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(fields) + "\n")
            fh.write(",".join(str(getattr(self, f)) for f in fields) + "\n")

    def __str__(self):
        pct = (self.speedup - 1.0) * 100.0
        return (f"quantized path {self.int_path_seconds:.4f}s, fp32 path "
                f"{self.float_path_seconds:.4f}s, speedup {self.speedup:.2f}x "
                f"({pct:+.1f}%)")


def bench_inference(table: QuantizedTable, float_table: np.ndarray, workload,
                    k: int = 20, repetitions: int = 3, warmup: int = 1,
                    backend: str | None = None) -> BenchReport:
    """Median wall time over repetitions of scoring + ranking the workload users.

    ``float_table`` is the (num_nodes, dim) fp32 representation the reference
    full-precision path would serve from. Speedup is fp32 time over
    packed-table time. ``backend`` pins both paths to one kernel backend
    ('compiled' or 'fallback'); the default uses the kernels selected at
    import. The integer advantage is only meaningful when both paths run
    comparable kernels: the compiled backend matches the convention of timing
    plain arithmetic without BLAS acceleration.
    """
    workload = np.asarray(workload, dtype=np.int64)
    if len(workload) == 0:
        raise ValueError("benchmark workload is empty")
    if float_table.shape != (table.num_nodes, table.dim):
        raise ValueError("float_table shape does not match the packed table")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if backend is None:
        kernel_int8, kernel_f32 = score_int8, score_f32
    else:
        from bitgcf.kernels import get_backend
        mod = get_backend(backend)
        kernel_int8, kernel_f32 = mod.score_int8, mod.score_f32
    float_table = np.ascontiguousarray(float_table, dtype=np.float32)

    agg = table.aggregated
    q_items = np.ascontiguousarray(agg[table.num_users:])
    f_items = np.ascontiguousarray(float_table[table.num_users:])
    integer = table.mode == "end"
    q_out = np.empty(table.num_items, dtype=np.int32 if integer else np.float32)
    f_out = np.empty(table.num_items, dtype=np.float32)

    def run_quantized():
        for user in workload:
            if integer:
                kernel_int8(q_items, agg[user], q_out)
            else:
                kernel_f32(q_items, agg[user], q_out)
            topk(q_out, k)

    def run_float():
        for user in workload:
            kernel_f32(f_items, float_table[user], f_out)
            topk(f_out, k)

    def timed(fn):
        times = []
        for _ in range(warmup):
            fn()
        for _ in range(repetitions):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return float(np.median(times))

    t_int = timed(run_quantized)
    t_float = timed(run_float)
    return BenchReport(
        int_path_seconds=t_int,
        float_path_seconds=t_float,
        speedup=t_float / t_int,
        mode=table.mode,
        num_items=table.num_items,
        dim=table.dim,
        num_layers_plus_one=table.num_layers_plus_one,
        k=k,
        workload_size=len(workload),
        repetitions=repetitions,
    )
