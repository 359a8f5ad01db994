"""Wall-clock scaling of the translator stack against a joint-attention reference."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import EVABlockWeights, LGUWeights, eva_block, naive_joint_attention

EVA_MAX_SLOPE = 1.3
NAIVE_MIN_SLOPE = 1.8
MIN_RUN_SECONDS = 0.05


@dataclass
class Timing:
    method: str
    T: int
    M: int
    L: int
    seconds: float
    inner_repeats: int
    peak_bytes: int = 0


def _random_block(rng, T, M, dtype=np.float32):
    def mat(n):
        return nx.Tensor((rng.standard_normal((n, n)) / np.sqrt(n)).astype(dtype))

    return EVABlockWeights(
        nx.Tensor(np.ones(M, dtype)), nx.Tensor(np.zeros(M, dtype)),
        LGUWeights(mat(M), mat(M), mat(M), mat(M)),
        nx.Tensor(np.ones(T, dtype)), nx.Tensor(np.zeros(T, dtype)),
        LGUWeights(mat(T), mat(T), mat(T), mat(T)),
    )


def translator_stack(e, blocks):
    for blk in blocks:
        e = eva_block(e, blk)
    return e


def time_call(fn, runs=5, min_seconds=MIN_RUN_SECONDS):
    """Median per-call time over ``runs``; inner repeats grow until a run spans ``min_seconds``."""
    fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        dt = time.perf_counter() - t0
        if dt >= min_seconds or inner >= 1 << 16:
            break
        inner *= 2
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return float(np.median(samples)), inner


def peak_memory(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench_translator(Ms, T=8, batch=1, n_blocks=1, runs=5, seed=0) -> list[Timing]:
    out = []
    for M in Ms:
        rng = np.random.default_rng([seed, M, T])
        blocks = [_random_block(rng, T, M) for _ in range(n_blocks)]
        e = nx.Tensor(rng.standard_normal((batch, T, M)).astype(np.float32))
        fn = lambda: translator_stack(e, blocks)
        sec, inner = time_call(fn, runs)
        out.append(Timing("eva", T, M, T * M, sec, inner, peak_memory(fn)))
    return out


def bench_naive(Ls, width=16, runs=5, seed=0, T=8) -> list[Timing]:
    out = []
    for L in Ls:
        rng = np.random.default_rng([seed, L])
        x = rng.standard_normal((L, width)).astype(np.float32)
        wq, wk, wv = (rng.standard_normal((width, width)).astype(np.float32) / np.sqrt(width)
                      for _ in range(3))
        fn = lambda: naive_joint_attention(x, wq, wk, wv)
        sec, inner = time_call(fn, runs)
        out.append(Timing("naive_attention", T, L // T, L, sec, inner, peak_memory(fn)))
    return out


def loglog_slope(sizes, seconds):
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def run_scaling(Ms=(256, 512, 1024, 2048), T=8, runs=5, seed=0, naive=True, T_ladder=None):
    """Time both ladders and return ``(timings, verdict)``.

    The reference attends over ``L = M * T`` tokens so both ladders cover the
    same total-token range.
    """
    eva = bench_translator(Ms, T=T, runs=runs, seed=seed)
    verdict = {"eva_slope": loglog_slope(Ms, [t.seconds for t in eva])}
    timings = list(eva)
    if T_ladder:
        tl = [bench_translator([Ms[0]], T=t, runs=runs, seed=seed)[0] for t in T_ladder]
        for t in tl:
            t.method = "eva_T"
        timings += tl
        verdict["eva_T_slope"] = loglog_slope(T_ladder, [t.seconds for t in tl])
    verdict["eva_pass"] = verdict["eva_slope"] <= EVA_MAX_SLOPE
    if naive:
        ref = bench_naive([m * T for m in Ms], runs=runs, seed=seed, T=T)
        timings += ref
        verdict["naive_slope"] = loglog_slope([t.L for t in ref], [t.seconds for t in ref])
        verdict["naive_pass"] = verdict["naive_slope"] >= NAIVE_MIN_SLOPE
    verdict["pass"] = verdict["eva_pass"] and verdict.get("naive_pass", True)
    return timings, verdict


CSV_HEADER = ["method", "T", "M", "L", "seconds", "inner_repeats", "peak_bytes"]


def timings_csv(timings) -> str:
    lines = [",".join(CSV_HEADER)]
    for t in timings:
        lines.append(f"{t.method},{t.T},{t.M},{t.L},{t.seconds!r},{t.inner_repeats},{t.peak_bytes}")
    return "\n".join(lines) + "\n"
