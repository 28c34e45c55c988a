# tools/bench.py
# MIT License - See LICENSE for details
import csv
import math
import statistics
import timeit
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from core.autograd import Tensor
from core.dct2d import build_plan
from core.hco import frequency_grid, uniform_coefficients, hco_forward
from core.settings import silent_log
from tools.attention import attention_baseline, random_projections

OPS = ("hco", "attention", "dct")
CSV_HEADER = ("op", "resolution", "tokens", "channels", "repeats", "median_s", "peak_bytes", "slope")
MIN_REPEATS = 5
MIN_WARMUP = 2
SLOPE_MIN_RESOLUTION = 32
UNRELIABLE_SPREAD = 0.30
# 注意力分数块的元素上限，超出时按查询分块
ATTENTION_BLOCK = 1 << 24


@dataclass
class BenchRecord:
    op: str
    resolution: int
    tokens: int
    channels: int
    repeats: int
    median_s: float
    peak_bytes: int
    spread: float = 0.0

    @property
    def unreliable(self) -> bool:
        return self.spread > UNRELIABLE_SPREAD


@dataclass
class BenchResult:
    op: str
    records: list = field(default_factory=list)
    slope: float = float("nan")
    threads: int = 1


def _make_op(op: str, resolution: int, channels: int, batch: int, seed: int):
    """返回只做前向 (不录制磁带) 的无参闭包"""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, channels, resolution, resolution)).astype(np.float32)
    if op == "hco":
        plan = build_plan(resolution, resolution, "f32")
        coeff = uniform_coefficients(1.0, frequency_grid(resolution, resolution, "f32"), channels, 1.0, "f32")
        u0 = Tensor(x)
        return lambda: hco_forward(plan, coeff, u0)
    if op == "dct":
        plan = build_plan(resolution, resolution, "f32")
        return lambda: plan.forward(x)
    if op == "attention":
        proj = random_projections(channels, seed)
        n = resolution * resolution
        chunk = None if n * n <= ATTENTION_BLOCK else max(1, ATTENTION_BLOCK // n)
        return lambda: attention_baseline(x, proj, chunk=chunk)
    raise ValueError(f"bench: 未知算子 {op}，可选 {OPS}")


def measure(fn, repeats: int, warmup: int):
    """返回 (中位数秒, 峰值字节, 相对离散度)"""
    timer = timeit.Timer(fn)
    timer.repeat(repeat=warmup, number=1)
    times = timer.repeat(repeat=repeats, number=1)
    median = statistics.median(times)
    spread = (max(times) - min(times)) / median if median > 0 else 0.0

    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return median, int(peak), spread


def fit_slope(records, min_resolution: int = SLOPE_MIN_RESOLUTION) -> float:
    """log(time) 对 log(N) 的最小二乘斜率；低于 min_resolution 的点不参与"""
    pts = [(r.tokens, r.median_s) for r in records if r.resolution >= min_resolution and r.median_s > 0]
    if len(pts) < 2:
        return float("nan")
    n, t = np.log(np.array(pts, dtype=np.float64)).T
    slope, _ = np.polyfit(n, t, 1)
    return float(slope)


def bench(op: str, resolutions, channels: int = 64, repeats: int = 9, warmup: int = MIN_WARMUP,
          batch: int = 1, seed: int = 0, threads: int = 1, log_callback=None) -> BenchResult:
    log = log_callback or silent_log
    if op not in OPS:
        raise ValueError(f"bench: 未知算子 {op}，可选 {OPS}")
    resolutions = [int(r) for r in resolutions]
    if not resolutions or any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError(f"bench: 分辨率必须严格递增，当前 {resolutions}")
    if repeats < MIN_REPEATS or warmup < MIN_WARMUP:
        raise ValueError(f"bench: repeats >= {MIN_REPEATS} 且 warmup >= {MIN_WARMUP}，当前 {repeats}/{warmup}")

    result = BenchResult(op, threads=threads)
    log(f"[基准] {op}: 分辨率 {resolutions}, C={channels}, B={batch}, repeats={repeats}, 线程 {threads}")
    for r in resolutions:
        fn = _make_op(op, r, channels, batch, seed)
        median, peak, spread = measure(fn, repeats, warmup)
        rec = BenchRecord(op, r, r * r, channels, repeats, median, peak, spread)
        result.records.append(rec)
        flag = " [不可靠: 离散度 {:.0%}]".format(spread) if rec.unreliable else ""
        log(f"[基准] {op} {r}x{r} N={r * r}: 中位数 {median * 1e3:.3f} ms, 峰值 {peak / 1e6:.1f} MB{flag}")
        if rec.unreliable:
            log(f"[警告] {op} {r}x{r} 计时离散度超过 {UNRELIABLE_SPREAD:.0%}，结果不可靠")
    result.slope = fit_slope(result.records)
    if math.isnan(result.slope):
        log(f"[警告] {op}: 分辨率 >= {SLOPE_MIN_RESOLUTION} 的点不足两个，无法拟合斜率")
    else:
        log(f"[基准] {op}: log-log 斜率 {result.slope:.3f}")
    return result


def write_bench_csv(results, path):
    if isinstance(results, BenchResult):
        results = [results]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for res in results:
            for r in res.records:
                writer.writerow([r.op, r.resolution, r.tokens, r.channels, r.repeats,
                                 f"{r.median_s:.9f}", r.peak_bytes, f"{res.slope:.6f}"])
