"""Single-sample inference latency benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .net import model as M
from .net.model import NetworkConfig, NetworkParams


@dataclass
class BenchReport:
    iterations: int
    warmup: int
    mean_ms: float
    p50_ms: float
    p99_ms: float
    throughput_fps: float
    parameter_count: int
    analytic_parameter_count: int

    def lines(self) -> list[str]:
        return [
            f"iterations={self.iterations}",
            f"warmup={self.warmup}",
            f"mean_ms={self.mean_ms!r}",
            f"p50_ms={self.p50_ms!r}",
            f"p99_ms={self.p99_ms!r}",
            f"throughput_fps={self.throughput_fps!r}",
            f"parameter_count={self.parameter_count}",
            f"analytic_parameter_count={self.analytic_parameter_count}",
        ]


def summarize(times_ms, warmup: int, params_count: int, analytic: int) -> BenchReport:
    t = np.asarray(times_ms, dtype=np.float64)
    mean = float(t.mean())
    # inverted_cdf picks an observed sample, so p50 <= p99 holds exactly
    p50, p99 = (float(x) for x in np.percentile(t, [50, 99], method="inverted_cdf"))
    return BenchReport(len(t), warmup, mean, p50, p99, 1000.0 / mean, params_count, analytic)


def run_bench(
    params: NetworkParams,
    cfg: NetworkConfig,
    iters: int = 200,
    warmup: int = 20,
    seed: int = 0,
    threads: int = 1,
) -> BenchReport:
    """Time ``iters`` unbatched forward passes on one fixed random input."""
    if iters < 1 or warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    dt = M.params_dtype(params)
    image = rng.random((1, cfg.image_px, cfg.image_px)).astype(dt)
    heat = rng.random((1, cfg.heat_px, cfg.heat_px)).astype(dt)
    coords = rng.random((1, 3 * cfg.n_stars)).astype(dt)
    times = []
    with threadpool_limits(limits=threads):
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            M.forward(params, cfg, image, heat, coords)
            elapsed = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                times.append(elapsed)
    return summarize(times, warmup, params.count(), M.analytic_param_count(cfg))
