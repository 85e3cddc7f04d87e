"""Latency benchmarking for any zero-argument workload, plus a model runner.

Timing uses ``perf_counter`` around each call; warmup invocations run first
and never enter the statistics. FPS is defined as 1000 / median_ms, so
FPS * median_ms is 1000 by construction.
"""

from __future__ import annotations

import platform as _platform
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable

import torch

from .student import FusionStudent


@dataclass(frozen=True)
class BenchReport:
    height: int
    width: int
    runs: int
    warmup: int
    median_ms: float
    fps: float
    platform: str

    def as_dict(self) -> dict:
        return asdict(self)


def benchmark(workload: Callable[[], None], runs: int = 1000, warmup: int = 50) -> list[float]:
    """Run ``workload`` ``warmup + runs`` times; return the timed runs in ms."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        workload()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        workload()
        times.append((time.perf_counter() - t0) * 1000.0)
    return times


def platform_label() -> str:
    cpu = _platform.processor() or _platform.machine()
    return f"cpu {cpu}, python {_platform.python_version()}, torch {torch.__version__}, threads {torch.get_num_threads()}"


def bench_report(times: list[float], height: int, width: int, warmup: int) -> BenchReport:
    median_ms = statistics.median(times)
    return BenchReport(
        height=height,
        width=width,
        runs=len(times),
        warmup=warmup,
        median_ms=median_ms,
        fps=1000.0 / median_ms,
        platform=platform_label(),
    )


def bench_model(
    model: FusionStudent,
    height: int = 480,
    width: int = 640,
    runs: int = 1000,
    warmup: int = 50,
) -> BenchReport:
    """Median single-image forward latency at a fixed input size."""
    if height % 16 or width % 16:
        raise ValueError(f"bench size {height}x{width} must be divisible by 16")
    model.eval()
    gen = torch.Generator().manual_seed(0)
    ir = torch.rand((1, 1, height, width), generator=gen)
    vis = torch.rand((1, 3, height, width), generator=gen)

    def workload() -> None:
        with torch.no_grad():
            model(ir, vis)

    times = benchmark(workload, runs=runs, warmup=warmup)
    return bench_report(times, height, width, warmup)
