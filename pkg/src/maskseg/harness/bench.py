"""Wall-clock latency of forward + semantic postprocessing."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..config import ModelConfig
from ..model import SegmentationModel, forward_full
from ..postprocess import semantic_inference


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    iterations: int
    environment: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def report(self) -> str:
        env = ", ".join(f"{k}={v}" for k, v in self.environment.items())
        return (f"latency mean {self.mean_ms:.2f} ms  median {self.median_ms:.2f} ms  "
                f"p95 {self.p95_ms:.2f} ms  ({self.fps:.2f} FPS over {self.iterations} runs)\n"
                f"environment {env}")


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "cpus": os.cpu_count() or 1}


def benchmark_latency(config: ModelConfig, resolution: tuple, iterations: int = 10,
                      warmup: int = 2, model: SegmentationModel | None = None) -> LatencyStats:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    H, W = resolution
    model = (model or SegmentationModel(config)).eval()
    image = np.random.default_rng(config.seed).uniform(size=(3, H, W))

    def run():
        semantic_inference(forward_full(image, model), (H, W))

    for _ in range(warmup):
        run()
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1e3)
    mean = float(np.mean(times))
    return LatencyStats(mean, float(np.median(times)), float(np.percentile(times, 95)),
                        1000.0 / mean, iterations, environment())
