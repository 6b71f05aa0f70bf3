from __future__ import annotations

from dataclasses import dataclass
import logging
import time
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .functional import conv2d
from .igum import IgumConfig, gum_forward, igum_forward
from .instance import diffuse
from .net import EncoderConfig, Encoder, LightweightNonBt1D, LightweightNonBt1DConfig
from .pipeline import predict
from .sampler import BILINEAR, NEAREST, GuidanceOffsetTable, guided_sample, identity_grid
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MIN_REPS = 10
WARMUP_REPS = 10
BENCH_FACTOR = 8
BENCH_T = 30
DENSE_FEATURES = 128
BENCH_HEADER = ["scenario", "shape", "reps", "median_ms", "fps"]

Thunk = Callable[[], object]


@dataclass(frozen=True)
class BenchReport:
    scenario: str
    shape: tuple[int, int, int]
    reps: int
    median_ms: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.median_ms if self.median_ms > 0 else float("inf")

    def csv_row(self) -> list[str]:
        channels, height, width = self.shape
        return [self.scenario, f"{channels}x{height}x{width}", str(self.reps), f"{self.median_ms:.4f}", f"{self.fps:.2f}"]


def _offsets(rng: np.random.Generator, height: int, width: int, spread: float = 0.05) -> GuidanceOffsetTable:
    return GuidanceOffsetTable(Tensor(rng.uniform(-spread, spread, (1, 2, height, width))))


def _lowres(shape: tuple[int, int, int]) -> tuple[int, int]:
    _, height, width = shape
    if height % BENCH_FACTOR or width % BENCH_FACTOR:
        raise ConfigurationError(f"bench size {height}x{width} must be divisible by {BENCH_FACTOR}")
    return height // BENCH_FACTOR, width // BENCH_FACTOR


def _conv(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels, height, width = shape
    x = Tensor(rng.normal(size=(1, channels, height, width)))
    w = Tensor(rng.normal(size=(channels, channels, 3, 3)))
    return lambda: conv2d(x, w, padding=1)


def _block(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels, height, width = shape
    block = LightweightNonBt1D(LightweightNonBt1DConfig(channels, dilation=2), rng)
    x = Tensor(rng.normal(size=(1, channels, height, width)))
    return lambda: block(x, training=False)


def _sampler(mode: str) -> Callable[[tuple[int, int, int], np.random.Generator], Thunk]:
    def build(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
        channels, height, width = shape
        source = Tensor(rng.normal(size=(1, channels, height, width)))
        grid = identity_grid(height, width)
        offsets = _offsets(rng, height, width)
        return lambda: guided_sample(source, grid, offsets, mode)

    return build


def _igum_decoder(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels = shape[0]
    height, width = _lowres(shape)
    logits = Tensor(rng.normal(size=(1, channels, height, width)))
    raw = Tensor(rng.normal(0.0, 0.1, (1, 2, height, width)))
    cfg = IgumConfig(BENCH_FACTOR, NEAREST)
    return lambda: igum_forward(logits, raw, cfg)


def _gum_decoder(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels, full_h, full_w = shape
    height, width = _lowres(shape)
    logits = Tensor(rng.normal(size=(1, channels, height, width)))
    raw = Tensor(rng.normal(0.0, 0.1, (1, 2, full_h, full_w)))
    cfg = IgumConfig(BENCH_FACTOR, NEAREST)
    return lambda: gum_forward(logits, raw, cfg)


def dense_decoder(features: np.ndarray, weight: np.ndarray, depthwise: np.ndarray) -> np.ndarray:
    """Reference learned decoder: a stride-2 then a depthwise stride-4 transposed convolution.

    Kernels equal their strides, so each input pixel writes its own output tile.
    """
    batch, _, height, width = features.shape
    classes, k1 = weight.shape[1], weight.shape[2]
    k2 = depthwise.shape[1]
    mid = np.einsum("bcij,copq->boipjq", features, weight, optimize=True)
    mid = mid.reshape(batch, classes, height * k1, width * k1)
    out = np.einsum("bcij,cpq->bcipjq", mid, depthwise, optimize=True)
    return out.reshape(batch, classes, height * k1 * k2, width * k1 * k2)


def _dense_decoder(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels = shape[0]
    height, width = _lowres(shape)
    features = rng.normal(size=(1, DENSE_FEATURES, height, width))
    weight = rng.normal(size=(DENSE_FEATURES, channels, 2, 2))
    depthwise = rng.normal(size=(channels, 4, 4))
    return lambda: dense_decoder(features, weight, depthwise)


def _diffusion_step(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    height, width = _lowres(shape)
    offsets = _offsets(rng, height, width)
    return lambda: diffuse(offsets, 1, NEAREST)


def _pipeline(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels, height, width = shape
    encoder = Encoder(EncoderConfig(num_classes=channels), seed=int(rng.integers(2**31)))
    images = rng.uniform(0.0, 1.0, (1, 3, height, width))
    return lambda: predict(encoder, images, BENCH_T, training=False)


def _training_step(shape: tuple[int, int, int], rng: np.random.Generator) -> Thunk:
    channels, height, width = shape
    source = Tensor(rng.normal(size=(1, channels, height, width)), requires_grad=True)
    grid = identity_grid(height, width)
    offsets = _offsets(rng, height, width)

    def run() -> None:
        with Tape() as tape:
            tape.backward(guided_sample(source, grid, offsets, BILINEAR).sum())

    return run


SCENARIOS: dict[str, Callable[[tuple[int, int, int], np.random.Generator], Thunk]] = {
    "conv": _conv,
    "block": _block,
    "sampler_nearest": _sampler(NEAREST),
    "sampler_bilinear": _sampler(BILINEAR),
    "sampler_backward": _training_step,
    "igum_decoder": _igum_decoder,
    "gum_decoder": _gum_decoder,
    "dense_decoder": _dense_decoder,
    "diffusion_step": _diffusion_step,
    "pipeline": _pipeline,
}


def bench(
    scenario: str,
    shape: tuple[int, int, int],
    reps: int,
    warmup: int = WARMUP_REPS,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of ``reps`` single-image runs after ``warmup`` untimed ones."""
    if reps < MIN_REPS:
        raise ConfigurationError(f"reps must be >= {MIN_REPS}, got {reps}")
    builder = SCENARIOS.get(scenario)
    if builder is None:
        raise ConfigurationError(f"unknown scenario {scenario!r}, expected one of {sorted(SCENARIOS)}")
    if min(shape) < 1:
        raise ConfigurationError(f"bench shape must be positive, got {shape}")

    run = builder(shape, np.random.default_rng(seed))
    for _ in range(warmup):
        run()
    timings = np.empty(reps)
    for i in range(reps):
        start = time.perf_counter()
        run()
        timings[i] = (time.perf_counter() - start) * 1000.0
    report = BenchReport(scenario, shape, reps, float(np.median(timings)))
    logger.info("%s %s: median %.3f ms (%.1f fps)", scenario, shape, report.median_ms, report.fps)
    return report
