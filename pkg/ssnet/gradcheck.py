"""Finite-difference checks of every differentiable operation.

Inputs are drawn away from kinks: PReLU inputs stay clear of zero, pooling
windows have no ties and bilinear sample points stay inside cells.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .functional import batchnorm2d, conv2d, maxpool2x2, prelu, softmax_cross_entropy, tanh
from .igum import upsample_offsets
from .instance import L1, L2, SMOOTH_L1, CentroidTargets, CoordinateMap, diffuse, instance_loss
from .net import Encoder, EncoderConfig, LightweightNonBt1D, LightweightNonBt1DConfig
from .pipeline import predict, training_targets
from .sampler import (
    BILINEAR,
    GuidanceOffsetTable,
    bound_offsets,
    guided_sample_bilinear,
    identity_grid,
    normalize,
)
from .tensor import Tensor, grad_check, mul

logger = logging.getLogger(__name__)

EPSILON = 1e-5
TOLERANCE = 1e-4
CHECK_HEADER = ["op", "max_rel_error", "passed"]
NETWORK_OFFSET_BIAS = 0.12


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def csv_row(self) -> list[str]:
        return [self.op, f"{self.max_rel_error:.3e}", "true" if self.passed else "false"]


def _weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    return mul(y, Tensor(weights)).sum()


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, shape)


def interior_offsets(rng: np.random.Generator, height: int, width: int, batch: int = 1) -> np.ndarray:
    """Offsets from the identity grid to points at least 0.2 px inside a cell."""
    rows = rng.integers(0, height - 1, (batch, height, width)) + rng.uniform(0.2, 0.8, (batch, height, width))
    cols = rng.integers(0, width - 1, (batch, height, width)) + rng.uniform(0.2, 0.8, (batch, height, width))
    grid = identity_grid(height, width).coords.data
    offsets = np.empty((batch, 2, height, width))
    offsets[:, 0] = normalize(cols, width) - grid[:, 0]
    offsets[:, 1] = normalize(rows, height) - grid[:, 1]
    return offsets


def check_conv2d(rng: np.random.Generator) -> float:
    x = Tensor(rng.normal(size=(2, 3, 6, 5)))
    w = Tensor(rng.normal(size=(4, 3, 3, 1)))
    b = Tensor(rng.normal(size=4))
    weights = rng.normal(size=(2, 4, 3, 3))

    def program(_: Tensor) -> Tensor:
        return _weighted_sum(conv2d(x, w, b, stride=2, dilation=(2, 1), padding=(2, 0)), weights)

    return max(grad_check(program, x, EPSILON), grad_check(program, w, EPSILON), grad_check(program, b, EPSILON))


def check_prelu(rng: np.random.Generator) -> float:
    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    slope = Tensor(rng.uniform(0.1, 0.4, 3))
    weights = rng.normal(size=x.shape)

    def program(_: Tensor) -> Tensor:
        return _weighted_sum(prelu(x, slope), weights)

    return max(grad_check(program, x, EPSILON), grad_check(program, slope, EPSILON))


def check_tanh(rng: np.random.Generator) -> float:
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    return grad_check(lambda v: tanh(v).sum(), x, EPSILON)


def check_maxpool(rng: np.random.Generator) -> float:
    # distinct values spaced far beyond epsilon
    values = rng.permutation(2 * 3 * 4 * 6) * 0.01
    x = Tensor(values.reshape(2, 3, 4, 6))
    weights = rng.normal(size=(2, 3, 2, 3))
    return grad_check(lambda v: _weighted_sum(maxpool2x2(v), weights), x, EPSILON)


def check_batchnorm(rng: np.random.Generator) -> float:
    x = Tensor(rng.normal(1.0, 2.0, (3, 2, 4, 4)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 2))
    beta = Tensor(rng.normal(size=2))
    weights = rng.normal(size=x.shape)

    def program(_: Tensor) -> Tensor:
        out = batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
        return _weighted_sum(out, weights)

    return max(grad_check(program, x, EPSILON), grad_check(program, gamma, EPSILON), grad_check(program, beta, EPSILON))


def check_guided_sample_bilinear(rng: np.random.Generator) -> float:
    source = Tensor(rng.normal(size=(1, 3, 5, 6)))
    offsets = Tensor(interior_offsets(rng, 5, 6))
    grid = identity_grid(5, 6)
    weights = rng.normal(size=source.shape)

    def program(_: Tensor) -> Tensor:
        return _weighted_sum(guided_sample_bilinear(source, grid, GuidanceOffsetTable(offsets)), weights)

    return max(grad_check(program, source, EPSILON), grad_check(program, offsets, EPSILON))


def check_upsample_offsets(rng: np.random.Generator) -> float:
    lowres = Tensor(rng.uniform(-0.5, 0.5, (1, 2, 3, 4)))
    weights = rng.normal(size=(1, 2, 12, 16))
    return grad_check(lambda v: _weighted_sum(upsample_offsets(GuidanceOffsetTable(v), 4).values, weights), lowres, EPSILON)


def check_bound_offsets(rng: np.random.Generator) -> float:
    raw = Tensor(rng.normal(size=(1, 2, 3, 3)))
    weights = rng.normal(size=raw.shape)
    return grad_check(lambda v: _weighted_sum(bound_offsets(v).values, weights), raw, EPSILON)


def check_diffuse(rng: np.random.Generator) -> float:
    offsets = Tensor(interior_offsets(rng, 5, 5))
    weights = rng.normal(size=(1, 2, 5, 5))
    return grad_check(lambda v: _weighted_sum(diffuse(GuidanceOffsetTable(v), 2, BILINEAR).values, weights), offsets, EPSILON)


def _loss_check(kind: str) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        pred = Tensor(rng.uniform(-1.0, 1.0, (2, 2, 4, 4)))
        mask = (rng.random((2, 1, 4, 4)) < 0.6).astype(np.float64)
        targets = CentroidTargets(rng.uniform(-1.0, 1.0, (2, 2, 4, 4)) * mask, mask)
        return grad_check(lambda v: instance_loss(CoordinateMap(v), targets, kind), pred, EPSILON)

    return check


def check_lightweight_nonbt1d(rng: np.random.Generator) -> float:
    cfg = LightweightNonBt1DConfig(channels=3, dilation=2, dropout_p=0.3)
    block = LightweightNonBt1D(cfg, rng, seed=7)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    weights = rng.normal(size=x.shape)

    def program(_: Tensor) -> Tensor:
        return _weighted_sum(block(x, training=True), weights)

    worst = grad_check(program, x, EPSILON, components=range(0, x.size, 7))
    for _, param in block.named_parameters():
        worst = max(worst, grad_check(program, param, EPSILON, components=range(0, param.size, 3)))
    return worst


def check_network(rng: np.random.Generator) -> float:
    cfg = EncoderConfig(num_classes=3, widths=(4, 8), module_counts=(0, 1), dilations=(2,), early_dropout=0.1)
    encoder = Encoder(cfg, seed=int(rng.integers(2**31)))
    encoder.set_step(3)
    # shift every sample point about 0.06 px off the 2x2 grid's clamp borders
    for head in (encoder.semantic_offsets_head, encoder.instance_offsets_head):
        head.bias.data[:] = NETWORK_OFFSET_BIAS
    images = rng.uniform(0.0, 1.0, (2, 3, 8, 8))
    semantic = rng.integers(0, 3, (2, 8, 8))
    instances = np.zeros((2, 8, 8), dtype=np.int64)
    instances[:, 1:4, 1:5] = 1
    instances[:, 5:8, 4:8] = 2

    def program(_: Tensor) -> Tensor:
        prediction = predict(encoder, images, 2, training=True)
        loss = softmax_cross_entropy(prediction.logits, semantic)
        return loss + instance_loss(prediction.coords, training_targets(instances, prediction), L2)

    worst = 0.0
    for name, param in encoder.named_parameters():
        components = rng.choice(param.size, size=min(param.size, 4), replace=False)
        error = grad_check(program, param, EPSILON, components=components)
        logger.debug("network %s: %.3e", name, error)
        worst = max(worst, error)
    return worst


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": check_conv2d,
    "prelu": check_prelu,
    "tanh": check_tanh,
    "maxpool2x2": check_maxpool,
    "batchnorm2d": check_batchnorm,
    "guided_sample_bilinear": check_guided_sample_bilinear,
    "upsample_offsets": check_upsample_offsets,
    "bound_offsets": check_bound_offsets,
    "diffuse": check_diffuse,
    "instance_loss_l2": _loss_check(L2),
    "instance_loss_l1": _loss_check(L1),
    "instance_loss_smooth_l1": _loss_check(SMOOTH_L1),
    "lightweight_nonbt1d": check_lightweight_nonbt1d,
    "network": check_network,
}


def run_gradchecks(op: str | None = None, seed: int = 0) -> list[GradCheckResult]:
    if op is not None and op not in CHECKS:
        raise ConfigurationError(f"unknown op {op!r}, expected one of {sorted(CHECKS)}")
    names = [op] if op is not None else list(CHECKS)
    results = []
    for name in names:
        error = CHECKS[name](np.random.default_rng(np.random.SeedSequence([seed, list(CHECKS).index(name)])))
        result = GradCheckResult(name, error)
        logger.info("%s: max relative error %.3e (%s)", name, error, "ok" if result.passed else "FAILED")
        results.append(result)
    return results
