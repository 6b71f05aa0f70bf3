from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError, StructuralError
from .functional import (
    batchnorm2d,
    channel_affine,
    concat_channels,
    conv2d,
    dropout,
    maxpool2x2,
    prelu,
    relu,
)
from .tensor import Tensor, residual_add

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25
OFFSET_HEAD_STD = 1e-3
IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class LightweightNonBt1DConfig:
    channels: int
    dilation: int = 1
    dropout_p: float = 0.0
    use_prelu: bool = True
    use_bias: bool = False
    tail_1x1: bool = True
    conv_1x1: bool = True

    def __post_init__(self) -> None:
        if self.channels < 1 or self.dilation < 1:
            raise ConfigurationError(f"block needs channels >= 1 and dilation >= 1, got {self.channels}, {self.dilation}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"block dropout must lie in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class EncoderConfig:
    num_classes: int = 4
    widths: tuple[int, ...] = (16, 64, 128)
    module_counts: tuple[int, ...] = (0, 4, 6)
    dilations: tuple[int, ...] = (1, 1, 2, 4, 2, 4, 8, 16, 2, 4)
    early_modules: int = 5
    early_dropout: float = 0.03
    late_dropout: float = 0.3
    use_prelu: bool = True
    use_bias: bool = False
    tail_1x1: bool = True
    conv_1x1: bool = True

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.widths:
            raise ConfigurationError("encoder needs at least one downsampler width")
        previous = IMAGE_CHANNELS
        for width in self.widths:
            if width <= previous:
                raise ConfigurationError(f"downsampler widths must grow from {IMAGE_CHANNELS}: {self.widths}")
            previous = width
        if len(self.module_counts) != len(self.widths) or min(self.module_counts) < 0:
            raise ConfigurationError(
                f"module_counts {self.module_counts} must give one non-negative count per width {self.widths}"
            )
        if len(self.dilations) != sum(self.module_counts):
            raise ConfigurationError(
                f"{len(self.dilations)} dilations given for {sum(self.module_counts)} modules"
            )
        if any(d < 1 for d in self.dilations):
            raise ConfigurationError(f"dilations must be >= 1: {self.dilations}")
        for p in (self.early_dropout, self.late_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigurationError(f"dropout must lie in [0, 1), got {p}")

    @property
    def upsample_factor(self) -> int:
        return 2 ** len(self.widths)

    def block_config(self, index: int, channels: int) -> LightweightNonBt1DConfig:
        p = self.early_dropout if index < self.early_modules else self.late_dropout
        return LightweightNonBt1DConfig(
            channels=channels,
            dilation=self.dilations[index],
            dropout_p=p,
            use_prelu=self.use_prelu,
            use_bias=self.use_bias,
            tail_1x1=self.tail_1x1,
            conv_1x1=self.conv_1x1,
        )

    def to_json(self) -> dict[str, object]:
        return {
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "module_counts": list(self.module_counts),
            "dilations": list(self.dilations),
            "early_modules": self.early_modules,
            "early_dropout": self.early_dropout,
            "late_dropout": self.late_dropout,
            "use_prelu": self.use_prelu,
            "use_bias": self.use_bias,
            "tail_1x1": self.tail_1x1,
            "conv_1x1": self.conv_1x1,
        }

    @staticmethod
    def from_json(data: Mapping[str, object]) -> EncoderConfig:
        defaults = EncoderConfig()
        try:
            return EncoderConfig(
                num_classes=int(data.get("num_classes", defaults.num_classes)),
                widths=_int_tuple(data.get("widths", defaults.widths)),
                module_counts=_int_tuple(data.get("module_counts", defaults.module_counts)),
                dilations=_int_tuple(data.get("dilations", defaults.dilations)),
                early_modules=int(data.get("early_modules", defaults.early_modules)),
                early_dropout=float(data.get("early_dropout", defaults.early_dropout)),
                late_dropout=float(data.get("late_dropout", defaults.late_dropout)),
                use_prelu=bool(data.get("use_prelu", defaults.use_prelu)),
                use_bias=bool(data.get("use_bias", defaults.use_bias)),
                tail_1x1=bool(data.get("tail_1x1", defaults.tail_1x1)),
                conv_1x1=bool(data.get("conv_1x1", defaults.conv_1x1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed encoder config: {exc}") from exc


def _int_tuple(value: object) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigurationError(f"expected a list of integers, got {value!r}")
    return tuple(int(v) for v in value)


@dataclass(frozen=True, eq=False)
class NetworkOutput:
    logits: Tensor
    semantic_offsets_raw: Tensor
    instance_offsets_raw: Tensor


class Layer:
    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Layer] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        self._buffers[name] = array
        return array

    def add_child(self, name: str, layer: Layer) -> Layer:
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, array in self._buffers.items():
            yield prefix + name, array
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: tensor.data.copy() for name, tensor in self.named_parameters()}
        state.update({name: array.copy() for name, array in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        targets: dict[str, np.ndarray] = {name: t.data for name, t in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise StructuralError(f"state does not fit the network: missing {missing}, unexpected {unexpected}")
        for name, target in targets.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise StructuralError(f"{name}: stored shape {value.shape}, network expects {target.shape}")
            target[...] = value


class Conv(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        rng: np.random.Generator,
        stride: int = 1,
        dilation: tuple[int, int] = (1, 1),
        padding: tuple[int, int] = (0, 0),
        bias: bool = False,
        std: float | None = None,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel[0] * kernel[1]
        scale = np.sqrt(2.0 / fan_in) if std is None else std
        self.weight = self.add_param("weight", rng.normal(0.0, scale, (out_channels, in_channels) + kernel))
        self.bias = self.add_param("bias", np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class BatchNorm(Layer):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, BN_MOMENTUM, BN_EPS
        )


class Affine(Layer):
    """Per-channel scale and shift left behind by a folded normalization."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.scale = self.add_param("scale", np.ones(channels))
        self.shift = self.add_param("shift", np.zeros(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return channel_affine(x, self.scale, self.shift)


class Activation(Layer):
    def __init__(self, channels: int, use_prelu: bool) -> None:
        super().__init__()
        self.slope = self.add_param("slope", np.full(channels, PRELU_INIT)) if use_prelu else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.slope is None:
            return relu(x)
        return prelu(x, self.slope)


class ConvUnit(Layer):
    """A convolution followed by batch norm, or by nothing once the norm is folded in."""

    def __init__(self, conv_args: dict[str, object], out_channels: int, folded: bool) -> None:
        super().__init__()
        if folded:
            conv_args = dict(conv_args, bias=True)
        self.conv = self.add_child("conv", Conv(**conv_args))
        self.bn = None if folded else self.add_child("bn", BatchNorm(out_channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        if self.bn is None:
            return y
        return self.bn(y, training)


def block_layout(cfg: LightweightNonBt1DConfig) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """(kernel, dilation) of the four convolutions of a block, in order."""
    d = cfg.dilation
    vertical = ((3, 1), (d, 1))
    horizontal = ((1, 3), (1, d))
    pointwise = ((1, 1), (1, 1))
    if not cfg.conv_1x1:
        return [((3, 1), (1, 1)), ((1, 3), (1, 1)), vertical, horizontal]
    if cfg.tail_1x1:
        return [pointwise, vertical, horizontal, pointwise]
    return [pointwise, pointwise, vertical, horizontal]


class LightweightNonBt1D(Layer):
    def __init__(
        self,
        cfg: LightweightNonBt1DConfig,
        rng: np.random.Generator,
        seed: int = 0,
        folded: bool = False,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        w = cfg.channels
        self.units: list[ConvUnit] = []
        for index, (kernel, dilation) in enumerate(block_layout(cfg)):
            padding = ((kernel[0] // 2) * dilation[0], (kernel[1] // 2) * dilation[1])
            conv_args = {
                "in_channels": w,
                "out_channels": w,
                "kernel": kernel,
                "rng": rng,
                "dilation": dilation,
                "padding": padding,
                "bias": cfg.use_bias,
            }
            self.units.append(self.add_child(f"conv{index}", ConvUnit(conv_args, w, folded)))
        self.acts = [self.add_child(f"act{index}", Activation(w, cfg.use_prelu)) for index in range(3)]
        self.act_out = self.add_child("act_out", Activation(w, cfg.use_prelu))

    def __call__(self, x: Tensor, training: bool, step: int = 0) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise DimensionError(f"block expects {self.cfg.channels} channels, got input {x.shape}")
        y = x
        for index, unit in enumerate(self.units):
            y = unit(y, training)
            if index < len(self.acts):
                y = self.acts[index](y)
        y = dropout(y, self.cfg.dropout_p, training, _mix_seed(self.seed, step))
        return self.act_out(residual_add(y, x))


def lightweight_nonbt1d(
    x: Tensor,
    block: LightweightNonBt1D,
    training: bool,
    step: int = 0,
) -> Tensor:
    """Run ``block`` on ``x``; the block carries the config and the trained weights."""
    return block(x, training, step)


class Downsampler(Layer):
    """Stride-2 convolution and 2x2 max-pool side by side, concatenated."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        use_prelu: bool = True,
        folded: bool = False,
    ) -> None:
        super().__init__()
        if out_channels <= in_channels:
            raise ConfigurationError(f"downsampler needs c_out > c_in, got {in_channels} -> {out_channels}")
        self.in_channels = in_channels
        conv_args = {
            "in_channels": in_channels,
            "out_channels": out_channels - in_channels,
            "kernel": (3, 3),
            "rng": rng,
            "stride": 2,
            "padding": (1, 1),
        }
        self.unit = self.add_child("unit", ConvUnit(conv_args, out_channels - in_channels, folded))
        if folded:
            self.pool_norm: Layer = self.add_child("pool_affine", Affine(in_channels))
        else:
            self.pool_norm = self.add_child("pool_bn", BatchNorm(in_channels))
        self.act = self.add_child("act", Activation(out_channels, use_prelu))

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Raw convolution and pooling outputs, before any normalization."""
        return self.unit.conv(x), maxpool2x2(x)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"downsampler expects {self.in_channels} channels, got input {x.shape}")
        conv_out = self.unit(x, training)
        pooled = self.pool_norm(maxpool2x2(x), training)
        return self.act(concat_channels(conv_out, pooled))


class Encoder(Layer):
    """Early-downsampling encoder with semantic and two offset heads at 1/f resolution."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, folded: bool = False) -> None:
        super().__init__()
        self.cfg = cfg
        self.folded = folded
        self.step = 0
        rng = np.random.default_rng(seed)
        self.stages: list[tuple[Downsampler, list[LightweightNonBt1D]]] = []
        previous = IMAGE_CHANNELS
        block_index = 0
        for stage, (width, count) in enumerate(zip(cfg.widths, cfg.module_counts)):
            down = Downsampler(previous, width, rng, cfg.use_prelu, folded)
            self.add_child(f"down{stage}", down)
            blocks = []
            for _ in range(count):
                block_cfg = cfg.block_config(block_index, width)
                block = LightweightNonBt1D(block_cfg, rng, seed=_mix_seed(seed, block_index), folded=folded)
                blocks.append(self.add_child(f"block{block_index}", block))
                block_index += 1
            self.stages.append((down, blocks))
            previous = width

        head_args = {"in_channels": previous, "kernel": (3, 3), "rng": rng, "padding": (1, 1), "bias": True}
        self.semantic_head = self.add_child("semantic_head", Conv(out_channels=cfg.num_classes, **head_args))
        self.semantic_offsets_head = self.add_child(
            "semantic_offsets_head", Conv(out_channels=2, std=OFFSET_HEAD_STD, **head_args)
        )
        self.instance_offsets_head = self.add_child(
            "instance_offsets_head", Conv(out_channels=2, std=OFFSET_HEAD_STD, **head_args)
        )

    def set_step(self, step: int) -> None:
        """Select the dropout masks; the same step always draws the same masks."""
        self.step = step

    def __call__(self, image: Tensor, training: bool) -> NetworkOutput:
        if image.ndim != 4 or image.shape[1] != IMAGE_CHANNELS:
            raise DimensionError(f"encoder expects (B, 3, H, W) images, got {image.shape}")
        factor = self.cfg.upsample_factor
        if image.shape[2] % factor or image.shape[3] % factor:
            raise ConfigurationError(
                f"image size {image.shape[2]}x{image.shape[3]} is not divisible by the upsample factor {factor}"
            )
        x = image
        for down, blocks in self.stages:
            x = down(x, training)
            for block in blocks:
                x = block(x, training, self.step)
        return NetworkOutput(
            logits=self.semantic_head(x),
            semantic_offsets_raw=self.semantic_offsets_head(x),
            instance_offsets_raw=self.instance_offsets_head(x),
        )


def encoder_forward(encoder: Encoder, image: Tensor, training: bool) -> NetworkOutput:
    return encoder(image, training)


def fold_batchnorm(state: Mapping[str, np.ndarray], eps: float = BN_EPS) -> dict[str, np.ndarray]:
    """Absorb every batch norm into the convolution before it.

    ``X.bn.*`` folds into ``X.conv``; a downsampler's ``pool_bn`` has no
    convolution and becomes a ``pool_affine`` scale/shift.
    """
    bn_suffix = ".bn.gamma"
    pool_suffix = ".pool_bn.gamma"
    conv_prefixes = [key[: -len(bn_suffix)] for key in state if key.endswith(bn_suffix)]
    pool_prefixes = [key[: -len(pool_suffix)] for key in state if key.endswith(pool_suffix)]
    for prefix in conv_prefixes:
        if f"{prefix}.conv.weight" not in state:
            raise StructuralError(f"batch norm {prefix}.bn has no adjacent convolution {prefix}.conv")

    folded_keys = {f"{p}.bn.{n}" for p in conv_prefixes for n in ("gamma", "beta", "running_mean", "running_var")}
    folded_keys |= {f"{p}.pool_bn.{n}" for p in pool_prefixes for n in ("gamma", "beta", "running_mean", "running_var")}
    out = {key: np.array(value, dtype=np.float64) for key, value in state.items() if key not in folded_keys}

    for prefix in conv_prefixes:
        scale, shift = _bn_affine(state, f"{prefix}.bn", eps)
        weight = state[f"{prefix}.conv.weight"]
        bias = state.get(f"{prefix}.conv.bias", np.zeros(weight.shape[0]))
        out[f"{prefix}.conv.weight"] = weight * scale[:, None, None, None]
        out[f"{prefix}.conv.bias"] = bias * scale + shift
    for prefix in pool_prefixes:
        scale, shift = _bn_affine(state, f"{prefix}.pool_bn", eps)
        out[f"{prefix}.pool_affine.scale"] = scale
        out[f"{prefix}.pool_affine.shift"] = shift
    return out


def _bn_affine(state: Mapping[str, np.ndarray], prefix: str, eps: float) -> tuple[np.ndarray, np.ndarray]:
    try:
        gamma = state[f"{prefix}.gamma"]
        beta = state[f"{prefix}.beta"]
        mean = state[f"{prefix}.running_mean"]
        var = state[f"{prefix}.running_var"]
    except KeyError as exc:
        raise StructuralError(f"batch norm {prefix} is missing {exc.args[0]}") from exc
    scale = gamma / np.sqrt(var + eps)
    return scale, beta - mean * scale


def folded_encoder(encoder: Encoder) -> Encoder:
    """An eval-only copy of ``encoder`` with all batch norms folded away."""
    folded = Encoder(encoder.cfg, folded=True)
    folded.load_state_dict(fold_batchnorm(encoder.state_dict()))
    return folded


def _mix_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
