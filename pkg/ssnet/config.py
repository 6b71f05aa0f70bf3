from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
from pathlib import Path
from typing import Callable, Mapping

from .errors import ConfigurationError
from .instance import DEFAULT_AREA_THRESHOLD, L2, LOSS_KINDS
from .net import EncoderConfig

logger = logging.getLogger(__name__)

TRUE_WORDS = ("true", "1", "yes")
FALSE_WORDS = ("false", "0", "no")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 40
    batch: int = 8
    poly_power: float = 0.9
    seed: int = 0
    t_iterations: int = 30
    loss_kind: str = L2
    lambda_instance: float = 1.0
    val_fraction: float = 0.2
    area_threshold: int = DEFAULT_AREA_THRESHOLD
    fixed_upsample: bool = False
    eval_t: int | None = None

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.poly_power <= 1:
            raise ConfigurationError(f"poly_power must lie in (0, 1], got {self.poly_power}")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigurationError(f"batch and epochs must be >= 1, got {self.batch} and {self.epochs}")
        if self.weight_decay < 0 or self.lambda_instance < 0:
            raise ConfigurationError("weight_decay and lambda_instance must be non-negative")
        if self.t_iterations < 0 or (self.eval_t is not None and self.eval_t < 0):
            raise ConfigurationError("diffusion iteration counts must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.area_threshold < 0:
            raise ConfigurationError(f"area_threshold must be >= 0, got {self.area_threshold}")

    @property
    def evaluation_t(self) -> int:
        return self.t_iterations if self.eval_t is None else self.eval_t

    def to_json(self) -> dict[str, object]:
        return {
            "lr0": self.lr0,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch": self.batch,
            "poly_power": self.poly_power,
            "seed": self.seed,
            "t_iterations": self.t_iterations,
            "loss_kind": self.loss_kind,
            "lambda_instance": self.lambda_instance,
            "val_fraction": self.val_fraction,
            "area_threshold": self.area_threshold,
            "fixed_upsample": self.fixed_upsample,
            "eval_t": self.eval_t,
        }

    @staticmethod
    def from_json(data: Mapping[str, object]) -> TrainConfig:
        unknown = sorted(set(data) - set(TrainConfig().to_json()))
        if unknown:
            raise ConfigurationError(f"unknown training keys {unknown}")
        return replace(TrainConfig(), **dict(data))


@dataclass(frozen=True)
class RunConfig:
    """A parsed config file: training knobs plus encoder overrides."""

    train: TrainConfig = field(default_factory=TrainConfig)
    encoder_fields: dict[str, object] = field(default_factory=dict)

    def encoder(self, num_classes: int) -> EncoderConfig:
        data = dict(self.encoder_fields, num_classes=num_classes)
        return EncoderConfig.from_json(data)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in TRUE_WORDS:
        return True
    if lowered in FALSE_WORDS:
        return False
    raise ValueError(f"expected one of {TRUE_WORDS + FALSE_WORDS}, got {text!r}")


def _parse_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


TRAIN_KEYS: dict[str, Callable[[str], object]] = {
    "lr0": float,
    "weight_decay": float,
    "epochs": int,
    "batch": int,
    "poly_power": float,
    "seed": int,
    "t_iterations": int,
    "loss_kind": str,
    "lambda_instance": float,
    "val_fraction": float,
    "area_threshold": int,
    "fixed_upsample": _parse_bool,
    "eval_t": _parse_optional_int,
}

ENCODER_KEYS: dict[str, Callable[[str], object]] = {
    "widths": _parse_ints,
    "module_counts": _parse_ints,
    "dilations": _parse_ints,
    "early_modules": int,
    "early_dropout": float,
    "late_dropout": float,
    "use_prelu": _parse_bool,
    "use_bias": _parse_bool,
    "tail_1x1": _parse_bool,
    "conv_1x1": _parse_bool,
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    train_values: dict[str, object] = {}
    encoder_values: dict[str, object] = {}
    seen: set[str] = set()
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{number}"
        if not sep or not key:
            raise ConfigurationError(f"{where}: expected key=value, got {raw!r}")
        if key in seen:
            raise ConfigurationError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        if key in TRAIN_KEYS:
            parser, target = TRAIN_KEYS[key], train_values
        elif key in ENCODER_KEYS:
            parser, target = ENCODER_KEYS[key], encoder_values
        else:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        try:
            target[key] = parser(value)
        except ValueError as exc:
            raise ConfigurationError(f"{where}: bad value for {key}: {exc}") from exc

    config = RunConfig(train=TrainConfig.from_json(train_values), encoder_fields=encoder_values)
    # validate the encoder part now rather than at training time
    config.encoder(num_classes=1)
    return config


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    config = parse_config(path.read_text(encoding="utf-8"), str(path))
    logger.debug("loaded config %s: %s", path, config)
    return config
