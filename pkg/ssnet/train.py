from __future__ import annotations

import csv
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, split_dataset
from .errors import ConfigurationError, DimensionError, NumericError, StructuralError
from .functional import softmax_cross_entropy
from .instance import instance_loss
from .metrics import ConfusionMatrix, InstanceApAccumulator, boundary_mask, miou
from .net import Encoder, EncoderConfig
from .pipeline import decode, predict, training_targets
from .tensor import Tape

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "miou", "class_avg", "global_avg", "ap", "ap50"]
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EVAL_BATCH = 8


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs) ** cfg.poly_power


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    wd: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One in-place Adam update with L2 weight decay folded into the gradient."""
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, value in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(value) if grad is None else grad
        if grad.shape != value.shape:
            raise DimensionError(f"{name}: gradient {grad.shape} does not match parameter {value.shape}")
        grad = grad + wd * value
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


@dataclass(frozen=True)
class EvalResult:
    epoch: int
    split: str
    miou: float
    class_avg: float
    global_avg: float
    ap: float
    ap50: float
    boundary_miou: float
    t: int

    def csv_row(self) -> list[str]:
        return [
            str(self.epoch),
            self.split,
            f"{self.miou:.6f}",
            f"{self.class_avg:.6f}",
            f"{self.global_avg:.6f}",
            f"{self.ap:.6f}",
            f"{self.ap50:.6f}",
        ]


def evaluate(
    encoder: Encoder,
    dataset: Dataset,
    t: int,
    area_threshold: int,
    fixed_upsample: bool = False,
    epoch: int = 0,
    split: str = "val",
) -> EvalResult:
    """Eval-mode metrics: nearest-mode upsampling, ``t`` diffusion steps."""
    if len(dataset) == 0:
        raise ConfigurationError(f"{split} split is empty")
    conf = ConfusionMatrix(dataset.num_classes)
    edge_conf = ConfusionMatrix(dataset.num_classes)
    ap = InstanceApAccumulator()
    for start in range(0, len(dataset), EVAL_BATCH):
        images, semantic, instances = dataset.batch(range(start, min(start + EVAL_BATCH, len(dataset))))
        prediction = predict(encoder, images, t, training=False, fixed_upsample=fixed_upsample)
        decoded = decode(prediction, dataset.thing_classes, area_threshold)
        conf.add(semantic, decoded.semantic)
        edge_conf.add(semantic, decoded.semantic, mask=boundary_mask(semantic))
        for b in range(len(images)):
            ap.add(decoded.instances.labels[b], decoded.confidences[b], instances[b])

    miou_value, class_avg, global_avg = miou(conf)
    edge_miou = miou(edge_conf)[0] if edge_conf.total else float("nan")
    ap_value, ap50 = ap.result()
    return EvalResult(epoch, split, miou_value, class_avg, global_avg, ap_value, ap50, edge_miou, t)


def write_metrics_csv(rows: Iterable[EvalResult], stream: TextIO, with_t: bool = False) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(METRICS_HEADER + (["t"] if with_t else []))
    for row in rows:
        writer.writerow(row.csv_row() + ([str(row.t)] if with_t else []))


@dataclass(frozen=True)
class TrainResult:
    history: list[EvalResult]
    losses: list[float]
    best_miou: float
    best_epoch: int


def train(
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    dataset: Dataset,
    out_path: str | Path,
    metrics_stream: TextIO | None = None,
) -> TrainResult:
    """Train with Adam and a poly schedule, keeping the best-validation-mIoU checkpoint."""
    if encoder_cfg.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"encoder predicts {encoder_cfg.num_classes} classes, dataset has {dataset.num_classes}"
        )
    train_set, val_set = split_dataset(dataset, cfg.val_fraction)
    if len(train_set) == 0:
        raise ConfigurationError("training split is empty")
    if len(val_set) == 0:
        logger.warning("no validation split; validating on the training samples")
        val_set = train_set

    encoder = Encoder(encoder_cfg, seed=cfg.seed)
    params = {name: tensor.data for name, tensor in encoder.named_parameters()}
    state = AdamState()
    shuffle = np.random.default_rng(cfg.seed)
    writer = None
    if metrics_stream is not None:
        writer = csv.writer(metrics_stream, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

    history: list[EvalResult] = []
    losses: list[float] = []
    best_miou = -math.inf
    best_epoch = -1
    step = 0
    logger.info(
        "training %d samples (%d val) for %d epochs, batch %d, t=%d, loss %s",
        len(train_set), len(val_set), cfg.epochs, cfg.batch, cfg.t_iterations, cfg.loss_kind,
    )

    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        order = shuffle.permutation(len(train_set))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch):
            images, semantic, instances = train_set.batch(order[start : start + cfg.batch])
            encoder.set_step(step)
            encoder.zero_grad()
            with Tape() as tape:
                prediction = predict(encoder, images, cfg.t_iterations, training=True,
                                     fixed_upsample=cfg.fixed_upsample)
                loss = softmax_cross_entropy(prediction.logits, semantic)
                if cfg.lambda_instance > 0:
                    targets = training_targets(instances, prediction)
                    loss = loss + instance_loss(prediction.coords, targets, cfg.loss_kind) * cfg.lambda_instance
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss became {value} at epoch {epoch}, step {step}")
                tape.backward(loss)
            adam_step(params, {name: t.grad for name, t in encoder.named_parameters()}, state, lr, cfg.weight_decay)
            logger.debug("epoch %d step %d lr %.3g loss %.6f", epoch, step, lr, value)
            epoch_loss += value
            batches += 1
            step += 1

        mean_loss = epoch_loss / batches
        losses.append(mean_loss)
        result = evaluate(
            encoder, val_set, cfg.evaluation_t, cfg.area_threshold, cfg.fixed_upsample, epoch=epoch, split="val"
        )
        history.append(result)
        if writer is not None:
            writer.writerow(result.csv_row())
        logger.info(
            "epoch %d lr %.3g loss %.5f val miou %.4f boundary %.4f ap %.4f",
            epoch, lr, mean_loss, result.miou, result.boundary_miou, result.ap,
        )
        if result.miou > best_miou:
            best_miou, best_epoch = result.miou, epoch
            save_checkpoint(
                out_path,
                encoder,
                {
                    "epoch": epoch,
                    "best_miou": best_miou,
                    "thing_classes": list(dataset.thing_classes),
                    "train": cfg.to_json(),
                },
            )

    return TrainResult(history=history, losses=losses, best_miou=best_miou, best_epoch=best_epoch)


def evaluate_checkpoint(
    ckpt_path: str | Path,
    dataset: Dataset,
    ts: Sequence[int],
    fold_bn: bool = False,
    split: str = "val",
    val_fraction: float | None = None,
    area_threshold: int | None = None,
) -> list[EvalResult]:
    """One result per diffusion step count in ``ts``."""
    checkpoint = load_checkpoint(ckpt_path)
    if checkpoint.encoder.num_classes != dataset.num_classes:
        raise StructuralError(
            f"checkpoint predicts {checkpoint.encoder.num_classes} classes, dataset has {dataset.num_classes}"
        )
    stored = TrainConfig.from_json(checkpoint.meta.get("train", {})) if "train" in checkpoint.meta else TrainConfig()
    fraction = stored.val_fraction if val_fraction is None else val_fraction
    threshold = stored.area_threshold if area_threshold is None else area_threshold
    train_set, val_set = split_dataset(dataset, fraction)
    chosen = {"train": train_set, "val": val_set, "all": dataset}.get(split)
    if chosen is None:
        raise ConfigurationError(f"split must be train, val or all, got {split!r}")

    encoder = checkpoint.build(folded=fold_bn)
    epoch = int(checkpoint.meta.get("epoch", 0))
    results = []
    for t in ts:
        result = evaluate(encoder, chosen, t, threshold, stored.fixed_upsample, epoch=epoch, split=split)
        logger.info("t=%d miou %.4f ap %.4f ap50 %.4f", t, result.miou, result.ap, result.ap50)
        results.append(result)
    return results
