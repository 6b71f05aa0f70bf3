from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, record

RELU = "relu"
PRELU = "prelu"
TANH = "tanh"

ACTIVATIONS = [RELU, PRELU, TANH]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int | tuple[int, int] = 1,
    padding: int | tuple[int, int] = 0,
    im2col: bool = False,
) -> Tensor:
    """Cross-correlation of a (B, C, H, W) input with (O, C, kH, kW) filters.

    The default path accumulates one matrix product per kernel tap; ``im2col``
    gathers all taps first and does a single product. Both agree to 1e-10.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels, in_channels, kh, kw = weight.shape
    if in_channels != channels:
        raise DimensionError(f"conv2d weight expects {in_channels} input channels, input has {channels}")
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {out_channels} filters")

    dh, dw = _pair(dilation)
    ph, pw = _pair(padding)
    if stride < 1 or dh < 1 or dw < 1 or ph < 0 or pw < 0:
        raise ConfigurationError(
            f"conv2d needs stride >= 1, dilation >= 1, padding >= 0; got {stride}, {(dh, dw)}, {(ph, pw)}"
        )
    out_h = (height + 2 * ph - dh * (kh - 1) - 1) // stride + 1
    out_w = (width + 2 * pw - dw * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"conv2d output size {out_h}x{out_w} is not positive for input {height}x{width}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    w = weight.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    if im2col:
        cols = np.stack(
            [_window(padded, i * dh, j * dw, out_h, out_w, stride) for i, j in taps],
            axis=2,
        ).reshape(batch, channels * kh * kw, out_h * out_w)
        out = np.einsum("ok,bkp->bop", w.reshape(out_channels, -1), cols, optimize=True)
        out = out.reshape(batch, out_channels, out_h, out_w)
    else:
        out = np.zeros((batch, out_channels, out_h, out_w))
        for i, j in taps:
            patch = _window(padded, i * dh, j * dw, out_h, out_w, stride)
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j], patch, optimize=True)

    if bias is not None:
        out += bias.data[None, :, None, None]

    need_input = x.requires_grad

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_w = np.zeros_like(w)
        grad_padded = np.zeros_like(padded) if need_input else None
        for i, j in taps:
            patch = _window(padded, i * dh, j * dw, out_h, out_w, stride)
            grad_w[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
            if grad_padded is not None:
                target = _window(grad_padded, i * dh, j * dw, out_h, out_w, stride)
                target += np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
        grad_x = None
        if grad_padded is not None:
            grad_x = grad_padded[:, :, ph : ph + height, pw : pw + width]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, grad_fn)


def _window(array: np.ndarray, row: int, col: int, out_h: int, out_w: int, stride: int) -> np.ndarray:
    return array[
        :,
        :,
        row : row + stride * (out_h - 1) + 1 : stride,
        col : col + stride * (out_w - 1) + 1 : stride,
    ]


def _pair(value: int | tuple[int, int]) -> tuple[int, int]:
    if isinstance(value, tuple):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def activation(x: Tensor, kind: str, slope: Tensor | None = None) -> Tensor:
    if kind == RELU:
        return relu(x)
    if kind == PRELU:
        if slope is None:
            raise ConfigurationError("prelu activation needs a slope vector")
        return prelu(x, slope)
    if kind == TANH:
        return tanh(x)
    raise ConfigurationError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return record("relu", (x,), np.where(positive, x.data, 0.0), lambda g: (g * positive,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise DimensionError(f"prelu slope shape {slope.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(view)
    data = x.data
    positive = data > 0
    out = np.where(positive, data, a * data)
    axes = (0,) + tuple(range(2, x.ndim))

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_x = g * np.where(positive, 1.0, a)
        grad_a = (g * np.where(positive, 0.0, data)).sum(axis=axes)
        return grad_x, grad_a

    return record("prelu", (x, slope), out, grad_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects a rank-4 tensor, got {x.shape}")
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {height}x{width}")
    h, w = height // 2, width // 2
    windows = (
        x.data.reshape(batch, channels, h, 2, w, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, h, w, 4)
    )
    # argmax returns the first maximum, i.e. the smallest flat index in the window
    winner = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winner, axis=-1)[..., 0]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad_windows = np.zeros((batch, channels, h, w, 4))
        np.put_along_axis(grad_windows, winner, g[..., None], axis=-1)
        grad_x = (
            grad_windows.reshape(batch, channels, h, w, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height, width)
        )
        return (grad_x,)

    return record("maxpool2x2", (x,), out, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects rank-4 tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"concat_channels: batch/spatial dims of {a.shape} and {b.shape} differ")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", (a, b), out, lambda g: (g[:, :split], g[:, split:]))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization; training mode updates the running buffers in place."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a rank-4 tensor, got {x.shape}")
    channels = x.shape[1]
    for label, vector in (
        ("gamma", gamma.data),
        ("beta", beta.data),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        if vector.shape != (channels,):
            raise DimensionError(f"batchnorm2d {label} shape {vector.shape} does not match {channels} channels")
    if eps <= 0:
        raise ConfigurationError(f"batchnorm2d eps must be positive, got {eps}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise ConfigurationError("batchnorm2d over zero batch x spatial elements")

    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    normalized = (x.data - mean[None, :, None, None]) * inv_std
    g_view = gamma.data[None, :, None, None]
    out = normalized * g_view + beta.data[None, :, None, None]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_norm = g * g_view
        if training:
            grad_x = (inv_std / count) * (
                count * grad_norm
                - grad_norm.sum(axis=axes, keepdims=True)
                - normalized * (grad_norm * normalized).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_norm * inv_std
        return grad_x, grad_gamma, grad_beta

    return record("batchnorm2d", (x, gamma, beta), out, grad_fn)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(f"channel_affine vectors {scale.shape}/{shift.shape} do not match {x.shape}")
    s = scale.data[None, :, None, None]
    out = x.data * s + shift.data[None, :, None, None]
    data = x.data

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return g * s, (g * data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("channel_affine", (x, scale, shift), out, grad_fn)


def dropout(x: Tensor, p: float, training: bool, seed: int) -> Tensor:
    """Inverted dropout with a mask drawn from ``seed``; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= p
    mask = keep / (1.0 - p)
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean per-pixel cross-entropy of (B, C, H, W) logits against (B, H, W) labels."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross-entropy labels {labels.shape} do not match logits {logits.shape}")
    channels = logits.shape[1]
    valid = labels != ignore_index
    if np.any(valid & ((labels < 0) | (labels >= channels))):
        raise DimensionError(f"cross-entropy labels fall outside [0, {channels})")
    count = int(valid.sum())
    if count == 0:
        return record("cross_entropy", (logits,), np.array(0.0), lambda g: (np.zeros(logits.shape),))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_prob)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (float(g) / count)
        return (grad,)

    return record("cross_entropy", (logits,), np.array(loss), grad_fn)
