"""Differentiable numeric primitives for the temporal heads.

Everything is plain numpy in double precision. Each operation exposes a forward
pass returning ``(output, cache)`` and a matching backward pass consuming that
cache; there is no autograd graph, the model module wires layers together by
hand. Sequences are 2-D float64 arrays laid out as (time, channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

GAP = "gap"
GMP = "gmp"


def as_seq(x) -> Array:
    """Coerce to a (time, channels) float64 array and validate it."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"sequence must be 2-D (time, channels), got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"sequence must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sequence contains non-finite values")
    return a


@dataclass
class ConvLayer1D:
    """One temporal convolution layer.

    ``weights`` has shape (out_channels, in_channels, kernel_size); ``bias``
    has shape (out_channels,). Stride is fixed at 1 and the kernel must be odd
    so that symmetric padding preserves the sequence length.
    """

    weights: Array
    bias: Array
    dilation: int = 1

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError(
                "weights must have shape (out_channels, in_channels, kernel_size), "
                f"got {self.weights.shape}"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out_channels "
                f"{self.out_channels}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2


def dilated_conv1d_forward(x: Array, layer: ConvLayer1D) -> tuple[Array, tuple]:
    """Stride-1 dilated temporal convolution with symmetric zero padding.

    out[t, o] = bias[o] + sum_{i, j} weights[o, i, j] * x_pad[t + j*d, i]

    where d is the dilation and the input is zero padded by d*(kernel-1)/2
    frames on each side, so the output has the same length as the input.
    """
    x = as_seq(x)
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    length = x.shape[0]
    pad = layer.padding
    xp = np.zeros((length + 2 * pad, layer.in_channels))
    xp[pad : pad + length] = x
    out = np.tile(layer.bias, (length, 1))
    d = layer.dilation
    for j in range(layer.kernel_size):
        out += xp[j * d : j * d + length] @ layer.weights[:, :, j].T
    return out, (xp, length, layer)


def dilated_conv1d_backward(
    grad_out: Array, cache: tuple
) -> tuple[Array, Array, Array]:
    """Gradients of a dilated conv: returns (grad_x, grad_weights, grad_bias)."""
    xp, length, layer = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (length, layer.out_channels):
        raise ValueError(
            f"grad shape {grad_out.shape} does not match output "
            f"({length}, {layer.out_channels})"
        )
    d = layer.dilation
    grad_b = grad_out.sum(axis=0)
    grad_w = np.empty_like(layer.weights)
    grad_xp = np.zeros_like(xp)
    for j in range(layer.kernel_size):
        window = slice(j * d, j * d + length)
        grad_w[:, :, j] = grad_out.T @ xp[window]
        grad_xp[window] += grad_out @ layer.weights[:, :, j]
    pad = layer.padding
    return grad_xp[pad : pad + length], grad_w, grad_b


def relu(x: Array) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out: Array, cache: Array) -> Array:
    return np.asarray(grad_out, dtype=np.float64) * cache


def bilinear_upsample_1d(x: Array, target_len: int) -> tuple[Array, tuple]:
    """Endpoint-aligned linear interpolation from N to target_len positions.

    Output position t reads the fractional source coordinate
    s = t * (N - 1) / (target_len - 1) and blends the two bracketing inputs;
    a single input row is replicated. target_len below N is rejected
    (this is an upsampler).
    """
    x = as_seq(x)
    n = x.shape[0]
    if target_len < n:
        raise ValueError(f"target length {target_len} is below input length {n}")
    if n == 1:
        return np.repeat(x, target_len, axis=0), (None, None, n, target_len)
    s = np.arange(target_len) * (n - 1) / (target_len - 1)
    lo = np.minimum(np.floor(s).astype(np.int64), n - 2)
    alpha = s - lo
    out = (1.0 - alpha)[:, None] * x[lo] + alpha[:, None] * x[lo + 1]
    return out, (lo, alpha, n, target_len)


def bilinear_upsample_1d_backward(grad_out: Array, cache: tuple) -> Array:
    lo, alpha, n, target_len = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[0] != target_len:
        raise ValueError(
            f"grad has {grad_out.shape[0]} rows, expected {target_len}"
        )
    if lo is None:
        return grad_out.sum(axis=0, keepdims=True)
    grad_x = np.zeros((n, grad_out.shape[1]))
    np.add.at(grad_x, lo, (1.0 - alpha)[:, None] * grad_out)
    np.add.at(grad_x, lo + 1, alpha[:, None] * grad_out)
    return grad_x


def framewise_softmax(x: Array) -> Array:
    """Row-wise softmax over the channel axis, numerically stabilized."""
    x = as_seq(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vec(x: Array) -> Array:
    """Stable softmax of a single score vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("scores contain non-finite values")
    e = np.exp(x - x.max())
    return e / e.sum()


def _check_one_hot(labels: Array) -> None:
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be one-hot (entries 0 or 1)")
    sums = labels.sum(axis=-1)
    if not np.all(sums == 1.0):
        raise ValueError("labels must be one-hot (each frame sums to 1)")


def framewise_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Softmax cross-entropy, summed over frames and averaged over the batch.

    ``logits`` and one-hot ``labels`` are (batch, frames, classes). Returns the
    scalar loss and its exact gradient w.r.t. the logits,
    (softmax(logits) - labels) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"logits must be (batch, frames, classes), got {logits.shape}")
    if labels.shape != logits.shape:
        raise ValueError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    _check_one_hot(labels)
    batch = logits.shape[0]
    z = logits - logits.max(axis=2, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=2, keepdims=True))
    log_probs = z - log_norm
    loss = float(-(labels * log_probs).sum() / batch)
    grad = (np.exp(log_probs) - labels) / batch
    return loss, grad


def temporal_pool(x: Array, mode: str) -> tuple[Array, tuple]:
    """Pool a (positions, channels) sequence down to one vector per channel.

    ``gap`` averages over positions; ``gmp`` takes the per-channel max, and its
    backward routes the gradient to the earliest maximizing position.
    """
    x = as_seq(x)
    if mode == GAP:
        return x.mean(axis=0), (GAP, x.shape, None)
    if mode == GMP:
        idx = np.argmax(x, axis=0)
        return x[idx, np.arange(x.shape[1])], (GMP, x.shape, idx)
    raise ValueError(f"unknown pooling mode {mode!r}")


def temporal_pool_backward(grad_out: Array, cache: tuple) -> Array:
    mode, shape, idx = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (shape[1],):
        raise ValueError(f"grad shape {grad_out.shape} does not match ({shape[1]},)")
    if mode == GAP:
        return np.tile(grad_out / shape[0], (shape[0], 1))
    grad_x = np.zeros(shape)
    grad_x[idx, np.arange(shape[1])] = grad_out
    return grad_x


@dataclass
class OptimizerState:
    """SGD hyperparameters plus one velocity buffer per parameter tensor."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[Array] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.learning_rate < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_update(
    params: Sequence[Array],
    grads: Sequence[Array],
    state: OptimizerState,
    decay: Sequence[bool] | None = None,
) -> None:
    """Classical momentum step, applied to each tensor in place:

        v <- momentum * v - lr * (g + weight_decay * p)
        p <- p + v

    ``decay`` flags which tensors receive weight decay; biases opt out by
    passing False. Velocity buffers are created lazily on first use.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if decay is None:
        decay = [True] * len(params)
    if len(decay) != len(params):
        raise ValueError("decay flags must match params")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for p, g, v, use_decay in zip(params, grads, state.velocity, decay):
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(
                f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        effective = g + state.weight_decay * p if use_decay else g
        v *= state.momentum
        v -= state.learning_rate * effective
        p += v


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_error: float
    per_param: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


LossFn = Callable[[Sequence[Array]], tuple[float, Sequence[Array]]]


def gradient_check(
    fn: LossFn,
    params: Sequence[Array],
    tolerance: float = 1e-5,
    step: float = 1e-4,
) -> GradCheckReport:
    """Check ``fn``'s analytic gradients with central finite differences.

    ``fn(params) -> (loss, grads)`` must be deterministic and must read the
    parameter arrays afresh on every call; the checker perturbs them in place
    (and restores them). The relative error for each tensor is

        ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-12)

    and the report's headline number is the max over tensors.
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    loss, grads = fn(params)
    if not np.isfinite(loss):
        raise ValueError("loss is not finite")
    if len(grads) != len(params):
        raise ValueError(f"fn returned {len(grads)} grads for {len(params)} params")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    errors: list[float] = []
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.shape}")
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            plus, _ = fn(params)
            flat[i] = saved - step
            minus, _ = fn(params)
            flat[i] = saved
            num_flat[i] = (plus - minus) / (2.0 * step)
        denom = max(np.linalg.norm(g) + np.linalg.norm(numeric), 1e-12)
        errors.append(float(np.linalg.norm(g - numeric) / denom))
    return GradCheckReport(max(errors), errors, tolerance)
