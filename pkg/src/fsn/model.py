"""Temporal head architectures, their training steps, and serialization.

Three heads share one fully convolutional trunk recipe:

* ``FsnHead``: three dilated temporal convs with ReLU, then a kernel-3
  classifier emitting K action channels plus background. Snippet scores are
  bilinearly upsampled to frame rate and trained with dense framewise
  cross-entropy.
* ``WfsnHead``: the same trunk, but the classifier emits K channels and a
  temporal pooling stage (mean or max) reduces them to one video-level score
  vector for weakly supervised training. Prediction drops the pooling.
* ``AblationHead``: a single kernel-1 classifier, i.e. no temporal context,
  used as the contrast model for the dilated stack.

Parameters live in the layers as float64 numpy arrays; updates mutate them
in place through ``nncore.sgd_update``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data import ClipSample, WeakSample
from .nncore import (
    Array,
    ConvLayer1D,
    GAP,
    GMP,
    OptimizerState,
    as_seq,
    bilinear_upsample_1d,
    bilinear_upsample_1d_backward,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    framewise_cross_entropy,
    framewise_softmax,
    relu,
    relu_backward,
    sgd_update,
    softmax_vec,
    temporal_pool,
    temporal_pool_backward,
)


@dataclass
class ModelConfig:
    """Shared architecture hyperparameters.

    ``clip_len`` is the frame length of one training window and must be a
    multiple of ``snippet_len``; the trunk sees clip_len / snippet_len snippet
    positions and emits one score vector per position.
    """

    num_classes: int
    feature_dim: int
    hidden_channels: int = 256
    snippet_len: int = 5
    clip_len: int = 35
    dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self) -> None:
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.snippet_len < 1:
            raise ValueError(f"snippet_len must be >= 1, got {self.snippet_len}")
        if self.clip_len < self.snippet_len or self.clip_len % self.snippet_len != 0:
            raise ValueError(
                f"clip_len {self.clip_len} must be a positive multiple of "
                f"snippet_len {self.snippet_len}"
            )
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive, got {self.dilations}")

    @property
    def snippets_per_clip(self) -> int:
        return self.clip_len // self.snippet_len


@dataclass
class FsnHead:
    """Dilated conv stack plus background-aware frame classifier."""

    config: ModelConfig
    convs: list[ConvLayer1D]
    classifier: ConvLayer1D

    @property
    def num_outputs(self) -> int:
        return self.config.num_classes + 1

    @property
    def includes_background(self) -> bool:
        return True


@dataclass
class WfsnHead:
    """Weakly supervised variant: K output channels, video-level pooling."""

    config: ModelConfig
    convs: list[ConvLayer1D]
    classifier: ConvLayer1D
    pooling: str = GMP

    def __post_init__(self) -> None:
        if self.pooling not in (GAP, GMP):
            raise ValueError(f"pooling must be '{GAP}' or '{GMP}', got {self.pooling!r}")

    @property
    def num_outputs(self) -> int:
        return self.config.num_classes

    @property
    def includes_background(self) -> bool:
        return False


@dataclass
class AblationHead:
    """Kernel-1 classifier with no temporal context, background included."""

    config: ModelConfig
    classifier: ConvLayer1D

    @property
    def num_outputs(self) -> int:
        return self.config.num_classes + 1

    @property
    def includes_background(self) -> bool:
        return True


Head = Union[FsnHead, WfsnHead, AblationHead]


def head_layers(head: Head) -> list[ConvLayer1D]:
    return [*getattr(head, "convs", []), head.classifier]


def head_parameters(head: Head) -> list[Array]:
    params: list[Array] = []
    for layer in head_layers(head):
        params.extend((layer.weights, layer.bias))
    return params


def head_decay_flags(head: Head) -> list[bool]:
    """Weight decay applies to conv weights only, never to biases."""
    return [True, False] * len(head_layers(head))


def _glorot_conv(rng, in_ch: int, out_ch: int, kernel: int, dilation: int) -> ConvLayer1D:
    fan_in = in_ch * kernel
    fan_out = out_ch * kernel
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    weights = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel))
    return ConvLayer1D(weights=weights, bias=np.zeros(out_ch), dilation=dilation)


def _init_trunk(rng, config: ModelConfig) -> list[ConvLayer1D]:
    convs = []
    in_ch = config.feature_dim
    for dilation in config.dilations:
        convs.append(_glorot_conv(rng, in_ch, config.hidden_channels, 3, dilation))
        in_ch = config.hidden_channels
    return convs


def init_fsn(config: ModelConfig, seed: int) -> FsnHead:
    rng = np.random.default_rng(seed)
    convs = _init_trunk(rng, config)
    classifier = _glorot_conv(rng, config.hidden_channels, config.num_classes + 1, 3, 1)
    return FsnHead(config, convs, classifier)


def init_wfsn(config: ModelConfig, seed: int, pooling: str = GMP) -> WfsnHead:
    rng = np.random.default_rng(seed)
    convs = _init_trunk(rng, config)
    classifier = _glorot_conv(rng, config.hidden_channels, config.num_classes, 3, 1)
    return WfsnHead(config, convs, classifier, pooling)


def init_ablation(config: ModelConfig, seed: int) -> AblationHead:
    rng = np.random.default_rng(seed)
    classifier = _glorot_conv(rng, config.feature_dim, config.num_classes + 1, 1, 1)
    return AblationHead(config, classifier)


def receptive_field_snippets(head: Head) -> int:
    """Snippet positions feeding one output position: 1 + sum (k-1) * d."""
    return 1 + sum(
        (layer.kernel_size - 1) * layer.dilation for layer in head_layers(head)
    )


def receptive_field(head: Head) -> int:
    """Receptive field in frames."""
    return receptive_field_snippets(head) * head.config.snippet_len


def _stack_forward(features: Array, head: Head) -> tuple[Array, tuple]:
    """Per-position class logits from snippet descriptors."""
    x = as_seq(features)
    if x.shape[1] != head.config.feature_dim:
        raise ValueError(
            f"features have dim {x.shape[1]}, head expects {head.config.feature_dim}"
        )
    caches = []
    h = x
    for conv in getattr(head, "convs", []):
        h, conv_cache = dilated_conv1d_forward(h, conv)
        h, relu_cache = relu(h)
        caches.append((conv_cache, relu_cache))
    logits, cls_cache = dilated_conv1d_forward(h, head.classifier)
    return logits, (caches, cls_cache)


def _stack_backward(grad_logits: Array, cache: tuple) -> list[Array]:
    """Parameter gradients in ``head_parameters`` order."""
    caches, cls_cache = cache
    grad, grad_w, grad_b = dilated_conv1d_backward(grad_logits, cls_cache)
    grads = [grad_w, grad_b]
    for conv_cache, relu_cache in reversed(caches):
        grad = relu_backward(grad, relu_cache)
        grad, grad_w, grad_b = dilated_conv1d_backward(grad, conv_cache)
        grads[:0] = [grad_w, grad_b]
    return grads


def fsn_frame_logits(
    features: Array, head: Head, target_len: int | None = None
) -> tuple[Array, tuple]:
    """Pre-softmax frame scores: trunk logits upsampled to ``target_len``."""
    if isinstance(head, WfsnHead):
        raise TypeError("weak heads score positions directly, not upsampled frames")
    if target_len is None:
        target_len = head.config.clip_len
    pos_logits, stack_cache = _stack_forward(features, head)
    frame_logits, up_cache = bilinear_upsample_1d(pos_logits, target_len)
    return frame_logits, (stack_cache, up_cache)


def fsn_backward(grad_frame_logits: Array, cache: tuple) -> list[Array]:
    stack_cache, up_cache = cache
    grad_pos = bilinear_upsample_1d_backward(grad_frame_logits, up_cache)
    return _stack_backward(grad_pos, stack_cache)


def fsn_forward(features: Array, head: Head, target_len: int | None = None) -> Array:
    """Per-frame class probabilities, shape (target_len, K+1); rows sum to 1."""
    logits, _ = fsn_frame_logits(features, head, target_len)
    return framewise_softmax(logits)


def one_hot_frames(labels: Array, num_outputs: int) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_outputs:
        raise ValueError(
            f"labels must lie in [0, {num_outputs}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.size, num_outputs))
    out[np.arange(labels.size), labels] = 1.0
    return out


def fsn_loss_and_grads(
    batch: Sequence[ClipSample], head: Head
) -> tuple[float, list[Array]]:
    """Dense cross-entropy over a clip batch plus parameter gradients."""
    if not batch:
        raise ValueError("empty batch")
    config = head.config
    logits_rows = []
    caches = []
    labels_rows = []
    for clip in batch:
        if clip.labels.shape != (config.clip_len,):
            raise ValueError(
                f"clip labels have shape {clip.labels.shape}, expected "
                f"({config.clip_len},)"
            )
        if clip.features.shape[0] != config.snippets_per_clip:
            raise ValueError(
                f"clip has {clip.features.shape[0]} snippets, expected "
                f"{config.snippets_per_clip}"
            )
        logits, cache = fsn_frame_logits(clip.features, head, config.clip_len)
        logits_rows.append(logits)
        caches.append(cache)
        labels_rows.append(one_hot_frames(clip.labels, head.num_outputs))
    loss, grad = framewise_cross_entropy(
        np.stack(logits_rows), np.stack(labels_rows)
    )
    totals: list[Array] | None = None
    for sample_grad, cache in zip(grad, caches):
        grads = fsn_backward(sample_grad, cache)
        if totals is None:
            totals = grads
        else:
            for acc, g in zip(totals, grads):
                acc += g
    return loss, totals


def fsn_train_step(
    batch: Sequence[ClipSample], head: Head, optimizer: OptimizerState
) -> float:
    """One SGD step; returns the pre-update batch loss."""
    loss, grads = fsn_loss_and_grads(batch, head)
    if not np.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss is {loss}")
    sgd_update(head_parameters(head), grads, optimizer, head_decay_flags(head))
    return loss


def wfsn_position_logits(features: Array, head: WfsnHead) -> Array:
    """Pre-softmax class scores per sampled position, shape (positions, K)."""
    logits, _ = _stack_forward(features, head)
    return logits


def wfsn_forward_train(features: Array, head: WfsnHead) -> Array:
    """Video-level class probabilities: pool position logits, then softmax."""
    pooled, _ = temporal_pool(wfsn_position_logits(features, head), head.pooling)
    return softmax_vec(pooled)


def wfsn_forward_predict(features: Array, head: WfsnHead) -> Array:
    """Per-position class probabilities with the pooling stage removed."""
    return framewise_softmax(wfsn_position_logits(features, head))


def wfsn_loss_and_grads(
    batch: Sequence[WeakSample], head: WfsnHead
) -> tuple[float, list[Array]]:
    """Video-label cross-entropy averaged over the batch, plus gradients.

    Multi-label videos average the cross-entropy over their positive classes.
    """
    if not batch:
        raise ValueError("empty batch")
    num_classes = head.config.num_classes
    loss = 0.0
    totals: list[Array] | None = None
    for sample in batch:
        label = np.asarray(sample.video_label, dtype=np.float64)
        if label.shape != (num_classes,):
            raise ValueError(
                f"video label has shape {label.shape}, expected ({num_classes},)"
            )
        if not np.isin(label, (0.0, 1.0)).all() or label.sum() < 1:
            raise ValueError("video label must be multi-hot with >= 1 positive")
        pos_logits, stack_cache = _stack_forward(sample.features, head)
        pooled, pool_cache = temporal_pool(pos_logits, head.pooling)
        shifted = pooled - pooled.max()
        log_probs = shifted - np.log(np.exp(shifted).sum())
        positives = label.sum()
        loss += float(-(label * log_probs).sum() / positives)
        grad_pooled = (np.exp(log_probs) - label / positives) / len(batch)
        grads = _stack_backward(
            temporal_pool_backward(grad_pooled, pool_cache), stack_cache
        )
        if totals is None:
            totals = grads
        else:
            for acc, g in zip(totals, grads):
                acc += g
    return loss / len(batch), totals


def wfsn_train_step(
    batch: Sequence[WeakSample], head: WfsnHead, optimizer: OptimizerState
) -> float:
    loss, grads = wfsn_loss_and_grads(batch, head)
    if not np.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss is {loss}")
    sgd_update(head_parameters(head), grads, optimizer, head_decay_flags(head))
    return loss


MODEL_MAGIC = b"FSN1"
MODEL_VERSION = 1
_HEAD_CODES = {FsnHead: 0, WfsnHead: 1, AblationHead: 2}
_POOL_CODES = {GAP: 0, GMP: 1}
_MODEL_HEADER = struct.Struct("<4sIBB5I")
_LAYER_ENTRY = struct.Struct("<4I")


def save_model(head: Head, path) -> None:
    """Serialize a head bit-exactly: header, layer table, float64 payload."""
    config = head.config
    kind = _HEAD_CODES[type(head)]
    pooling = _POOL_CODES[getattr(head, "pooling", GMP)]
    layers = head_layers(head)
    blob = [
        _MODEL_HEADER.pack(
            MODEL_MAGIC,
            MODEL_VERSION,
            kind,
            pooling,
            config.num_classes,
            config.feature_dim,
            config.hidden_channels,
            config.snippet_len,
            config.clip_len,
        ),
        struct.pack("<I", len(layers)),
    ]
    for layer in layers:
        blob.append(
            _LAYER_ENTRY.pack(
                layer.out_channels, layer.in_channels, layer.kernel_size, layer.dilation
            )
        )
    for layer in layers:
        blob.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        blob.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_model(path, expected_config: ModelConfig | None = None) -> Head:
    """Read a head back; optionally cross-check against an expected config."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MODEL_HEADER.size + 4:
        raise ValueError(f"{path}: truncated model file")
    magic, version, kind, pooling, num_classes, feature_dim, hidden, snippet_len, clip_len = (
        _MODEL_HEADER.unpack_from(raw)
    )
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    kinds = {code: cls for cls, code in _HEAD_CODES.items()}
    pools = {code: mode for mode, code in _POOL_CODES.items()}
    if kind not in kinds:
        raise ValueError(f"{path}: unknown head kind {kind}")
    if pooling not in pools:
        raise ValueError(f"{path}: unknown pooling code {pooling}")
    (layer_count,) = struct.unpack_from("<I", raw, _MODEL_HEADER.size)
    offset = _MODEL_HEADER.size + 4
    shapes = []
    for _ in range(layer_count):
        if offset + _LAYER_ENTRY.size > len(raw):
            raise ValueError(f"{path}: truncated layer table")
        shapes.append(_LAYER_ENTRY.unpack_from(raw, offset))
        offset += _LAYER_ENTRY.size
    payload = sum(out * inp * k + out for out, inp, k, _ in shapes) * 8
    if len(raw) - offset != payload:
        raise ValueError(
            f"{path}: payload is {len(raw) - offset} bytes, layer table implies {payload}"
        )
    layers = []
    for out, inp, k, dilation in shapes:
        w_bytes = out * inp * k * 8
        weights = np.frombuffer(raw, dtype="<f8", count=out * inp * k, offset=offset)
        offset += w_bytes
        bias = np.frombuffer(raw, dtype="<f8", count=out, offset=offset)
        offset += out * 8
        layers.append(
            ConvLayer1D(
                weights=weights.reshape(out, inp, k).copy(),
                bias=bias.copy(),
                dilation=dilation,
            )
        )
    head_cls = kinds[kind]
    trunk, classifier = layers[:-1], layers[-1]
    expected_out = num_classes if head_cls is WfsnHead else num_classes + 1
    if classifier.out_channels != expected_out:
        raise ValueError(
            f"{path}: classifier emits {classifier.out_channels} channels, "
            f"header implies {expected_out}"
        )
    chain = feature_dim
    for layer in layers:
        if layer.in_channels != chain:
            raise ValueError(
                f"{path}: layer expects {layer.in_channels} channels, gets {chain}"
            )
        chain = layer.out_channels
    config = ModelConfig(
        num_classes=num_classes,
        feature_dim=feature_dim,
        hidden_channels=hidden,
        snippet_len=snippet_len,
        clip_len=clip_len,
        dilations=tuple(layer.dilation for layer in trunk) or (1, 2, 4),
    )
    if expected_config is not None:
        if expected_config.num_classes != num_classes:
            raise ValueError(
                f"{path}: model was trained with {num_classes} classes, "
                f"config asks for {expected_config.num_classes}"
            )
        if expected_config.feature_dim != feature_dim:
            raise ValueError(
                f"{path}: model expects dim {feature_dim}, "
                f"config asks for {expected_config.feature_dim}"
            )
    if head_cls is AblationHead:
        if trunk:
            raise ValueError(f"{path}: ablation head cannot carry trunk layers")
        return AblationHead(config, classifier)
    if not trunk:
        raise ValueError(f"{path}: missing trunk layers")
    if head_cls is WfsnHead:
        return WfsnHead(config, trunk, classifier, pools[pooling])
    return FsnHead(config, trunk, classifier)
