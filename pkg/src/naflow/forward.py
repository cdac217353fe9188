"""Traced forward execution and head vector-Jacobian products.

The trace records every activation boundary A^1..A^{N+1}, max-pool argmax
indices (flat into the layer input), and (Leaky)ReLU sign masks; the frozen
re-application of a layer under those recorded patterns is exactly affine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadClass, DegenerateNorm, IndexOutOfRange, NonFinite, ShapeMismatch
from .model import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    EmbeddingHead,
    HeadSpec,
    LayerSpec,
    LeakyReLU,
    MaxPool2d,
    ModelGraph,
    ReLU,
)
from .tensor import check_finite

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ForwardTrace:
    # activations[b] = A^{b+1}; activations[0] is the preprocessed input
    activations: tuple[np.ndarray, ...]
    # per 1-based layer index: flat argmax indices into the layer input
    pool_indices: dict[int, np.ndarray]
    # per 1-based layer index: boolean "forward input >= 0"
    relu_masks: dict[int, np.ndarray]
    pooled: np.ndarray  # GAP vector over A^{N+1}
    output: np.ndarray  # class scores or feature vector


def conv2d_forward(layer: Conv2d, x: np.ndarray) -> np.ndarray:
    ph, pw = layer.padding
    sh, sw = layer.stride
    kh, kw = layer.kernel
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, ::sh, ::sw]  # (C_in, OH, OW, kh, kw)
    y = np.einsum("oikl,ihwkl->ohw", layer.weights, view, optimize=True)
    return y + layer.bias[:, None, None]


def batchnorm_forward(layer: BatchNorm2d, x: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
    return (layer.scale * inv)[:, None, None] * (x - layer.running_mean[:, None, None]) \
        + layer.shift[:, None, None]


def maxpool_forward(layer: MaxPool2d, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns pooled output and flat argmax indices into x (ties: smallest
    flat index, which is the first occurrence in row-major window order)."""
    c, h, w = x.shape
    kh, kw = layer.kernel
    sh, sw = layer.stride
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    view = view[:, ::sh, ::sw]  # (C, OH, OW, kh, kw)
    _, oh, ow = view.shape[:3]
    flat_win = view.reshape(c, oh, ow, kh * kw)
    arg = np.argmax(flat_win, axis=3)
    y = np.take_along_axis(flat_win, arg[..., None], axis=3)[..., 0]
    ih = np.arange(oh)[None, :, None] * sh + arg // kw
    iw = np.arange(ow)[None, None, :] * sw + arg % kw
    flat = np.arange(c)[:, None, None] * (h * w) + ih * w + iw
    return y, flat.reshape(-1)


def gather_pool(layer: MaxPool2d, indices: np.ndarray, x: np.ndarray,
                out_shape: tuple[int, int, int]) -> np.ndarray:
    """Frozen max-pool: gather x at the recorded argmax positions."""
    if np.any(indices < 0) or np.any(indices >= x.size):
        raise IndexOutOfRange("stored pool index outside the layer input")
    return x.reshape(-1)[indices].reshape(out_shape)


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Live (unfrozen) application of one backbone layer."""
    if isinstance(layer, Conv2d):
        return conv2d_forward(layer, x)
    if isinstance(layer, BatchNorm2d):
        return batchnorm_forward(layer, x)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, LeakyReLU):
        return np.where(x >= 0, x, layer.negative_slope * x)
    if isinstance(layer, MaxPool2d):
        return maxpool_forward(layer, x)[0]
    raise TypeError(f"unknown layer {layer!r}")


def frozen_layer_forward(model: ModelGraph, trace: "ForwardTrace", l: int,
                         x: np.ndarray) -> np.ndarray:
    """Apply layer g_l under the traced activation pattern (exactly affine)."""
    layer = model.layers[l - 1]
    if isinstance(layer, ReLU):
        return np.where(trace.relu_masks[l], x, 0.0)
    if isinstance(layer, LeakyReLU):
        return np.where(trace.relu_masks[l], x, layer.negative_slope * x)
    if isinstance(layer, MaxPool2d):
        return gather_pool(layer, trace.pool_indices[l], x, model.boundary_shapes[l])
    return layer_forward(layer, x)


def forward_trace(model: ModelGraph, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeMismatch(
            f"input shape {x.shape} != model input shape {model.input_shape}"
        )
    check_finite(x, "model input")
    activations = [x]
    pool_indices: dict[int, np.ndarray] = {}
    relu_masks: dict[int, np.ndarray] = {}
    for l, layer in enumerate(model.layers, start=1):
        a = activations[-1]
        if isinstance(layer, MaxPool2d):
            y, idx = maxpool_forward(layer, a)
            pool_indices[l] = idx
        elif isinstance(layer, (ReLU, LeakyReLU)):
            relu_masks[l] = a >= 0
            y = layer_forward(layer, a)
        else:
            y = layer_forward(layer, a)
        check_finite(y, f"activation after layer {l}")
        activations.append(y)
    pooled = activations[-1].mean(axis=(1, 2))
    output = _head_forward(model.head, pooled)
    return ForwardTrace(
        activations=tuple(activations),
        pool_indices=pool_indices,
        relu_masks=relu_masks,
        pooled=pooled,
        output=output,
    )


def _head_forward(head: HeadSpec, pooled: np.ndarray) -> np.ndarray:
    if isinstance(head, ClassifierHead):
        return head.fc_weights @ pooled + head.fc_bias
    if head.l2_normalize:
        norm = np.linalg.norm(pooled)
        if norm < NORM_FLOOR:
            raise DegenerateNorm("pooled feature norm below 1e-12")
        return pooled / norm
    return pooled


def predict(trace: ForwardTrace, head: HeadSpec, target: int | None = None):
    """Class score y^c for a classifier (default: argmax class) or the
    feature vector for an embedding head. Returns (class, score) or vector."""
    if isinstance(head, ClassifierHead):
        scores = trace.output
        if target is None:
            target = int(np.argmax(scores))
        if target < 0 or target >= scores.size:
            raise BadClass(f"class {target} out of range 0..{scores.size - 1}")
        return target, float(scores[target])
    return trace.output


def head_vjp(model: ModelGraph, trace: ForwardTrace, seed: np.ndarray) -> np.ndarray:
    """seed^T d(head output)/d(A^{N+1}), evaluated at the traced point.

    GAP contributes a 1/(H*W) factor per spatial cell; L2 normalization
    contributes its exact Jacobian (I - v v^T)/||u|| at the traced vector.
    """
    head = model.head
    seed = np.asarray(seed, dtype=np.float64)
    d, h, w = model.boundary_shapes[-1]
    if isinstance(head, ClassifierHead):
        if seed.shape != (head.fc_bias.size,):
            raise ShapeMismatch(f"seed length {seed.size} != {head.fc_bias.size} classes")
        g = head.fc_weights.T @ seed
    else:
        if seed.shape != (d,):
            raise ShapeMismatch(f"seed length {seed.size} != {d} channels")
        if head.l2_normalize:
            norm = np.linalg.norm(trace.pooled)
            if norm < NORM_FLOOR:
                raise DegenerateNorm("pooled feature norm below 1e-12")
            v = trace.pooled / norm
            g = (seed - np.dot(seed, v) * v) / norm
        else:
            g = seed
    lam = np.broadcast_to((g / (h * w))[:, None, None], (d, h, w)).copy()
    if not np.all(np.isfinite(lam)):
        raise NonFinite("head_vjp produced non-finite values")
    return lam
