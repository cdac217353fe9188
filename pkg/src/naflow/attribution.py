"""Importance coefficients: seeding at the deepest boundary from a class
score or from channel contribution weights, and the backward cascade of
vector-Jacobian products through the frozen backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadClass, OrthogonalPair, ZeroVector
from .forward import ForwardTrace, head_vjp
from .model import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    EmbeddingHead,
    LeakyReLU,
    MaxPool2d,
    ModelGraph,
    ReLU,
)
from .nabp import assemble_conv_jacobian

NORM_FLOOR = 1e-12
DOT_FLOOR = 1e-12


@dataclass(frozen=True)
class CoefficientStack:
    """coefficients[b] is the importance tensor at boundary b, shaped like
    the matching BPFM (i.e. like A^{b+1})."""
    coefficients: tuple[np.ndarray, ...]


def seed_class_score(model: ModelGraph, trace: ForwardTrace, target: int) -> np.ndarray:
    """Lambda^N = dy^c / dA^{N+1} via the head VJP with a one-hot seed."""
    head = model.head
    if not isinstance(head, ClassifierHead):
        raise BadClass("class-score seeding requires a classifier head")
    num_classes = head.fc_bias.size
    if not 0 <= target < num_classes:
        raise BadClass(f"class {target} out of range 0..{num_classes - 1}")
    one_hot = np.zeros(num_classes)
    one_hot[target] = 1.0
    return head_vjp(model, trace, one_hot)


def cosine_similarity(q: np.ndarray, s: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    nq, ns = np.linalg.norm(q), np.linalg.norm(s)
    if nq < NORM_FLOOR or ns < NORM_FLOOR:
        raise ZeroVector("cosine similarity of a (near-)zero vector")
    return float(np.dot(q, s) / (nq * ns))


def contribution_weights(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """omega_d = v_d^Q v_d^S / |sum_d v_d^Q v_d^S|; the signed per-channel
    share of the similarity score. Undefined for orthogonal pairs."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if q.shape != s.shape:
        raise ValueError(f"vector lengths differ: {q.size} vs {s.size}")
    products = q * s
    denom = products.sum()
    if abs(denom) < DOT_FLOOR:
        raise OrthogonalPair(
            "query and support are orthogonal; contribution weights undefined"
        )
    return products / abs(denom)


def seed_similarity(
    model: ModelGraph, trace: ForwardTrace, support: np.ndarray
) -> np.ndarray:
    """Lambda^N for a similarity head: omega^T dV_Q/dA^{N+1}, with omega
    held constant. For a plain GAP head this is omega_d / (H*W) per cell."""
    if not isinstance(model.head, EmbeddingHead):
        raise OrthogonalPair("similarity seeding requires an embedding head")
    omega = contribution_weights(trace.output, support)
    return head_vjp(model, trace, omega)


def layer_vjp(model: ModelGraph, trace: ForwardTrace, l: int, lam: np.ndarray) -> np.ndarray:
    """Move a coefficient tensor one layer backward: lam @ J_{g_l} under the
    frozen activation pattern."""
    layer = model.layers[l - 1]
    in_shape = model.boundary_shapes[l - 1]
    flat = lam.reshape(-1)
    if isinstance(layer, Conv2d):
        cj = assemble_conv_jacobian(layer, in_shape, model.boundary_shapes[l])
        return (cj.matrix.T @ flat).reshape(in_shape)
    if isinstance(layer, BatchNorm2d):
        s = layer.scale / np.sqrt(layer.running_var + layer.epsilon)
        return lam * s[:, None, None]
    if isinstance(layer, ReLU):
        return np.where(trace.relu_masks[l], lam, 0.0)
    if isinstance(layer, LeakyReLU):
        return np.where(trace.relu_masks[l], lam, layer.negative_slope * lam)
    if isinstance(layer, MaxPool2d):
        out = np.zeros(int(np.prod(in_shape)))
        np.add.at(out, trace.pool_indices[l], flat)
        return out.reshape(in_shape)
    raise TypeError(f"unknown layer {layer!r}")


def cascade_coefficients(
    model: ModelGraph, trace: ForwardTrace, seed: np.ndarray
) -> CoefficientStack:
    n = model.num_layers
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != model.boundary_shapes[n]:
        raise ValueError(
            f"seed shape {seed.shape} != deepest boundary {model.boundary_shapes[n]}"
        )
    coeffs: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    coeffs[n] = seed
    for l in range(n, 0, -1):
        coeffs[l - 1] = layer_vjp(model, trace, l, coeffs[l])
    return CoefficientStack(coefficients=tuple(coeffs))
