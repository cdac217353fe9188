"""Attention-flow assembly and rendering.

One attention map per backbone layer: the channel-summed product of the
importance coefficients with the back-propagated feature map, clamped at
zero, kept at native resolution, then upsampled to the input size and
min-max normalized for display.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attribution import CoefficientStack, cascade_coefficients
from .errors import OutOfRange, ShapeMismatch
from .forward import ForwardTrace
from .model import ModelGraph
from .nabp import BpfmStack, SolveDiagnostics, backprop_feature_maps
from .tensor import bilinear_upsample

# value -> RGB anchors of the display colormap (blue -> cyan -> green ->
# yellow -> red), fixed for bit-exact reproducibility
COLOR_ANCHORS = (
    (0.00, (0, 0, 255)),
    (0.25, (0, 255, 255)),
    (0.50, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
)


@dataclass(frozen=True)
class AttentionMap:
    layer: int
    raw: np.ndarray  # (H^l, W^l), nonnegative
    normalized: np.ndarray  # (H_in, W_in) in [0, 1]


@dataclass(frozen=True)
class AttentionFlowResult:
    model_name: str
    seed_kind: str  # "class:<c>" or "similarity"
    maps: tuple[AttentionMap, ...]
    diagnostics: dict[int, SolveDiagnostics]
    bpfm: BpfmStack
    coefficients: CoefficientStack


def worker_count() -> int:
    try:
        return max(0, int(os.environ.get("NAFLOW_THREADS", "0")))
    except ValueError:
        return 0


def layer_attention_unclamped(lam: np.ndarray, bpfm: np.ndarray) -> np.ndarray:
    if lam.shape != bpfm.shape:
        raise ShapeMismatch(f"coefficients {lam.shape} vs BPFM {bpfm.shape}")
    return (lam * bpfm).sum(axis=0)


def layer_attention(lam: np.ndarray, bpfm: np.ndarray) -> np.ndarray:
    return np.maximum(layer_attention_unclamped(lam, bpfm), 0.0)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    lo = raw.min()
    hi = raw.max()
    if hi - lo == 0.0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def build_flow(
    model: ModelGraph,
    trace: ForwardTrace,
    seed: np.ndarray,
    seed_kind: str = "class",
) -> AttentionFlowResult:
    bpfm = backprop_feature_maps(model, trace)
    coeffs = cascade_coefficients(model, trace, seed)
    in_h, in_w = model.input_shape[1], model.input_shape[2]

    def make_map(l: int) -> AttentionMap:
        raw = layer_attention(coeffs.coefficients[l], bpfm.maps[l])
        normalized = normalize_map(bilinear_upsample(raw, in_h, in_w))
        return AttentionMap(layer=l, raw=raw, normalized=normalized)

    layers = range(1, model.num_layers + 1)
    workers = worker_count()
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = tuple(pool.map(make_map, layers))
    else:
        maps = tuple(make_map(l) for l in layers)
    return AttentionFlowResult(
        model_name=model.name,
        seed_kind=seed_kind,
        maps=maps,
        diagnostics=bpfm.diagnostics,
        bpfm=bpfm,
        coefficients=coeffs,
    )


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.uint8)


def colormap(map01: np.ndarray) -> np.ndarray:
    """Piecewise-linear 5-anchor colormap; input in [0, 1], output uint8
    (H, W, 3)."""
    v = np.asarray(map01, dtype=np.float64)
    if v.min() < 0.0 or v.max() > 1.0:
        raise OutOfRange(f"values outside [0, 1]: [{v.min()}, {v.max()}]")
    rgb = np.zeros((*v.shape, 3))
    for (v0, c0), (v1, c1) in zip(COLOR_ANCHORS[:-1], COLOR_ANCHORS[1:]):
        sel = (v >= v0) & (v <= v1)
        t = np.zeros_like(v)
        t[sel] = (v[sel] - v0) / (v1 - v0)
        for ch in range(3):
            rgb[..., ch][sel] = c0[ch] + t[sel] * (c1[ch] - c0[ch])
    return _round_half_up(rgb)


def render_heatmap(map01: np.ndarray, base: np.ndarray | None = None) -> np.ndarray:
    """Heatmap image; with a base image (uint8 HxWx3) composite
    0.5*base + 0.5*heat per channel, rounded half-up."""
    heat = colormap(map01)
    if base is None:
        return heat
    if base.shape != heat.shape:
        raise ShapeMismatch(f"base {base.shape} vs heat {heat.shape}")
    return _round_half_up(0.5 * base.astype(np.float64) + 0.5 * heat.astype(np.float64))


def montage(tiles: list[np.ndarray], columns: int) -> np.ndarray:
    """Row-major grid of equally sized RGB tiles with 2-pixel black gutters
    (no outer border); short last rows are padded with black tiles."""
    if not tiles:
        raise ValueError("montage needs at least one tile")
    columns = max(1, min(columns, len(tiles)))
    th, tw, _ = tiles[0].shape
    rows = -(-len(tiles) // columns)
    gutter = 2
    out = np.zeros(
        (rows * th + (rows - 1) * gutter, columns * tw + (columns - 1) * gutter, 3),
        dtype=np.uint8,
    )
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        y = r * (th + gutter)
        x = c * (tw + gutter)
        out[y:y + th, x:x + tw] = tile
    return out
