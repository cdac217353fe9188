"""Model graph types and the portable on-disk format.

A model directory holds ``manifest.json`` (layer kinds and parameters plus
tensor offsets) and ``weights.bin`` (concatenated row-major little-endian
float32 tensors). Tensors are promoted to float64 on load.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

LAYER_KINDS = ("conv2d", "batchnorm2d", "relu", "leakyrelu", "maxpool2d")


@dataclass(frozen=True)
class Conv2d:
    kind = "conv2d"
    out_channels: int
    in_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    weights: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)


@dataclass(frozen=True)
class BatchNorm2d:
    kind = "batchnorm2d"
    scale: np.ndarray  # per-channel multiplier
    shift: np.ndarray  # per-channel additive term
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class LeakyReLU:
    kind = "leakyrelu"
    negative_slope: float


@dataclass(frozen=True)
class MaxPool2d:
    kind = "maxpool2d"
    kernel: tuple[int, int]
    stride: tuple[int, int]


LayerSpec = Conv2d | BatchNorm2d | ReLU | LeakyReLU | MaxPool2d


@dataclass(frozen=True)
class ClassifierHead:
    kind = "classifier"
    fc_weights: np.ndarray  # (num_classes, D)
    fc_bias: np.ndarray  # (num_classes,)


@dataclass(frozen=True)
class EmbeddingHead:
    kind = "embedding"
    l2_normalize: bool


HeadSpec = ClassifierHead | EmbeddingHead


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: tuple[LayerSpec, ...]
    head: HeadSpec
    # activation boundary shapes, boundary_shapes[b] = shape of A^{b+1}
    boundary_shapes: tuple[tuple[int, int, int], ...] = field(default=())

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def conv_out_extent(extent: int, pad: int, kernel: int, stride: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    c, h, w = in_shape
    if isinstance(layer, Conv2d):
        if layer.in_channels != c:
            raise ShapeError(
                f"conv expects {layer.in_channels} input channels, activation has {c}"
            )
        oh = conv_out_extent(h, layer.padding[0], layer.kernel[0], layer.stride[0])
        ow = conv_out_extent(w, layer.padding[1], layer.kernel[1], layer.stride[1])
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output collapses to {oh}x{ow}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, BatchNorm2d):
        if layer.scale.shape != (c,):
            raise ShapeError(f"batchnorm has {layer.scale.size} channels, activation has {c}")
        return in_shape
    if isinstance(layer, MaxPool2d):
        oh = conv_out_extent(h, 0, layer.kernel[0], layer.stride[0])
        ow = conv_out_extent(w, 0, layer.kernel[1], layer.stride[1])
        if oh < 1 or ow < 1:
            raise ShapeError(f"maxpool output collapses to {oh}x{ow}")
        return (c, oh, ow)
    return in_shape  # relu / leakyrelu


def propagate_shapes(
    input_shape: tuple[int, int, int], layers: tuple[LayerSpec, ...]
) -> tuple[tuple[int, int, int], ...]:
    shapes = [input_shape]
    for layer in layers:
        shapes.append(layer_output_shape(layer, shapes[-1]))
    return tuple(shapes)


def build_graph(
    name: str,
    input_shape: tuple[int, int, int],
    layers: list[LayerSpec],
    head: HeadSpec,
) -> ModelGraph:
    """Validate shape propagation and head compatibility, then freeze."""
    if len(layers) < 1:
        raise ShapeError("a model needs at least one backbone layer")
    shapes = propagate_shapes(input_shape, tuple(layers))
    out_channels = shapes[-1][0]
    if isinstance(head, ClassifierHead):
        if head.fc_weights.ndim != 2 or head.fc_weights.shape[1] != out_channels:
            raise ShapeError(
                f"fc expects {head.fc_weights.shape} weights against "
                f"{out_channels} backbone channels"
            )
        if head.fc_bias.shape != (head.fc_weights.shape[0],):
            raise ShapeError("fc bias length does not match class count")
    return ModelGraph(
        name=name,
        input_shape=input_shape,
        layers=tuple(layers),
        head=head,
        boundary_shapes=shapes,
    )


# --------------------------------------------------------------------------
# Portable format
# --------------------------------------------------------------------------

def _read_tensor(blob: bytes, entry: dict, name: str) -> np.ndarray:
    try:
        offset = int(entry["offset"])
        shape = tuple(int(d) for d in entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"tensor entry for {name!r} is malformed") from exc
    if offset < 0 or offset % 4 != 0:
        raise FormatError(f"tensor {name!r}: offset {offset} not 4-byte aligned")
    count = math.prod(shape)
    end = offset + 4 * count
    if end > len(blob):
        raise FormatError(
            f"tensor {name!r} spans [{offset}, {end}) past blob length {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.astype(np.float64).reshape(shape)


def _pair(entry: dict, key: str, name: str) -> tuple[int, int]:
    try:
        a, b = entry[key]
        a, b = int(a), int(b)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"layer {name!r}: bad {key!r}") from exc
    if a < 1 or b < 1:
        raise FormatError(f"layer {name!r}: {key!r} extents must be >= 1")
    return a, b


def _parse_layer(entry: dict, blob: bytes, idx: int) -> LayerSpec:
    kind = entry.get("kind")
    name = f"layer {idx} ({kind})"
    tensors = entry.get("tensors", {})
    if kind == "conv2d":
        kernel = _pair(entry, "kernel", name)
        stride = _pair(entry, "stride", name)
        try:
            padding = tuple(int(p) for p in entry.get("padding", [0, 0]))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{name}: bad padding") from exc
        if len(padding) != 2 or min(padding) < 0:
            raise FormatError(f"{name}: bad padding")
        w = _read_tensor(blob, tensors.get("weights", {}), f"{name}.weights")
        b = _read_tensor(blob, tensors.get("bias", {}), f"{name}.bias")
        out_c, in_c = int(entry.get("out_channels", -1)), int(entry.get("in_channels", -1))
        if w.shape != (out_c, in_c, *kernel):
            raise ShapeError(f"{name}: weights shape {w.shape} inconsistent with manifest")
        if b.shape != (out_c,):
            raise ShapeError(f"{name}: bias shape {b.shape} inconsistent with manifest")
        return Conv2d(out_c, in_c, kernel, stride, padding, w, b)
    if kind == "batchnorm2d":
        eps = float(entry.get("epsilon", 1e-5))
        scale = _read_tensor(blob, tensors.get("scale", {}), f"{name}.scale")
        shift = _read_tensor(blob, tensors.get("shift", {}), f"{name}.shift")
        mean = _read_tensor(blob, tensors.get("running_mean", {}), f"{name}.running_mean")
        var = _read_tensor(blob, tensors.get("running_var", {}), f"{name}.running_var")
        if not (scale.shape == shift.shape == mean.shape == var.shape):
            raise ShapeError(f"{name}: per-channel parameter shapes disagree")
        if np.any(var + eps <= 0):
            raise FormatError(f"{name}: running_var + epsilon must be positive")
        return BatchNorm2d(scale, shift, mean, var, eps)
    if kind == "relu":
        return ReLU()
    if kind == "leakyrelu":
        slope = float(entry.get("negative_slope", 0.01))
        if slope <= 0:
            raise FormatError(f"{name}: negative_slope must be > 0")
        return LeakyReLU(slope)
    if kind == "maxpool2d":
        return MaxPool2d(_pair(entry, "kernel", name), _pair(entry, "stride", name))
    raise FormatError(f"layer {idx}: unknown kind {kind!r}")


def _parse_head(entry: dict, blob: bytes) -> HeadSpec:
    kind = entry.get("kind")
    if kind == "classifier":
        tensors = entry.get("tensors", {})
        w = _read_tensor(blob, tensors.get("fc_weights", {}), "head.fc_weights")
        b = _read_tensor(blob, tensors.get("fc_bias", {}), "head.fc_bias")
        return ClassifierHead(w, b)
    if kind == "embedding":
        return EmbeddingHead(bool(entry.get("l2_normalize", False)))
    raise FormatError(f"unknown head kind {kind!r}")


def load_model(directory: str | Path) -> ModelGraph:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    weights_path = directory / "weights.bin"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest: {manifest_path}")
    if not weights_path.is_file():
        raise FormatError(f"missing weights blob: {weights_path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != 1:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    blob = weights_path.read_bytes()
    try:
        input_shape = tuple(int(d) for d in manifest["input_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("manifest missing a valid input_shape") from exc
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise FormatError(f"bad input_shape {input_shape}")
    raw_layers = manifest.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise FormatError("manifest must declare a non-empty layer list")
    layers = [_parse_layer(entry, blob, i + 1) for i, entry in enumerate(raw_layers)]
    head = _parse_head(manifest.get("head", {}), blob)
    return build_graph(str(manifest.get("name", directory.name)), input_shape, layers, head)


def write_model(model: ModelGraph, directory: str | Path) -> None:
    """Persist a graph in the portable format (engine-side writer; the
    exporter package emits the same layout from framework checkpoints)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()

    def put(arr: np.ndarray) -> dict:
        offset = len(blob)
        blob.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return {"offset": offset, "shape": list(arr.shape)}

    entries = []
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            entries.append({
                "kind": "conv2d",
                "out_channels": layer.out_channels,
                "in_channels": layer.in_channels,
                "kernel": list(layer.kernel),
                "stride": list(layer.stride),
                "padding": list(layer.padding),
                "tensors": {"weights": put(layer.weights), "bias": put(layer.bias)},
            })
        elif isinstance(layer, BatchNorm2d):
            entries.append({
                "kind": "batchnorm2d",
                "epsilon": layer.epsilon,
                "tensors": {
                    "scale": put(layer.scale),
                    "shift": put(layer.shift),
                    "running_mean": put(layer.running_mean),
                    "running_var": put(layer.running_var),
                },
            })
        elif isinstance(layer, ReLU):
            entries.append({"kind": "relu"})
        elif isinstance(layer, LeakyReLU):
            entries.append({"kind": "leakyrelu", "negative_slope": layer.negative_slope})
        elif isinstance(layer, MaxPool2d):
            entries.append({
                "kind": "maxpool2d",
                "kernel": list(layer.kernel),
                "stride": list(layer.stride),
            })
    if isinstance(model.head, ClassifierHead):
        head_entry = {
            "kind": "classifier",
            "tensors": {
                "fc_weights": put(model.head.fc_weights),
                "fc_bias": put(model.head.fc_bias),
            },
        }
    else:
        head_entry = {"kind": "embedding", "l2_normalize": model.head.l2_normalize}
    manifest = {
        "format_version": 1,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "layers": entries,
        "head": head_entry,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    (directory / "weights.bin").write_bytes(bytes(blob))
