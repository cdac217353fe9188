"""Convert small sequential torch CNNs into the portable model directory
(manifest.json + weights.bin, little-endian float32) and emit golden
forward-pass traces (trace.json + trace.bin) for cross-implementation
validation.

Supported backbone layers: Conv2d, BatchNorm2d (evaluation-mode running
statistics), ReLU, LeakyReLU, MaxPool2d. The head is either a Linear applied
after global average pooling (classifier) or an optional L2 normalization of
the pooled vector (embedding).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import UnsupportedLayer

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A sequential backbone plus head description, ready for export."""
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    backbone: nn.Sequential
    head: nn.Linear | None = None  # None -> embedding head
    l2_normalize: bool = field(default=False)  # embedding heads only


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    torch.save(
        {
            "name": ckpt.name,
            "input_shape": list(ckpt.input_shape),
            "backbone": ckpt.backbone,
            "head": ckpt.head,
            "l2_normalize": ckpt.l2_normalize,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(
        name=str(blob["name"]),
        input_shape=tuple(int(d) for d in blob["input_shape"]),
        backbone=blob["backbone"],
        head=blob["head"],
        l2_normalize=bool(blob.get("l2_normalize", False)),
    )


def _pair(v) -> list[int]:
    if isinstance(v, (tuple, list)):
        return [int(v[0]), int(v[1])]
    return [int(v), int(v)]


def _tensor_f32(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")


class _BlobWriter:
    def __init__(self) -> None:
        self.blob = bytearray()

    def put(self, t: torch.Tensor) -> dict:
        arr = _tensor_f32(t)
        offset = len(self.blob)
        self.blob.extend(arr.tobytes())
        return {"offset": offset, "shape": list(arr.shape)}


def _layer_entry(module: nn.Module, writer: _BlobWriter, idx: int) -> dict:
    if isinstance(module, nn.Conv2d):
        if module.groups != 1 or any(d != 1 for d in _pair(module.dilation)):
            raise UnsupportedLayer(f"layer {idx}: grouped/dilated Conv2d")
        bias = module.bias
        if bias is None:
            bias = torch.zeros(module.out_channels)
        return {
            "kind": "conv2d",
            "out_channels": int(module.out_channels),
            "in_channels": int(module.in_channels),
            "kernel": _pair(module.kernel_size),
            "stride": _pair(module.stride),
            "padding": _pair(module.padding),
            "tensors": {"weights": writer.put(module.weight), "bias": writer.put(bias)},
        }
    if isinstance(module, nn.BatchNorm2d):
        if module.running_mean is None or module.running_var is None:
            raise UnsupportedLayer(f"layer {idx}: BatchNorm2d without running statistics")
        c = module.num_features
        scale = module.weight if module.affine else torch.ones(c)
        shift = module.bias if module.affine else torch.zeros(c)
        return {
            "kind": "batchnorm2d",
            "epsilon": float(module.eps),
            "tensors": {
                "scale": writer.put(scale),
                "shift": writer.put(shift),
                "running_mean": writer.put(module.running_mean),
                "running_var": writer.put(module.running_var),
            },
        }
    if isinstance(module, nn.ReLU):
        return {"kind": "relu"}
    if isinstance(module, nn.LeakyReLU):
        return {"kind": "leakyrelu", "negative_slope": float(module.negative_slope)}
    if isinstance(module, nn.MaxPool2d):
        if _pair(module.padding) != [0, 0] or any(d != 1 for d in _pair(module.dilation)):
            raise UnsupportedLayer(f"layer {idx}: padded/dilated MaxPool2d")
        stride = module.stride if module.stride is not None else module.kernel_size
        return {
            "kind": "maxpool2d",
            "kernel": _pair(module.kernel_size),
            "stride": _pair(stride),
        }
    raise UnsupportedLayer(f"layer {idx}: {type(module).__name__}")


def export_model(ckpt: Checkpoint, out_dir: str | Path) -> None:
    """Write the portable model directory for a checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = _BlobWriter()
    layers = [
        _layer_entry(m, writer, i + 1) for i, m in enumerate(ckpt.backbone.children())
    ]
    if ckpt.head is not None:
        if not isinstance(ckpt.head, nn.Linear):
            raise UnsupportedLayer(f"head: {type(ckpt.head).__name__}")
        bias = ckpt.head.bias
        if bias is None:
            bias = torch.zeros(ckpt.head.out_features)
        head = {
            "kind": "classifier",
            "tensors": {
                "fc_weights": writer.put(ckpt.head.weight),
                "fc_bias": writer.put(bias),
            },
        }
    else:
        head = {"kind": "embedding", "l2_normalize": ckpt.l2_normalize}
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ckpt.name,
        "input_shape": list(ckpt.input_shape),
        "layers": layers,
        "head": head,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    (out_dir / "weights.bin").write_bytes(bytes(writer.blob))


def _forward_boundaries(ckpt: Checkpoint, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Evaluation-mode forward pass collecting the activation after each
    backbone layer, then the head output."""
    ckpt.backbone.eval()
    acts = []
    with torch.no_grad():
        a = x
        for module in ckpt.backbone.children():
            a = module(a)
            acts.append(a)
        pooled = a.mean(dim=(2, 3))
        if ckpt.head is not None:
            ckpt.head.eval()
            out = ckpt.head(pooled)
        elif ckpt.l2_normalize:
            out = pooled / torch.linalg.vector_norm(pooled, dim=1, keepdim=True)
        else:
            out = pooled
    return acts, out


def export_golden_trace(ckpt: Checkpoint, x: np.ndarray, out_dir: str | Path) -> None:
    """Write trace.json + trace.bin for one preprocessed input (C, H, W).

    The trace records the input, the activation after every backbone layer
    (same ordering as the manifest), and the head output, all as contiguous
    little-endian float32 in trace.bin.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x32 = np.ascontiguousarray(x, dtype="<f4")
    if x32.shape != tuple(ckpt.input_shape):
        raise ValueError(f"input is {x32.shape}, checkpoint expects {ckpt.input_shape}")
    acts, out = _forward_boundaries(ckpt, torch.from_numpy(x32.copy())[None])

    blob = bytearray()

    def put(arr: np.ndarray) -> dict:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        offset = len(blob)
        blob.extend(arr.tobytes())
        return {"offset": offset, "shape": list(arr.shape)}

    boundaries = [put(x32)]
    boundaries += [put(a[0].numpy()) for a in acts]
    out_np = out[0].numpy()
    index = {
        "model": ckpt.name,
        "dtype": "<f4",
        "boundaries": boundaries,
        "output": put(out_np),
        "head": "classifier" if ckpt.head is not None else "embedding",
    }
    if ckpt.head is not None:
        index["predicted_class"] = int(np.argmax(out_np))
        index["score"] = float(np.max(out_np))
    (out_dir / "trace.bin").write_bytes(bytes(blob))
    (out_dir / "trace.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", "utf-8"
    )
