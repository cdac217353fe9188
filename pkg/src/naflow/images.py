"""Image and vector I/O: binary PPM (P6, 8-bit), raw planar float32 inputs,
support-vector files, and the input preprocessing pipeline."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import FormatError

# Preprocessing constants for 3-channel inputs (RGB order).
NORM_MEAN = np.array([0.485, 0.456, 0.406])
NORM_STD = np.array([0.229, 0.224, 0.225])


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into uint8 (3, H, W)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary P6 PPM")
    pos = 2
    fields = []
    while len(fields) < 3:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", data[pos:])
        if m is None:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(int(m.group(1)))
        pos += m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return np.moveaxis(img, 2, 0)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB uint8 image (H, W, 3) as binary P6."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_f32(path: str | Path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(np.float64)


def load_input(path: str | Path, input_shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Load and preprocess a model input.

    Returns (preprocessed tensor (C, H, W), display base image uint8 (H, W, 3)).
    PPM pixels are scaled into [0, 1]; raw .f32 files carry already-[0,1]
    planar pixel data of exactly the model's input shape. 3-channel inputs
    are then mean/std normalized; a PPM whose channels are identical counts
    as grayscale and feeds 1-channel models.
    """
    path = Path(path)
    c, h, w = input_shape
    if path.suffix.lower() == ".ppm":
        raw = read_ppm(path)
        if raw.shape[1:] != (h, w):
            raise FormatError(
                f"{path}: image is {raw.shape[2]}x{raw.shape[1]}, model expects {w}x{h}"
            )
        pixels = raw.astype(np.float64) / 255.0
        if c == 1:
            if not (np.array_equal(raw[0], raw[1]) and np.array_equal(raw[1], raw[2])):
                raise FormatError(f"{path}: color image fed to a 1-channel model")
            pixels = pixels[:1]
        elif c != 3:
            raise FormatError(f"{path}: model expects {c} channels, PPM provides 3")
        base = np.moveaxis(raw, 0, 2).copy()
    else:
        flat = read_f32(path)
        if flat.size == h * w and c == 3:
            # grayscale raw input replicated when the model expects 3 channels
            flat = np.tile(flat, 3)
        if flat.size != c * h * w:
            raise FormatError(
                f"{path}: raw input has {flat.size} floats, model expects {c * h * w}"
            )
        pixels = flat.reshape(c, h, w)
        vis = np.clip(pixels, 0.0, 1.0)
        if c == 1:
            vis = np.repeat(vis, 3, axis=0)
        else:
            vis = vis[:3]
        base = np.floor(np.moveaxis(vis, 0, 2) * 255.0 + 0.5).astype(np.uint8)
    if c == 3:
        pixels = (pixels - NORM_MEAN[:, None, None]) / NORM_STD[:, None, None]
    return pixels, base


def load_support_vector(path: str | Path) -> np.ndarray:
    """Support feature vector: a JSON array of numbers or a raw
    little-endian float32 file (length inferred)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            values = json.loads(path.read_text("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(values, list) or not values or not all(
            isinstance(v, (int, float)) for v in values
        ):
            raise FormatError(f"{path}: expected a non-empty JSON array of numbers")
        return np.asarray(values, dtype=np.float64)
    vec = read_f32(path)
    if vec.size == 0:
        raise FormatError(f"{path}: empty support vector file")
    return vec
