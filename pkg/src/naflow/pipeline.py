"""End-to-end operations behind the service endpoints: load, preprocess,
trace, flow generation with atomic file output, verification, and
neuron-time accounting."""
from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .attribution import seed_class_score, seed_similarity
from .errors import FormatError
from .flow import AttentionFlowResult, build_flow, montage, render_heatmap
from .forward import forward_trace, predict
from .images import load_input, load_support_vector, write_ppm
from .model import ClassifierHead, ModelGraph, load_model
from .nabp import compute_retention, count_neuron_times
from .verify import run_all


def load_model_dir(model_dir: str) -> ModelGraph:
    path = Path(model_dir)
    if not path.is_dir():
        raise FormatError(f"model directory not found: {path}")
    return load_model(path)


def run_predict(model_dir: str, image: str, target: int | None = None) -> dict:
    model = load_model_dir(model_dir)
    x, _ = load_input(image, model.input_shape)
    trace = forward_trace(model, x)
    if isinstance(model.head, ClassifierHead):
        cls, score = predict(trace, model.head, target)
        return {
            "kind": "classifier",
            "predicted_class": cls,
            "score": score,
            "scores": trace.output.tolist(),
        }
    feature = predict(trace, model.head)
    return {"kind": "embedding", "feature": feature.tolist()}


def _write_flow_files(
    flow: AttentionFlowResult, base: np.ndarray, out_dir: Path, columns: int
) -> list[str]:
    """Render overlays, montage, and the raw map dump into out_dir atomically:
    everything goes to a temp directory first, then moves in one pass."""
    parent = out_dir.parent if out_dir.parent != Path("") else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".naflow-", dir=parent))
    try:
        files = []
        tiles = []
        for amap in flow.maps:
            overlay = render_heatmap(amap.normalized, base)
            tiles.append(overlay)
            name = f"layer_{amap.layer:03d}.ppm"
            write_ppm(tmp / name, overlay)
            files.append(name)
        write_ppm(tmp / "montage.ppm", montage(tiles, columns))
        files.append("montage.ppm")

        blob = bytearray()
        index = []
        for amap in flow.maps:
            raw32 = np.ascontiguousarray(amap.raw, dtype="<f4")
            norm32 = np.ascontiguousarray(amap.normalized, dtype="<f4")
            entry = {
                "layer": amap.layer,
                "raw_shape": list(amap.raw.shape),
                "raw_offset": len(blob),
                "normalized_shape": list(amap.normalized.shape),
            }
            blob.extend(raw32.tobytes())
            entry["normalized_offset"] = len(blob)
            blob.extend(norm32.tobytes())
            diag = flow.diagnostics.get(amap.layer)
            if diag is not None:
                entry["diagnostics"] = {
                    "fallback": diag.fallback,
                    "substituted": diag.substituted,
                    "residual": diag.residual,
                }
            index.append(entry)
        (tmp / "maps.bin").write_bytes(bytes(blob))
        (tmp / "maps.json").write_text(
            json.dumps(
                {
                    "model": flow.model_name,
                    "seed": flow.seed_kind,
                    "dtype": "<f4",
                    "maps": index,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            "utf-8",
        )
        files.extend(["maps.json", "maps.bin"])
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in files:
            shutil.move(str(tmp / name), str(out_dir / name))
        return files
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def run_flow(
    model_dir: str,
    image: str,
    out_dir: str,
    target: int | None = None,
    support_path: str | None = None,
    columns: int = 4,
) -> dict:
    if (target is None) == (support_path is None):
        raise FormatError("flow needs exactly one of a target class or a support vector")
    model = load_model_dir(model_dir)
    x, base = load_input(image, model.input_shape)
    trace = forward_trace(model, x)
    if target is not None:
        if not isinstance(model.head, ClassifierHead):
            raise FormatError("--class requires a classifier head")
        seed = seed_class_score(model, trace, target)
        seed_kind = f"class:{target}"
    else:
        support = load_support_vector(support_path)
        seed = seed_similarity(model, trace, support)
        seed_kind = "similarity"
    flow = build_flow(model, trace, seed, seed_kind)
    files = _write_flow_files(flow, base, Path(out_dir), columns)
    return {
        "layers": model.num_layers,
        "seed": seed_kind,
        "files": files,
        "out_dir": str(out_dir),
    }


def run_verify(model_dir: str, seed: int = 42) -> dict:
    model = load_model_dir(model_dir)
    checks = run_all(model, seed)
    return {
        "passed": bool(all(c.passed for c in checks)),
        "checks": [
            {
                "name": c.name,
                "passed": bool(c.passed),
                "residual": float(c.residual),
                "detail": c.detail,
            }
            for c in checks
        ],
    }


def run_count(model_dir: str, image: str, layer: int) -> dict:
    model = load_model_dir(model_dir)
    if not 1 <= layer <= model.num_layers:
        raise FormatError(f"layer {layer} out of range 1..{model.num_layers}")
    x, _ = load_input(image, model.input_shape)
    trace = forward_trace(model, x)
    retention = compute_retention(model, trace)
    report = count_neuron_times(model, trace, layer, retention)
    return {
        "layer": report.layer,
        "kind": model.layers[layer - 1].kind,
        "total": report.total_neuron_times,
        "decision": report.decision_neuron_times,
        "abandoned": report.abandoned_neuron_times,
        "distinct": report.distinct_decision_neurons,
    }
