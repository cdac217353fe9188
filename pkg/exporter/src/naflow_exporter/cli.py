"""Command line for the exporter: checkpoint file -> portable model
directory, optionally with a golden trace for a raw float32 input."""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import UnsupportedLayer
from .export import export_golden_trace, export_model, load_checkpoint


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="naflow-export",
        description="Convert a torch checkpoint to the portable model format",
    )
    parser.add_argument("checkpoint", help="torch.save'd checkpoint file")
    parser.add_argument("out_dir", help="output model directory")
    parser.add_argument(
        "--trace-input",
        default=None,
        help="raw little-endian float32 input; also emit trace.json/trace.bin",
    )
    args = parser.parse_args(argv)
    try:
        ckpt = load_checkpoint(args.checkpoint)
        export_model(ckpt, args.out_dir)
        if args.trace_input is not None:
            flat = np.fromfile(args.trace_input, dtype="<f4")
            export_golden_trace(ckpt, flat.reshape(ckpt.input_shape), args.out_dir)
    except UnsupportedLayer as exc:
        print(f"error (UnsupportedLayer): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
