"""Command-line client for the attention-flow service.

By default the CLI talks to an in-process instance of the FastAPI app
through an ASGI transport, so no server needs to be running; `--server URL`
points it at a remote instance instead.

Exit codes: 0 success, 1 verification failure, 2 format/usage errors,
3 numeric errors, 4 orthogonal query/support pair.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import httpx

FORMAT_ERRORS = {"FormatError", "ShapeError", "BadClass"}
NUMERIC_ERRORS = {
    "NonFinite",
    "SingularMatrix",
    "RankDeficient",
    "DegenerateNorm",
    "ZeroVector",
    "IndexOutOfRange",
    "ShapeMismatch",
    "Unreachable",
    "OutOfRange",
}


def _exit_code(error_kind: str) -> int:
    if error_kind == "OrthogonalPair":
        return 4
    if error_kind in NUMERIC_ERRORS:
        return 3
    return 2


def make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=300.0)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app, raise_server_exceptions=False)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    body = resp.json()
    if resp.status_code != 200:
        kind = body.get("error_kind", "FormatError")
        message = body.get("message", str(body))
        print(f"error ({kind}): {message}", file=sys.stderr)
        sys.exit(_exit_code(kind))
    return body


def _require_exists(path: str, what: str) -> None:
    if not Path(path).exists():
        print(f"error: {what} does not exist: {path}", file=sys.stderr)
        sys.exit(2)


def cmd_run(args: argparse.Namespace) -> int:
    _require_exists(args.model_dir, "model directory")
    _require_exists(args.image, "input image")
    with make_client(args.server) as client:
        body = _post(
            client,
            "/run",
            {
                "model_dir": args.model_dir,
                "image": args.image,
                "target_class": args.target_class,
            },
        )
    if body["kind"] == "classifier":
        print(f"class {body['predicted_class']} score {body['score']:.6f}")
    else:
        print("feature " + " ".join(f"{v:.6f}" for v in body["feature"]))
    return 0


def cmd_flow(args: argparse.Namespace) -> int:
    _require_exists(args.model_dir, "model directory")
    _require_exists(args.image, "input image")
    if args.support is not None:
        _require_exists(args.support, "support vector file")
    with make_client(args.server) as client:
        body = _post(
            client,
            "/flow",
            {
                "model_dir": args.model_dir,
                "image": args.image,
                "out_dir": args.out,
                "target_class": args.target_class,
                "support_path": args.support,
                "columns": args.columns,
            },
        )
    print(f"wrote {len(body['files'])} files ({body['layers']} layers, "
          f"seed {body['seed']}) to {body['out_dir']}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    _require_exists(args.model_dir, "model directory")
    with make_client(args.server) as client:
        body = _post(
            client, "/verify", {"model_dir": args.model_dir, "seed": args.seed}
        )
    for check in body["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        extra = f"  ({check['detail']})" if check["detail"] else ""
        print(f"{status}  {check['name']}  residual={check['residual']:.3e}{extra}")
    return 0 if body["passed"] else 1


def cmd_count(args: argparse.Namespace) -> int:
    _require_exists(args.model_dir, "model directory")
    _require_exists(args.image, "input image")
    with make_client(args.server) as client:
        body = _post(
            client,
            "/count",
            {"model_dir": args.model_dir, "image": args.image, "layer": args.layer},
        )
    print(
        f"layer {body['layer']} ({body['kind']}): "
        f"total {body['total']}, decision {body['decision']}, "
        f"abandoned {body['abandoned']}, distinct {body['distinct']}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="naflow",
        description="Per-layer attention flow for small sequential CNNs",
    )
    parser.add_argument(
        "--server",
        default=None,
        help="URL of a running naflow service (default: in-process engine)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="forward pass and prediction")
    p_run.add_argument("model_dir")
    p_run.add_argument("image")
    p_run.add_argument("--class", dest="target_class", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_flow = sub.add_parser("flow", help="generate per-layer attention maps")
    p_flow.add_argument("model_dir")
    p_flow.add_argument("image")
    group = p_flow.add_mutually_exclusive_group(required=True)
    group.add_argument("--class", dest="target_class", type=int, default=None)
    group.add_argument("--support", default=None, help="support feature vector file")
    p_flow.add_argument("--out", required=True, help="output directory")
    p_flow.add_argument("--columns", type=int, default=4)
    p_flow.set_defaults(func=cmd_flow)

    p_verify = sub.add_parser("verify", help="run the self-verification suites")
    p_verify.add_argument("model_dir")
    p_verify.add_argument("--seed", type=int, default=42)
    p_verify.set_defaults(func=cmd_verify)

    p_count = sub.add_parser("count", help="neuron-time accounting for one layer")
    p_count.add_argument("model_dir")
    p_count.add_argument("image")
    p_count.add_argument("--layer", type=int, required=True)
    p_count.set_defaults(func=cmd_count)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
