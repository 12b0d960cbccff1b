"""Reference bridge server: serves the toy or tinyconv backend over stdio.

Run as ``python -m detexplain.adapter.bridge_server --backend toy``. Reads
length-prefixed JSON requests from stdin and writes replies to stdout
until EOF; see :mod:`detexplain.adapter.bridge` for the wire format.
"""

from __future__ import annotations

import argparse
import sys

from ..errors import BridgeError, CapabilityError, DetexplainError
from .base import DetectorConfig
from .bridge import (
    PROTOCOL_VERSION,
    decode_image_png,
    detections_to_wire,
    read_frame,
    round6,
    tensor_to_wire,
    write_frame,
)
from .tinyconv import TinyConvDetector
from .toy import ToyBlobDetector


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detexplain-bridge-server", description=__doc__
    )
    parser.add_argument("--backend", choices=("toy", "tinyconv"), default="toy")
    parser.add_argument("--score-threshold", type=float, default=0.5)
    parser.add_argument(
        "--detect-only",
        action="store_true",
        help="refuse introspection even if the backend supports it",
    )
    parser.add_argument("--weight-seed", type=int, default=0)
    return parser


def _error(message: str, code: str = "internal") -> dict:
    return {"v": PROTOCOL_VERSION, "error": message, "code": code}


def _handle(request: dict, backend, detect_only: bool) -> dict:
    if request.get("v") != PROTOCOL_VERSION:
        return _error(f"unsupported protocol version {request.get('v')}", "bad_request")
    kind = request.get("kind")
    if kind == "detect":
        image = decode_image_png(request["image_png_b64"])
        dets = backend.detect([image])[0]
        return {"v": PROTOCOL_VERSION, "detections": detections_to_wire(dets)}
    if kind == "introspect":
        if detect_only or not backend.supports_introspection():
            return _error("backend is detect-only; no gradients", "capability")
        image = decode_image_png(request["image_png_b64"])
        dets = backend.detect([image])[0]
        index = int(request.get("target_index", 0))
        if not (0 <= index < len(dets)):
            return _error(f"target_index {index} out of range", "bad_request")
        result = backend.introspect(image, dets.detections[index], request["layer"])
        return {
            "v": PROTOCOL_VERSION,
            "activations": tensor_to_wire(result.activations),
            "gradients": tensor_to_wire(result.gradients),
            "target_index": index,
            "target_value": round6(result.target_value),
        }
    return _error(f"unknown request kind {kind!r}", "bad_request")


def serve(stdin, stdout, backend, detect_only: bool) -> None:
    while True:
        try:
            request = read_frame(stdin)
        except BridgeError:
            return  # garbage on the pipe; nothing sane left to reply to
        if request is None:
            return
        try:
            reply = _handle(request, backend, detect_only)
        except CapabilityError as exc:
            reply = _error(str(exc), "capability")
        except (KeyError, ValueError, DetexplainError) as exc:
            reply = _error(f"{type(exc).__name__}: {exc}", "bad_request")
        write_frame(stdout, reply)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = DetectorConfig(score_threshold=args.score_threshold)
    if args.backend == "toy":
        backend = ToyBlobDetector(config)
    else:
        backend = TinyConvDetector(config, weight_seed=args.weight_seed)
    serve(sys.stdin.buffer, sys.stdout.buffer, backend, args.detect_only)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
