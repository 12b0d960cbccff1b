"""External-process detector bridge.

Wire protocol (version 1): each message is a 4-byte big-endian unsigned
length followed by that many bytes of UTF-8 JSON. Requests carry
``{"v": 1, "kind": "detect" | "introspect", "image_png_b64": ...}`` with
``"layer"`` and ``"target_index"`` added for introspection. Replies carry
``{"v": 1, "detections": [{"box": [x1, y1, x2, y2], "class": int,
"score": float}]}`` for detect, tensors plus ``target_value`` for
introspect, and ``{"v": 1, "error": str, "code": str}`` on failure with
code ``"capability"`` when the backend cannot serve the request kind.

Images travel as lossless 8-bit RGB PNG, base64 encoded. Box coordinates
and scores are rounded to six fractional digits before serialization, so
their 6-digit decimal representation survives the round trip bit-exactly.

One request is in flight per connection; open several adapters for
parallelism.
"""

from __future__ import annotations

import base64
import io
import json
import struct
import subprocess
from typing import BinaryIO, Sequence

import numpy as np
from PIL import Image

from ..core import Box, Detection, DetectionSet, validate_image
from ..errors import BridgeError, CapabilityError
from .base import DetectorAdapter, DetectorConfig, IntrospectionResult

PROTOCOL_VERSION = 1
_MAX_FRAME = 64 * 1024 * 1024


def write_frame(stream: BinaryIO, obj: dict) -> None:
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    stream.write(struct.pack(">I", len(payload)))
    stream.write(payload)
    stream.flush()


def read_frame(stream: BinaryIO) -> dict | None:
    """Next message, or None on clean EOF. Raises BridgeError on garbage."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise BridgeError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > _MAX_FRAME:
        raise BridgeError(f"frame of {length} bytes exceeds limit")
    payload = stream.read(length)
    if len(payload) < length:
        raise BridgeError("truncated frame payload")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeError(f"malformed frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise BridgeError("frame payload must be a JSON object")
    return obj


def encode_image_png(image: np.ndarray) -> str:
    img = validate_image(image)
    as_u8 = np.round(img * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(as_u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_png(b64: str) -> np.ndarray:
    raw = base64.b64decode(b64.encode("ascii"))
    with Image.open(io.BytesIO(raw)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def round6(value: float) -> float:
    return round(float(value), 6)


def detections_to_wire(dets: DetectionSet) -> list[dict]:
    return [
        {
            "box": [round6(v) for v in (d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)],
            "class": d.class_id,
            "score": round6(d.score),
        }
        for d in dets
    ]


def detections_from_wire(items: list[dict], image_id: str = "") -> DetectionSet:
    dets = tuple(
        Detection(
            box=Box(*map(float, item["box"])),
            class_id=int(item["class"]),
            score=float(item["score"]),
        )
        for item in items
    )
    return DetectionSet(detections=dets, image_id=image_id)


def tensor_to_wire(tensor: np.ndarray) -> dict:
    arr = np.asarray(tensor, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def tensor_from_wire(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


class BridgeAdapter(DetectorAdapter):
    """Client side of the bridge protocol, one child process per adapter."""

    def __init__(
        self,
        command: Sequence[str],
        config: DetectorConfig | None = None,
        introspectable: bool = True,
    ) -> None:
        super().__init__(config)
        self.command = list(command)
        self._introspectable = introspectable
        self._proc: subprocess.Popen | None = None

    # lifecycle -----------------------------------------------------------

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                )
            except OSError as exc:
                raise BridgeError(f"cannot start bridge {self.command}: {exc}") from exc
        return self._proc

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self) -> "BridgeAdapter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # protocol ------------------------------------------------------------

    def _request(self, obj: dict) -> dict:
        proc = self._ensure_process()
        try:
            write_frame(proc.stdin, obj)
            reply = read_frame(proc.stdout)
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"bridge process died: {exc}") from exc
        if reply is None:
            raise BridgeError("bridge closed the connection mid-request")
        if reply.get("v") != PROTOCOL_VERSION:
            raise BridgeError(f"unexpected protocol version in reply: {reply.get('v')}")
        if "error" in reply:
            if reply.get("code") == "capability":
                raise CapabilityError(reply["error"])
            raise BridgeError(f"bridge error: {reply['error']}")
        return reply

    def _detect_raw(self, image: np.ndarray) -> DetectionSet:
        """Server-side detection list, before client-side threshold filtering."""
        reply = self._request(
            {
                "v": PROTOCOL_VERSION,
                "kind": "detect",
                "image_png_b64": encode_image_png(image),
            }
        )
        if "detections" not in reply:
            raise BridgeError("detect reply lacks 'detections'")
        return detections_from_wire(reply["detections"])

    def detect(self, images: Sequence[np.ndarray]) -> list[DetectionSet]:
        self._check_batch(images)
        out = []
        for image in images:
            dets = self._detect_raw(image)
            kept = tuple(d for d in dets if d.score >= self.config.score_threshold)
            out.append(DetectionSet(detections=kept))
        return out

    def introspect(
        self, image: np.ndarray, target: Detection, layer: str
    ) -> IntrospectionResult:
        if not self._introspectable:
            raise CapabilityError("bridge configured detect-only")
        index = self._locate_target(image, target)
        reply = self._request(
            {
                "v": PROTOCOL_VERSION,
                "kind": "introspect",
                "image_png_b64": encode_image_png(image),
                "layer": layer,
                "target_index": index,
            }
        )
        for key in ("activations", "gradients", "target_value"):
            if key not in reply:
                raise BridgeError(f"introspect reply lacks {key!r}")
        return IntrospectionResult(
            activations=tensor_from_wire(reply["activations"]),
            gradients=tensor_from_wire(reply["gradients"]),
            target_index=index,
            target_value=float(reply["target_value"]),
        )

    def supports_introspection(self) -> bool:
        return self._introspectable

    def _locate_target(self, image: np.ndarray, target: Detection) -> int:
        """Index of ``target`` in the bridge's own detection order.

        Wire values are 6-decimal quantized, so compare at that precision.
        """
        dets = self._detect_raw(image)
        wanted = (
            [round6(v) for v in target.box.as_tuple()],
            target.class_id,
            round6(target.score),
        )
        for index, det in enumerate(dets):
            have = (
                [round6(v) for v in det.box.as_tuple()],
                det.class_id,
                round6(det.score),
            )
            if have == wanted:
                return index
        raise BridgeError("target detection not found among bridge detections")
