"""Model checkpoints: one file, JSON header plus raw float32 parameters.

Byte layout (integers little-endian)::

    offset  size  field
    0       4     magic  b"LDDM"
    4       1     version (1)
    5       4     uint32 header length L
    9       L     UTF-8 JSON header
    9+L     P     payload: float32 little-endian tensors, back to back

Header fields::

    {"kind": "encoder" | "decoder" | "denoiser" | "classifier",
     "config": {...constructor arguments...},
     "extra": {...free-form metadata...},
     "params": [{"name", "shape", "offset", "count"}, ...],   # offsets in bytes, from payload start
     "payload_bytes": P}

Every entry of the module's ``state_dict`` (parameters and buffers) is stored.
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from typing import Any

import numpy as np
import torch
import torch.nn as nn

from .errors import MalformedHeaderError, PayloadGeometryError, TruncatedPayloadError

CKPT_MAGIC = b"LDDM"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")


def _builders():
    from .autoencoder import VideoDecoder, VideoEncoder
    from .classifier import VideoClassifier
    from .denoiser import ConditionalDenoiser
    from .video import Geometry

    return {
        "encoder": lambda c: VideoEncoder(Geometry(**c["geometry"]), c["width"], c["stages"]),
        "decoder": lambda c: VideoDecoder(Geometry(**c["geometry"]), c["width"], c["style_grid"]),
        "denoiser": lambda c: ConditionalDenoiser(c["latent_shape"], c["seed_shape"], c["num_steps"],
                                                  c["width"], c["time_dim"]),
        "classifier": lambda c: VideoClassifier(c["channels"], c["width"]),
    }


def encode_checkpoint(model: nn.Module, extra: dict | None = None) -> bytes:
    params, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        params.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": model.kind, "config": model.config(), "extra": extra or {},
                         "params": params, "payload_bytes": offset}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(chunks)


def _parse(blob: bytes) -> tuple[dict, memoryview]:
    if len(blob) < _PREFIX.size:
        raise MalformedHeaderError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    if _PREFIX.size + hlen > len(blob):
        raise MalformedHeaderError("header length exceeds file size")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"kind", "config", "extra", "params", "payload_bytes"}:
        raise MalformedHeaderError("header has missing or unexpected fields")
    if header["kind"] not in ("encoder", "decoder", "denoiser", "classifier"):
        raise MalformedHeaderError(f"unknown model kind {header['kind']!r}")
    if not isinstance(header["config"], dict) or not isinstance(header["extra"], dict):
        raise MalformedHeaderError("config and extra must be objects")
    size = header["payload_bytes"]
    if isinstance(size, bool) or not isinstance(size, int) or size < 0:
        raise MalformedHeaderError("payload_bytes must be a non-negative integer")
    if not isinstance(header["params"], list):
        raise MalformedHeaderError("params must be a list")
    expected_offset = 0
    for entry in header["params"]:
        if not isinstance(entry, dict) or set(entry) != {"name", "shape", "offset", "count"}:
            raise MalformedHeaderError("bad parameter manifest entry")
        shape, count, off = entry["shape"], entry["count"], entry["offset"]
        if not isinstance(entry["name"], str) or not isinstance(shape, list) or any(
                isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in shape):
            raise MalformedHeaderError(f"bad name or shape in entry {entry!r}")
        if isinstance(count, bool) or not isinstance(count, int) or count != math.prod(shape):
            raise MalformedHeaderError(f"count of {entry['name']} disagrees with its shape")
        if isinstance(off, bool) or not isinstance(off, int) or off != expected_offset:
            raise MalformedHeaderError(f"offset of {entry['name']} is not contiguous")
        expected_offset += 4 * count
    if expected_offset != size:
        raise MalformedHeaderError("parameter manifest does not cover payload_bytes exactly")
    payload = memoryview(blob)[_PREFIX.size + hlen:]
    if len(payload) < size:
        raise TruncatedPayloadError(f"payload holds {len(payload)} of {size} bytes")
    if len(payload) > size:
        raise PayloadGeometryError(f"payload holds {len(payload) - size} trailing bytes")
    return header, payload


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(header, state_dict)`` without building a model."""
    header, payload = _parse(blob)
    state = {}
    for entry in header["params"]:
        arr = np.frombuffer(payload, dtype="<f4", count=entry["count"], offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    return header, state


def build_model(header: dict, state: dict[str, torch.Tensor]) -> nn.Module:
    builder = _builders()[header["kind"]]
    try:
        # shape check on the meta device first, so a corrupted config cannot allocate
        with torch.device("meta"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            skeleton = builder(header["config"])
    except Exception as exc:  # noqa: BLE001 - any failure here means a bad config
        raise MalformedHeaderError(f"cannot build {header['kind']} from config: {exc}") from None
    expected = {k: tuple(v.shape) for k, v in skeleton.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        raise PayloadGeometryError(f"parameter manifest does not match a {header['kind']} built from its config")
    model = builder(header["config"])
    model.load_state_dict(state)
    return model.eval()


def save_checkpoint(path: str | os.PathLike, model: nn.Module, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, extra))


def load_checkpoint(path: str | os.PathLike, kind: str | None = None) -> tuple[nn.Module, dict[str, Any]]:
    """Load a model and its ``extra`` metadata."""
    with open(path, "rb") as fh:
        header, state = decode_checkpoint(fh.read())
    if kind is not None and header["kind"] != kind:
        raise MalformedHeaderError(f"{path} holds a {header['kind']}, expected a {kind}")
    return build_model(header, state), header["extra"]
