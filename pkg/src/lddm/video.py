"""Clip types, geometry, and the ``.lddv`` video container.

Per-clip objects use channel-last layout ``[frames, height, width, channels]``;
batched model tensors are channel-first ``[N, C, frames, H, W]``.

Container byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"LDDV"
    4       1     version (1)
    5       4     uint32 header length L
    9       L     UTF-8 JSON header:
                  {"frames", "height", "width", "channels", "fps", "dtype": "f32le"}
    9+L     ...   payload, frame-major float32 little-endian, frames*height*width*channels values
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import (
    CorruptPayloadError,
    GeometryError,
    InvalidClipError,
    MalformedHeaderError,
    PayloadGeometryError,
    TruncatedPayloadError,
)

VIDEO_MAGIC = b"LDDV"
VIDEO_VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass(frozen=True)
class Geometry:
    frames: int
    height: int
    width: int
    channels: int
    r: int = 2

    def __post_init__(self):
        for name in ("frames", "height", "width", "channels", "r"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise GeometryError(f"{name} must be a positive integer, got {value!r}")
        for name in ("frames", "height", "width", "channels"):
            if getattr(self, name) % self.r:
                raise GeometryError(f"r={self.r} does not divide {name}={getattr(self, name)}")

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    @property
    def seed_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        """Channel-last latent shape ``[frames/r, H/r, W/r, C/r]``."""
        r = self.r
        return (self.frames // r, self.height // r, self.width // r, self.channels // r)

    @property
    def latent_tensor_shape(self) -> tuple[int, int, int, int]:
        """Channel-first latent shape used by the networks."""
        t, h, w, c = self.latent_shape
        return (c, t, h, w)

    def to_dict(self) -> dict:
        return {"frames": self.frames, "height": self.height, "width": self.width,
                "channels": self.channels, "r": self.r}


def _check_values(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidClipError(f"{what} contains NaN or Inf")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidClipError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class VideoClip:
    frames: np.ndarray
    fps: float | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.frames, dtype=np.float32)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise GeometryError(f"clip must be [frames, H, W, C], got shape {arr.shape}")
        _check_values(arr, "clip")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @classmethod
    def from_array(cls, arr, fps: float | None = None, clamp: bool = True) -> "VideoClip":
        arr = np.asarray(arr, dtype=np.float32)
        if clamp:
            if not np.all(np.isfinite(arr)):
                raise InvalidClipError("clip contains NaN or Inf")
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr, fps)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    @property
    def first_frame(self) -> "SeedImage":
        return SeedImage(self.frames[0])

    def matches(self, geometry: Geometry) -> bool:
        return self.shape == geometry.clip_shape


@dataclass(frozen=True, eq=False)
class SeedImage:
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if arr.ndim != 3:
            raise GeometryError(f"seed image must be [H, W, C], got shape {arr.shape}")
        _check_values(arr, "seed image")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)


@dataclass(frozen=True, eq=False)
class LatentDynamic:
    """Channel-last latent ``[frames/r, H/r, W/r, C/r]``."""

    values: np.ndarray
    r: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 4:
            raise GeometryError(f"latent must be 4-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidClipError("latent contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self):
        return tuple(self.values.shape)


def clips_to_tensor(clips: Iterable[VideoClip], dtype=torch.float32) -> torch.Tensor:
    """Stack clips into a channel-first batch ``[N, C, frames, H, W]``."""
    arr = np.stack([c.frames for c in clips])
    return torch.from_numpy(arr).to(dtype).permute(0, 4, 1, 2, 3).contiguous()


def tensor_to_clips(x: torch.Tensor, fps: float | None = None) -> list[VideoClip]:
    arr = x.detach().to(torch.float32).permute(0, 2, 3, 4, 1).cpu().numpy()
    return [VideoClip.from_array(a, fps=fps) for a in arr]


def seeds_to_tensor(seeds: Iterable[SeedImage], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([s.pixels for s in seeds])
    return torch.from_numpy(arr).to(dtype).permute(0, 3, 1, 2).contiguous()


def latents_to_tensor(latents: Iterable[LatentDynamic], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([z.values for z in latents])
    return torch.from_numpy(arr).to(dtype).permute(0, 4, 1, 2, 3).contiguous()


def tensor_to_latents(z: torch.Tensor, r: int) -> list[LatentDynamic]:
    arr = z.detach().to(torch.float32).permute(0, 2, 3, 4, 1).cpu().numpy()
    return [LatentDynamic(a, r) for a in arr]


def static_repeat(seed: SeedImage, frames: int) -> VideoClip:
    """A clip that repeats one frame; the zero-dynamics baseline."""
    return VideoClip(np.repeat(seed.pixels[None], frames, axis=0))


# ---------------------------------------------------------------- container


def encode_video(clip: VideoClip) -> bytes:
    f, h, w, c = clip.shape
    header = json.dumps(
        {"frames": f, "height": h, "width": w, "channels": c, "fps": clip.fps, "dtype": "f32le"},
        sort_keys=True,
    ).encode("utf-8")
    payload = clip.frames.astype("<f4", copy=False).tobytes(order="C")
    return _PREFIX.pack(VIDEO_MAGIC, VIDEO_VERSION, len(header)) + header + payload


def _parse_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < _PREFIX.size:
        raise MalformedHeaderError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != VIDEO_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VIDEO_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise MalformedHeaderError("header length exceeds file size")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    expected = {"frames", "height", "width", "channels", "fps", "dtype"}
    if set(header) != expected:
        raise MalformedHeaderError(f"header keys {sorted(header)} != {sorted(expected)}")
    for key in ("frames", "height", "width", "channels"):
        v = header[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise MalformedHeaderError(f"header field {key} must be a positive integer")
    fps = header["fps"]
    if fps is not None and (isinstance(fps, bool) or not isinstance(fps, (int, float))
                            or not math.isfinite(fps) or fps <= 0):
        raise MalformedHeaderError("fps must be null or a positive number")
    if header["dtype"] != "f32le":
        raise MalformedHeaderError(f"unsupported dtype {header['dtype']!r}")
    return header, start + hlen


def decode_video(blob: bytes) -> VideoClip:
    header, offset = _parse_header(blob)
    f, h, w, c = header["frames"], header["height"], header["width"], header["channels"]
    frame_bytes = 4 * h * w * c
    payload = len(blob) - offset
    if payload % frame_bytes:
        raise TruncatedPayloadError(
            f"payload of {payload} bytes is not a whole number of {frame_bytes}-byte frames"
        )
    if payload // frame_bytes != f:
        raise PayloadGeometryError(f"header declares {f} frames, payload holds {payload // frame_bytes}")
    arr = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(f, h, w, c)
    try:
        return VideoClip(arr.astype(np.float32), header["fps"])
    except InvalidClipError as exc:
        raise CorruptPayloadError(str(exc)) from None


def write_video(path: str | os.PathLike, clip: VideoClip) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_video(clip))


def read_video(path: str | os.PathLike, geometry: Sequence[int] | None = None) -> VideoClip:
    with open(path, "rb") as fh:
        clip = decode_video(fh.read())
    if geometry is not None and clip.shape != tuple(geometry):
        raise PayloadGeometryError(f"{path}: clip shape {clip.shape} != expected {tuple(geometry)}")
    return clip
