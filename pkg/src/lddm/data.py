"""Datasets: toy video generator, clip segmentation, stratified splits, manifests.

The toy task has two classes. Class 0 is a bright Gaussian blob drifting
horizontally at constant speed; class 1 is a blob oscillating sinusoidally
along the horizontal axis. By default the class-1 blob is also vertically
elongated (``class1_elongation``), so a single frame carries a weak class cue
in the way a lesion image does; set it to 1.0 for a motion-only task.
Channels beyond the first duplicate the intensity channel.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import GeometryError, MalformedHeaderError
from .rng import derive_seed
from .video import SeedImage, VideoClip, read_video, write_video

PROVENANCES = ("real", "synthetic", "toy", "mixed")


@dataclass(frozen=True, eq=False)
class LabeledClip:
    clip: VideoClip
    label: int
    source_id: str
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class LabeledVideoDataset:
    items: tuple[LabeledClip, ...]
    provenance: str = "toy"

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        shapes = {it.clip.shape for it in items}
        if len(shapes) > 1:
            raise GeometryError(f"dataset mixes clip shapes {sorted(shapes)}")
        if any(it.label not in (0, 1) for it in items):
            raise ValueError("labels must be 0 or 1")
        ids = [it.source_id for it in items]
        if len(set(ids)) != len(ids):
            raise ValueError("source ids must be unique")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[LabeledClip]:
        return iter(self.items)

    @property
    def clips(self) -> list[VideoClip]:
        return [it.clip for it in self.items]

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [it.source_id for it in self.items]

    @property
    def geometry(self) -> tuple[int, ...] | None:
        return self.items[0].clip.shape if self.items else None

    def subset(self, indices: Iterable[int]) -> "LabeledVideoDataset":
        return LabeledVideoDataset(tuple(self.items[i] for i in indices), self.provenance)

    def concat(self, other: "LabeledVideoDataset") -> "LabeledVideoDataset":
        prov = self.provenance if self.provenance == other.provenance else "mixed"
        return LabeledVideoDataset(self.items + other.items, prov)


# ------------------------------------------------------------------- toy data


@dataclass(frozen=True)
class ToyGenParams:
    n_per_class: int
    frames: int
    height: int
    width: int
    channels: int
    blob_size: float = 1.5
    speed: float = 0.2
    amplitude: float = 3.0
    period: float = 24.0
    noise_std: float = 0.05
    class1_elongation: float = 1.6
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1 or min(self.frames, self.height, self.width, self.channels) < 1:
            raise GeometryError("counts and geometry must be positive")
        if self.channels % 2:
            raise GeometryError("channels must be even so that C/r is integral for r = 2")
        if self.blob_size <= 0 or self.noise_std < 0 or self.period <= 0 or self.class1_elongation < 1:
            raise ValueError("invalid blob, noise, period or elongation parameter")
        m = self.margin
        usable_x = self.width - 1 - 2 * m
        usable_y = self.height - 1 - 2 * m * self.class1_elongation
        if usable_x < 0 or usable_y < 0:
            raise GeometryError("blob does not fit inside the frame")
        if self.speed * (self.frames - 1) > usable_x:
            raise GeometryError("drift speed leaves the frame within the clip")
        if 2 * self.amplitude > usable_x:
            raise GeometryError("oscillation amplitude leaves the frame")

    @property
    def margin(self) -> float:
        return float(math.ceil(self.blob_size))


def drift_center(start_x: float, speed: float, direction: int, frame: float) -> float:
    return start_x + direction * speed * frame


def oscillation_center(center_x: float, amplitude: float, period: float, phase: float,
                       frame: float) -> float:
    return center_x + amplitude * math.sin(2.0 * math.pi * frame / period + phase)


def render_blob(height: int, width: int, cx: float, cy: float, sx: float, sy: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))


def toy_trajectory(params: ToyGenParams, label: int, rng: np.random.Generator) -> dict:
    """Draw the motion parameters of one toy video."""
    m = params.margin
    sy = params.blob_size * (params.class1_elongation if label == 1 else 1.0)
    cy = rng.uniform(math.ceil(sy), params.height - 1 - math.ceil(sy))
    if label == 0:
        direction = int(rng.choice([-1, 1]))
        travel = params.speed * (params.frames - 1)
        lo, hi = m, params.width - 1 - m - travel
        start = rng.uniform(lo, hi)
        if direction < 0:
            start = params.width - 1 - start
        return {"kind": "drift", "start_x": start, "direction": direction, "cy": cy, "sy": sy}
    lo = m + params.amplitude
    hi = params.width - 1 - m - params.amplitude
    return {"kind": "oscillation", "center_x": rng.uniform(lo, hi), "phase": rng.uniform(0, 2 * math.pi),
            "cy": cy, "sy": sy}


def blob_centers(params: ToyGenParams, traj: dict, n_frames: int | None = None) -> np.ndarray:
    n_frames = params.frames if n_frames is None else n_frames
    if traj["kind"] == "drift":
        return np.array([drift_center(traj["start_x"], params.speed, traj["direction"], f)
                         for f in range(n_frames)])
    return np.array([oscillation_center(traj["center_x"], params.amplitude, params.period,
                                        traj["phase"], f) for f in range(n_frames)])


def render_toy_video(params: ToyGenParams, traj: dict, rng: np.random.Generator) -> VideoClip:
    xs = blob_centers(params, traj)
    frames = np.stack([
        render_blob(params.height, params.width, x, traj["cy"], params.blob_size, traj["sy"])
        for x in xs
    ])
    if params.noise_std > 0:
        frames = frames + rng.normal(0.0, params.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return VideoClip(np.repeat(frames[..., None], params.channels, axis=-1))


def generate_toy_dataset(params: ToyGenParams, prefix: str = "toy") -> LabeledVideoDataset:
    """Generate ``n_per_class`` videos per class, interleaved by class.

    Each video draws from its own stream keyed by ``(seed, index)``.
    """
    items = []
    for i in range(2 * params.n_per_class):
        label = i % 2
        rng = np.random.default_rng(derive_seed(params.seed, i))
        traj = toy_trajectory(params, label, rng)
        clip = render_toy_video(params, traj, rng)
        items.append(LabeledClip(clip, label, f"{prefix}-{i:05d}", {"trajectory": traj}))
    return LabeledVideoDataset(tuple(items), "toy")


def generate_toy_images(params: ToyGenParams, counts: Sequence[int],
                        prefix: str = "img") -> list[tuple[SeedImage, int, str]]:
    """Labelled still frames drawn like the first frame of toy videos.

    Stands in for an image-only corpus used to seed synthesis; class sizes
    need not match.
    """
    out = []
    for label, count in enumerate(counts):
        for j in range(count):
            rng = np.random.default_rng(derive_seed(params.seed, 1_000_003, label, j))
            traj = toy_trajectory(params, label, rng)
            clip = render_toy_video(params, traj, rng)
            out.append((clip.first_frame, label, f"{prefix}-{label}-{j:05d}"))
    return out


def blob_track(clip: VideoClip, floor: float = 0.25) -> np.ndarray:
    """Intensity-weighted blob column per frame (first channel, background suppressed)."""
    f = clip.frames[..., 0].astype(np.float64)
    w = np.clip(f - floor, 0.0, None)
    cols = np.arange(f.shape[2], dtype=np.float64)
    mass = w.sum(axis=(1, 2))
    return (w.sum(axis=1) * cols).sum(axis=1) / np.maximum(mass, 1e-12)


def oracle_motion_label(clip: VideoClip, reversal: float = 1.0) -> int:
    """1 if the blob's horizontal track reverses direction by more than ``reversal`` px."""
    x = blob_track(clip)
    rise = np.max(x - np.minimum.accumulate(x))
    fall = np.max(np.maximum.accumulate(x) - x)
    return int(rise > reversal and fall > reversal)


# ------------------------------------------------------------ segmentation


def sample_indices(clip_len: int, sampled: int) -> list[int]:
    return [i * clip_len // sampled for i in range(sampled)]


def segment_and_sample(video: VideoClip, clip_len: int = 48, sampled: int = 16) -> list[VideoClip]:
    """Cut into non-overlapping ``clip_len`` windows and take ``sampled`` evenly spaced frames.

    A trailing partial window is dropped; a video shorter than one window is
    padded by repeating its last frame.
    """
    if sampled < 1 or clip_len < 1 or sampled > clip_len:
        raise ValueError(f"need 1 <= sampled <= clip_len, got sampled={sampled}, clip_len={clip_len}")
    frames = video.frames
    n = frames.shape[0]
    if n == 0:
        raise ValueError("empty video")
    if n < clip_len:
        pad = np.repeat(frames[-1:], clip_len - n, axis=0)
        frames = np.concatenate([frames, pad])
        n = clip_len
    idx = sample_indices(clip_len, sampled)
    return [VideoClip(frames[w * clip_len + np.array(idx)], video.fps) for w in range(n // clip_len)]


def segment_dataset(dataset: LabeledVideoDataset, clip_len: int = 48,
                    sampled: int = 16) -> LabeledVideoDataset:
    items = []
    for it in dataset:
        for k, clip in enumerate(segment_and_sample(it.clip, clip_len, sampled)):
            items.append(LabeledClip(clip, it.label, f"{it.source_id}#{k}",
                                     {**it.meta, "video_id": it.source_id, "window": k}))
    return LabeledVideoDataset(tuple(items), dataset.provenance)


def resize_frames(video: VideoClip, height: int, width: int) -> VideoClip:
    """Bilinear resize of every frame; aspect ratio is not preserved."""
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(np.array(video.frames)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return VideoClip.from_array(y.permute(0, 2, 3, 1).numpy(), fps=video.fps)


# ------------------------------------------------------------------ splits


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_counts(n: int, train_fraction: float) -> int:
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if n < 2:
        raise ValueError(f"a class with {n} item(s) cannot appear on both sides of a split")
    return min(max(round_half_up(n * train_fraction), 1), n - 1)


def split_dataset(dataset: LabeledVideoDataset, train_fraction: float,
                  seed: int) -> tuple[LabeledVideoDataset, LabeledVideoDataset]:
    """Class-stratified random split; each side keeps the dataset's original order."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if len(members) == 0:
            raise ValueError(f"class {cls} has no items")
        k = split_counts(len(members), train_fraction)
        train_idx.extend(rng.permutation(members)[:k].tolist())
    train_set = set(train_idx)
    train = sorted(train_set)
    test = [i for i in range(len(dataset)) if i not in train_set]
    return dataset.subset(train), dataset.subset(test)


def split_halves(dataset: LabeledVideoDataset) -> tuple[LabeledVideoDataset, LabeledVideoDataset]:
    """Deterministic class-balanced halves: alternate members of each class."""
    labels = dataset.labels
    a, b = [], []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls).tolist()
        a.extend(members[0::2])
        b.extend(members[1::2])
    return dataset.subset(sorted(a)), dataset.subset(sorted(b))


# ------------------------------------------------------------------ manifests


def write_dataset(directory: str | os.PathLike, dataset: LabeledVideoDataset,
                  manifest_name: str = "manifest.jsonl") -> Path:
    """Write every clip as ``<source_id>.lddv`` plus a JSON-lines manifest.

    Manifest rows: ``{"path", "label", "source_id", "provenance"}`` with paths
    relative to the manifest.
    """
    directory = Path(directory)
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    lines = []
    for it in dataset:
        rel = f"videos/{_safe(it.source_id)}.lddv"
        write_video(directory / rel, it.clip)
        lines.append(json.dumps({"path": rel, "label": it.label, "source_id": it.source_id,
                                 "provenance": dataset.provenance}, sort_keys=True))
    manifest = directory / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_dataset(manifest: str | os.PathLike) -> LabeledVideoDataset:
    manifest = Path(manifest)
    items, provenance = [], None
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            path, label, sid, prov = row["path"], row["label"], row["source_id"], row["provenance"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedHeaderError(f"{manifest}:{lineno}: bad manifest row ({exc})") from None
        provenance = prov if provenance in (None, prov) else "mixed"
        items.append(LabeledClip(read_video(manifest.parent / path), int(label), sid))
    return LabeledVideoDataset(tuple(items), provenance or "toy")


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
