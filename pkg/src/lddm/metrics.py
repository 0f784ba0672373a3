"""Generative-quality metrics over video corpora.

Fréchet distances compare Gaussian fits of extractor features; which
extractor is plugged in decides the role (clip features for an FVD-style
score, frame-difference features for a dynamics-only score). The patch
distance compares channel-normalised convolutional feature maps frame by
frame, and the diversity score is the mean pairwise feature distance.

A corpus must hold at least ``max(2, feature_dim)`` clips; smaller corpora are
rejected rather than regularised beyond the fixed diagonal shrinkage.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GeometryError
from .rng import seeded_init
from .video import VideoClip, clips_to_tensor

COV_SHRINKAGE = 1e-6


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise GeometryError(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("statistics must be finite")
        if not np.allclose(cov, cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance must be symmetric")
        if mean.size and np.linalg.eigvalsh(cov).min() < -1e-8:
            raise ValueError("covariance must be positive semi-definite")
        if self.count < 2:
            raise ValueError("need at least two samples")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def fit(cls, features: np.ndarray, shrinkage: float = COV_SHRINKAGE) -> "GaussianStats":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need a [n >= 2, d] feature matrix, got shape {f.shape}")
        cov = np.atleast_2d(np.cov(f, rowvar=False))
        cov = 0.5 * (cov + cov.T) + shrinkage * np.eye(f.shape[1])
        return cls(f.mean(axis=0), cov, f.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the cross term is the sum of square roots of the eigenvalues
    of ``S_a^{1/2} S_b S_a^{1/2}`` (similar to ``S_a S_b``), with negative
    eigenvalues clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise GeometryError(f"dimension mismatch {a.mean.size} vs {b.mean.size}")
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.covariance)
    inner = sa @ b.covariance @ sa
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    return max(value, 0.0)


# ------------------------------------------------------------ extractors


class FeatureExtractor(Protocol):
    descriptor: str
    dim: int

    def __call__(self, clips: Sequence[VideoClip]) -> np.ndarray: ...


class ClassifierFeatures:
    """Penultimate-layer features of a trained clip classifier.

    ``mode="clip"`` embeds the clip itself; ``mode="frame_diff"`` embeds the
    temporal differences ``x[f+1] - x[f]``, which are identically zero for a
    static clip.
    """

    def __init__(self, model, mode: str = "clip", batch: int = 64):
        if mode not in ("clip", "frame_diff"):
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model.eval()
        self.mode = mode
        self.batch = batch
        self.dim = model.feature_dim
        what = "clips" if mode == "clip" else "frame differences"
        self.descriptor = f"toy-classifier penultimate layer on {what}"

    @torch.no_grad()
    def __call__(self, clips: Sequence[VideoClip]) -> np.ndarray:
        x = clips_to_tensor(clips, next(self.model.parameters()).dtype)
        if self.mode == "frame_diff":
            x = x[:, :, 1:] - x[:, :, :-1]
        out = [self.model.embed(x[i:i + self.batch]) for i in range(0, len(x), self.batch)]
        return torch.cat(out).double().numpy()


class RandomConvPatchFeatures(nn.Module):
    """Frozen, randomly initialised 2D convolutions applied frame by frame."""

    def __init__(self, channels: int, width: int = 16, layers: int = 2, seed: int = 0):
        super().__init__()
        self.seed = seed
        with seeded_init(seed):
            mods = []
            cin = channels
            for _ in range(layers):
                mods += [nn.Conv2d(cin, width, 3, padding=1), nn.SiLU()]
                cin = width
            self.net = nn.Sequential(*mods)
        for p in self.parameters():
            p.requires_grad_(False)
        self.descriptor = f"random frozen conv features (width={width}, layers={layers}, seed={seed})"

    @torch.no_grad()
    def patch_features(self, clip: VideoClip) -> torch.Tensor:
        """``[frames, K, H, W]`` features, unit-normalised along ``K``."""
        x = torch.from_numpy(np.array(clip.frames)).permute(0, 3, 1, 2).double()
        f = self.net.double()(x)
        return f / (f.norm(dim=1, keepdim=True) + 1e-10)


# ---------------------------------------------------------------- metrics


def _min_corpus(dim: int) -> int:
    return max(2, dim)


def corpus_stats(clips: Sequence[VideoClip], extractor: FeatureExtractor) -> GaussianStats:
    if len(clips) < _min_corpus(extractor.dim):
        raise ValueError(
            f"corpus of {len(clips)} clips is too small for {extractor.dim}-D features "
            f"(need >= {_min_corpus(extractor.dim)})"
        )
    return GaussianStats.fit(extractor(clips))


def corpus_distance(real: Sequence[VideoClip], generated: Sequence[VideoClip],
                    extractor: FeatureExtractor) -> float:
    real, generated = list(real), list(generated)
    shapes = {c.shape for c in real} | {c.shape for c in generated}
    if len(shapes) > 1:
        raise GeometryError(f"corpora mix clip shapes {sorted(shapes)}")
    return frechet_distance(corpus_stats(real, extractor), corpus_stats(generated, extractor))


def perceptual_patch_distance(a: VideoClip, b: VideoClip, extractor: RandomConvPatchFeatures) -> float:
    """Mean over frames and pixel positions of the distance between normalised feature vectors."""
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    fa, fb = extractor.patch_features(a), extractor.patch_features(b)
    return float(((fa - fb) ** 2).sum(dim=1).sqrt().mean())


def diversity_score(videos: Sequence[VideoClip], extractor: FeatureExtractor) -> float:
    """Mean Euclidean feature distance over all unordered pairs."""
    videos = list(videos)
    if len(videos) < 2:
        raise ValueError("diversity needs at least two videos")
    f = np.asarray(extractor(videos), dtype=np.float64)
    dists = [np.linalg.norm(f[i] - f[j]) for i, j in itertools.combinations(range(len(f)), 2)]
    return float(np.mean(np.sort(dists)))
