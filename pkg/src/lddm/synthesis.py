"""Image-to-video synthesis: noise -> reverse diffusion -> latent -> decoder.

A :class:`SynthesisBundle` holds the decoder, the denoiser and the schedule.
It has no slot for an encoder; synthesis never needs one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .autoencoder import VideoDecoder
from .data import LabeledClip, LabeledVideoDataset
from .denoiser import ConditionalDenoiser
from .diffusion import NoiseSchedule, sample_latent
from .errors import GeometryError
from .rng import derive_seed, torch_generator
from .video import SeedImage, VideoClip, seeds_to_tensor, tensor_to_clips


@dataclass(frozen=True, eq=False, slots=True)
class SynthesisBundle:
    decoder: VideoDecoder
    denoiser: ConditionalDenoiser
    schedule: NoiseSchedule

    def __post_init__(self):
        g = self.decoder.geometry
        if tuple(self.denoiser.latent_shape) != g.latent_tensor_shape:
            raise GeometryError(
                f"denoiser latent {self.denoiser.latent_shape} != decoder latent {g.latent_tensor_shape}"
            )
        if tuple(self.denoiser.seed_shape) != (g.channels, g.height, g.width):
            raise GeometryError("denoiser and decoder disagree on the seed geometry")
        if self.denoiser.num_steps != self.schedule.T:
            raise ValueError(f"denoiser trained for T={self.denoiser.num_steps}, schedule has T={self.schedule.T}")

    @property
    def geometry(self):
        return self.decoder.geometry


@torch.no_grad()
def synthesize_video(image: SeedImage, bundle: SynthesisBundle,
                     rng: torch.Generator | None = None) -> VideoClip:
    g = bundle.geometry
    if image.shape != g.seed_shape:
        raise GeometryError(f"seed image shape {image.shape} != {g.seed_shape}")
    dtype = next(bundle.denoiser.parameters()).dtype
    x = seeds_to_tensor([image], dtype)
    z = sample_latent(bundle.denoiser, x, (1,) + g.latent_tensor_shape, bundle.schedule, rng, dtype)
    latent = bundle.denoiser.denormalize(z.values).to(next(bundle.decoder.parameters()).dtype)
    return tensor_to_clips(bundle.decoder(latent, x.to(latent.dtype)))[0]


def balanced_per_image(class_sizes: Sequence[int], target: int) -> list[int]:
    """Clips per image for each class so that every class reaches ``target``."""
    return [math.ceil(target / n) if n else 0 for n in class_sizes]


@dataclass(frozen=True, eq=False)
class SyntheticItem:
    clip: VideoClip
    label: int
    source_image_id: str
    rng_key: tuple[int, int]


def batch_synthesize(images, per_image: int, bundle: SynthesisBundle, seed: int, *,
                     balance: bool = False, target: int | None = None) -> list[SyntheticItem]:
    """Generate labelled clips from labelled seed images.

    ``images`` holds ``(SeedImage, label)`` or ``(SeedImage, label, image_id)``.
    Item ``k`` of the output is drawn from its own stream keyed by
    ``(seed, k)``, so the result does not depend on how the work is split.
    With ``balance=True`` each class gets ``target`` clips (default
    ``per_image * largest class size``); per-class counts per image are
    rounded up and the surplus trimmed from the end of that class.
    """
    images = [tuple(it) for it in images]
    if not images:
        raise ValueError("no images to synthesize from")
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    images = [it if len(it) == 3 else (it[0], it[1], f"image-{i:05d}") for i, it in enumerate(images)]

    plan: list[tuple[SeedImage, int, str]] = []
    if balance:
        labels = sorted({lab for _, lab, _ in images})
        sizes = [sum(1 for _, lab, _ in images if lab == c) for c in labels]
        target = per_image * max(sizes) if target is None else target
        counts = dict(zip(labels, balanced_per_image(sizes, target)))
        for c in labels:
            jobs = [(img, lab, iid) for img, lab, iid in images if lab == c for _ in range(counts[c])]
            plan.extend(jobs[:target])
    else:
        plan = [job for job in images for _ in range(per_image)]

    out = []
    for k, (img, label, iid) in enumerate(plan):
        key = (int(seed), k)
        clip = synthesize_video(img, bundle, torch_generator(derive_seed(*key)))
        out.append(SyntheticItem(clip, int(label), iid, key))
    return out


def as_dataset(items: Sequence[SyntheticItem]) -> LabeledVideoDataset:
    return LabeledVideoDataset(
        tuple(LabeledClip(it.clip, it.label, f"syn-{it.rng_key[0]}-{it.rng_key[1]:05d}",
                          {"source_image_id": it.source_image_id}) for it in items),
        "synthetic",
    )
