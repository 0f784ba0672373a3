"""Stage 1: video autoencoder.

The encoder is a small 3D residual network that downsamples a clip by ``r`` in
time, height, width and channels. The decoder rebuilds the clip from the
latent and the first frame: a convolutional stem embeds the seed frame, the
latent is lifted back to full resolution by learned stride-2 transposed
convolutions, and every scale is modulated by AdaIN whose scale/shift come
from a pooled copy of the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .errors import GeometryError, TrainingDivergedError
from .rng import seeded_init, torch_generator
from .video import (
    Geometry,
    LatentDynamic,
    SeedImage,
    VideoClip,
    clips_to_tensor,
    latents_to_tensor,
    seeds_to_tensor,
    tensor_to_clips,
    tensor_to_latents,
)

ADAIN_EPS = 1e-5


def _log2_r(r: int) -> int:
    k = int(round(math.log2(r)))
    if 2 ** k != r:
        raise GeometryError(f"r must be a power of two, got {r}")
    return k


# ------------------------------------------------------------------ AdaIN


@dataclass(frozen=True, eq=False)
class AdaINParams:
    scale: torch.Tensor
    shift: torch.Tensor


def adain(features: torch.Tensor, params: AdaINParams, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Instance-normalise each channel over all trailing axes, then scale and shift.

    ``features`` is ``[N, C, *spatial]``; ``params.scale``/``shift`` are ``[N, C]``
    or ``[C]``. The standard deviation is the population one.
    """
    if features.dim() < 3:
        raise GeometryError("features must be [N, C, *spatial]")
    n, c = features.shape[:2]
    scale, shift = params.scale, params.shift
    if scale.shape != shift.shape or scale.shape[-1] != c:
        raise GeometryError(
            f"AdaIN params of shape {tuple(scale.shape)}/{tuple(shift.shape)} do not match {c} channels"
        )
    if scale.dim() == 1:
        scale, shift = scale.expand(n, c), shift.expand(n, c)
    axes = tuple(range(2, features.dim()))
    mu = features.mean(dim=axes, keepdim=True)
    var = ((features - mu) ** 2).mean(dim=axes, keepdim=True)
    sigma = var.clamp_min(1e-24).sqrt()
    view = (n, c) + (1,) * len(axes)
    return scale.reshape(view) * (features - mu) / (sigma + eps) + shift.reshape(view)


# ---------------------------------------------------------------- encoder


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = (nn.Conv3d(cin, cout, 1, stride=stride)
                     if stride != 1 or cin != cout else nn.Identity())

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(x)))
        return F.silu(h + self.skip(x))


class VideoEncoder(nn.Module):
    """3D ResNet mapping ``[N, C, F, H, W]`` to ``[N, C/r, F/r, H/r, W/r]``."""

    kind = "encoder"

    def __init__(self, geometry: Geometry, width: int = 16, stages: int = 4):
        super().__init__()
        k = _log2_r(geometry.r)
        if stages < k:
            raise GeometryError(f"{stages} stages cannot reach r={geometry.r}")
        self.geometry = geometry
        self.width = width
        self.stages = stages
        self.stem = nn.Conv3d(geometry.channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(
            ResBlock3d(width, width, stride=2 if i < k else 1) for i in range(stages)
        )
        self.head = nn.Conv3d(width, geometry.channels // geometry.r, 1)

    def config(self) -> dict:
        return {"geometry": self.geometry.to_dict(), "width": self.width, "stages": self.stages}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = self.geometry
        expected = (g.channels, g.frames, g.height, g.width)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise GeometryError(f"encoder expects [N, {', '.join(map(str, expected))}], got {tuple(x.shape)}")
        h = F.silu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h)


# ---------------------------------------------------------------- decoder


class StyledConv(nn.Module):
    """conv3d -> AdaIN (params from the latent style vector) -> SiLU.

    The convolution has no bias: AdaIN subtracts the per-channel mean, which
    would cancel it exactly.
    """

    def __init__(self, cin: int, cout: int, style_dim: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.affine = nn.Linear(style_dim, 2 * cout)
        nn.init.zeros_(self.affine.weight)
        with torch.no_grad():
            self.affine.bias.copy_(torch.cat([torch.ones(cout), torch.zeros(cout)]))

    def forward(self, x, style):
        h = self.conv(x)
        scale, shift = self.affine(style).chunk(2, dim=1)
        return F.silu(adain(h, AdaINParams(scale, shift)))


class VideoDecoder(nn.Module):
    """Reconstruct ``[N, C, F, H, W]`` from a latent and the seed frame ``[N, C, H, W]``."""

    kind = "decoder"

    def __init__(self, geometry: Geometry, width: int = 16, style_grid: int = 4):
        super().__init__()
        self.geometry = geometry
        self.width = width
        self.style_grid = style_grid
        self.levels = _log2_r(geometry.r)
        lt, lh, lw, lc = geometry.latent_shape
        self.pool_size = (min(lt, style_grid), min(lh, style_grid), min(lw, style_grid))
        style_dim = lc * self.pool_size[0] * self.pool_size[1] * self.pool_size[2]

        self.seed_stem = nn.Sequential(
            nn.Conv2d(geometry.channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
        )
        self.inp = StyledConv(lc + width, width, style_dim)
        self.ups = nn.ModuleList(nn.ConvTranspose3d(width, width, 2, stride=2) for _ in range(self.levels))
        self.blocks = nn.ModuleList(StyledConv(2 * width, width, style_dim) for _ in range(self.levels))
        self.out = nn.Conv3d(width, geometry.channels, 3, padding=1)

    def config(self) -> dict:
        return {"geometry": self.geometry.to_dict(), "width": self.width, "style_grid": self.style_grid}

    def _check(self, z, seed):
        g = self.geometry
        lt, lh, lw, lc = g.latent_shape
        if z.dim() != 5 or tuple(z.shape[1:]) != (lc, lt, lh, lw):
            raise GeometryError(f"decoder expects latent [N, {lc}, {lt}, {lh}, {lw}], got {tuple(z.shape)}")
        if seed.dim() != 4 or tuple(seed.shape[1:]) != (g.channels, g.height, g.width) \
                or seed.shape[0] != z.shape[0]:
            raise GeometryError(
                f"decoder expects seed [{z.shape[0]}, {g.channels}, {g.height}, {g.width}], got {tuple(seed.shape)}"
            )

    def forward(self, z: torch.Tensor, seed: torch.Tensor) -> torch.Tensor:
        self._check(z, seed)
        style = F.adaptive_avg_pool3d(z, self.pool_size).flatten(1)
        seed_feat = self.seed_stem(seed)
        frames = z.shape[2]

        def seed_at(level_frames, factor):
            s = F.avg_pool2d(seed_feat, factor) if factor > 1 else seed_feat
            return s.unsqueeze(2).expand(-1, -1, level_frames, -1, -1)

        factor = self.geometry.r
        h = self.inp(torch.cat([z, seed_at(frames, factor)], dim=1), style)
        for up, block in zip(self.ups, self.blocks):
            h = up(h)
            factor //= 2
            h = block(torch.cat([h, seed_at(h.shape[2], factor)], dim=1), style)
        return torch.sigmoid(self.out(h))


# -------------------------------------------------------- per-clip surface


@torch.no_grad()
def encode(clip: VideoClip, encoder: VideoEncoder) -> LatentDynamic:
    if not clip.matches(encoder.geometry):
        raise GeometryError(f"clip shape {clip.shape} != encoder geometry {encoder.geometry.clip_shape}")
    dtype = next(encoder.parameters()).dtype
    z = encoder(clips_to_tensor([clip], dtype))
    return tensor_to_latents(z, encoder.geometry.r)[0]


@torch.no_grad()
def decode(latent: LatentDynamic, seed: SeedImage, decoder: VideoDecoder) -> VideoClip:
    g = decoder.geometry
    if latent.shape != g.latent_shape:
        raise GeometryError(f"latent shape {latent.shape} != {g.latent_shape}")
    if seed.shape != g.seed_shape:
        raise GeometryError(f"seed shape {seed.shape} != {g.seed_shape}")
    dtype = next(decoder.parameters()).dtype
    x = decoder(latents_to_tensor([latent], dtype), seeds_to_tensor([seed], dtype))
    return tensor_to_clips(x)[0]


def reconstruction_loss(original, reconstructed) -> torch.Tensor:
    """Mean squared error; accepts clips, arrays or tensors of equal shape."""
    a = _as_tensor(original)
    b = _as_tensor(reconstructed)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, VideoClip):
        return torch.from_numpy(x.frames.astype("float64"))
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def autoencoder_loss(encoder: VideoEncoder, decoder: VideoDecoder, x: torch.Tensor) -> torch.Tensor:
    """Reconstruction loss of a channel-first batch conditioned on its first frames."""
    return reconstruction_loss(x, decoder(encoder(x), x[:, :, 0]))


# ---------------------------------------------------------------- training


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)

    def as_rows(self):
        return [{"step": i, "loss": v} for i, v in enumerate(self.losses)]


def batch_indices(n: int, config: TrainConfig, rng: torch.Generator) -> torch.Tensor:
    # sorted so that a full batch is always summed in the same order
    if config.replacement:
        idx = torch.randint(0, n, (config.batch_size,), generator=rng)
    elif config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}; "
                         "set replacement=True to sample with replacement")
    else:
        idx = torch.randperm(n, generator=rng)[: config.batch_size]
    return idx.sort().values


def check_finite(loss: torch.Tensor, step: int, what: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what}: non-finite loss {value} at step {step}")
    return value


def build_autoencoder(geometry: Geometry, seed: int, width: int = 16, stages: int = 4,
                      style_grid: int = 4) -> tuple[VideoEncoder, VideoDecoder]:
    with seeded_init(seed):
        encoder = VideoEncoder(geometry, width, stages)
        decoder = VideoDecoder(geometry, width, style_grid)
    return encoder, decoder


def train_autoencoder(clips, config: TrainConfig, rng: torch.Generator | None = None, *,
                      geometry: Geometry | None = None, width: int = 16, stages: int = 4,
                      style_grid: int = 4, models=None):
    """Jointly fit encoder and decoder on reconstruction of ``clips``.

    Returns ``(encoder, decoder, TrainingLog)``. ``models`` may supply an
    initial ``(encoder, decoder)`` pair; otherwise they are built from
    ``config.seed``.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("empty dataset")
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise GeometryError(f"clips have inconsistent shapes {sorted(shapes)}")
    if geometry is None:
        f, h, w, c = clips[0].shape
        geometry = Geometry(f, h, w, c, 2)
    elif clips[0].shape != geometry.clip_shape:
        raise GeometryError(f"clip shape {clips[0].shape} != geometry {geometry.clip_shape}")

    if models is None:
        encoder, decoder = build_autoencoder(geometry, config.seed, width, stages, style_grid)
    else:
        encoder, decoder = models
    rng = rng if rng is not None else torch_generator(config.seed)
    dtype = next(encoder.parameters()).dtype
    data = clips_to_tensor(clips, dtype)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    log = TrainingLog()
    encoder.train()
    decoder.train()
    for step in range(config.steps):
        x = data[batch_indices(len(data), config, rng)]
        loss = autoencoder_loss(encoder, decoder, x)
        log.losses.append(check_finite(loss, step, "autoencoder"))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.lr > 0:
            opt.step()
    encoder.eval()
    decoder.eval()
    return encoder, decoder, log
