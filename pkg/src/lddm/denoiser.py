"""Stage 2: the conditional noise predictor and its training loop.

The network sees the noisy latent, the timestep and the seed frame. The seed
frame goes through a small convolutional stem; its features are pooled to the
latent grid and concatenated to the input (where the blob is), and a globally
pooled copy joins the sinusoidal time embedding in the per-block affine
modulation (what it looks like). Latents are standardised with dataset
statistics kept as buffers, so the checkpoint carries them.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import TrainingLog, batch_indices, check_finite
from .config import TrainConfig
from .diffusion import LatentState, NoiseSchedule, diffusion_loss, q_sample
from .errors import GeometryError
from .rng import seeded_init, torch_generator
from .video import LatentDynamic, SeedImage, latents_to_tensor, seeds_to_tensor


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class FiLMResBlock(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * channels)
        self.norm2 = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(cond).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None, None]) + shift[:, :, None, None, None]
        h = self.conv2(F.silu(h))
        return x + h


class ConditionalDenoiser(nn.Module):
    """Predict the injected noise from ``(z_t, t, seed)``.

    ``latent_shape`` is channel-first ``(C', F', H', W')``; ``seed_shape`` is
    ``(C, H, W)``. One stride-2 level is used when every latent axis is even.
    """

    kind = "denoiser"

    def __init__(self, latent_shape: Sequence[int], seed_shape: Sequence[int], num_steps: int,
                 width: int = 32, time_dim: int = 32):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.seed_shape = tuple(int(s) for s in seed_shape)
        self.num_steps = int(num_steps)
        self.width = width
        self.time_dim = time_dim
        lc, lt, lh, lw = self.latent_shape
        sc, sh, sw = self.seed_shape
        if sh % lh or sw % lw:
            raise GeometryError("seed size must be a multiple of the latent grid")
        self.pool = (sh // lh, sw // lw)
        cond_dim = 4 * width

        self.time_mlp = nn.Sequential(nn.Linear(time_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.seed_stem = nn.Sequential(
            nn.Conv2d(sc, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
        )
        self.seed_proj = nn.Linear(width, cond_dim)
        self.inp = nn.Conv3d(lc + width, width, 3, padding=1)
        self.block_in = FiLMResBlock(width, cond_dim)
        self.has_level = all(s % 2 == 0 and s >= 2 for s in (lt, lh, lw))
        if self.has_level:
            self.down = nn.Conv3d(width, 2 * width, 3, stride=2, padding=1)
            self.block_mid = FiLMResBlock(2 * width, cond_dim)
            self.up = nn.ConvTranspose3d(2 * width, width, 2, stride=2)
            self.merge = nn.Conv3d(2 * width, width, 3, padding=1)
        self.block_out = FiLMResBlock(width, cond_dim)
        self.out_norm = nn.GroupNorm(1, width)
        self.out = nn.Conv3d(width, lc, 3, padding=1)

        self.register_buffer("latent_mean", torch.zeros(()))
        self.register_buffer("latent_std", torch.ones(()))

    def config(self) -> dict:
        return {"latent_shape": list(self.latent_shape), "seed_shape": list(self.seed_shape),
                "num_steps": self.num_steps, "width": self.width, "time_dim": self.time_dim}

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean.to(z.dtype)) / self.latent_std.to(z.dtype)

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std.to(z.dtype) + self.latent_mean.to(z.dtype)

    def forward(self, z_t: torch.Tensor, t, seed: torch.Tensor) -> torch.Tensor:
        n = z_t.shape[0]
        if z_t.dim() != 5 or tuple(z_t.shape[1:]) != self.latent_shape:
            raise GeometryError(f"denoiser expects [N, {self.latent_shape}], got {tuple(z_t.shape)}")
        if seed.dim() != 4 or tuple(seed.shape[1:]) != self.seed_shape or seed.shape[0] != n:
            raise GeometryError(f"denoiser expects seed [{n}, {self.seed_shape}], got {tuple(seed.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(n)
        if t.shape != (n,):
            raise GeometryError(f"t must be a scalar or have shape ({n},)")
        if bool((t < 1).any()) or bool((t > self.num_steps).any()):
            raise ValueError(f"t must lie in 1..{self.num_steps}")

        s = self.seed_stem(seed)
        cond = self.time_mlp(timestep_embedding(t, self.time_dim).to(z_t.dtype))
        cond = cond + self.seed_proj(s.mean(dim=(2, 3)))
        s_grid = F.avg_pool2d(s, self.pool) if self.pool != (1, 1) else s
        s_grid = s_grid.unsqueeze(2).expand(-1, -1, z_t.shape[2], -1, -1)

        h = self.block_in(self.inp(torch.cat([z_t, s_grid], dim=1)), cond)
        if self.has_level:
            m = self.block_mid(self.down(h), cond)
            h = self.merge(torch.cat([self.up(m), h], dim=1))
        h = self.block_out(h, cond)
        return self.out(F.silu(self.out_norm(h)))


def build_denoiser(latent_shape, seed_shape, num_steps: int, seed: int, width: int = 32,
                   time_dim: int = 32) -> ConditionalDenoiser:
    with seeded_init(seed):
        return ConditionalDenoiser(latent_shape, seed_shape, num_steps, width, time_dim)


def predict_noise(z_t: LatentState, t: int, seed: SeedImage, model: ConditionalDenoiser) -> torch.Tensor:
    """Noise prediction for one latent in channel-first layout ``(C', F', H', W')``."""
    if not 1 <= t <= model.num_steps:
        raise ValueError(f"t={t} outside 1..{model.num_steps}")
    dtype = next(model.parameters()).dtype
    x = seeds_to_tensor([seed], dtype)
    return model(z_t.values.to(dtype).unsqueeze(0), t, x)[0]


def sample_timesteps(n: int, T: int, rng: torch.Generator | None = None) -> torch.Tensor:
    """``n`` timesteps drawn uniformly from ``{1, ..., T}``."""
    return torch.randint(1, T + 1, (n,), generator=rng)


def diffusion_training_loss(model: ConditionalDenoiser, z0: torch.Tensor, seeds: torch.Tensor,
                            t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """MSE between the injected and predicted noise for normalised latents ``z0``."""
    return diffusion_loss(eps, model(q_sample(z0, t, eps, schedule), t, seeds))


def train_diffusion(latent_dataset, schedule: NoiseSchedule, config: TrainConfig,
                    rng: torch.Generator | None = None, *, width: int = 32, time_dim: int = 32,
                    model: ConditionalDenoiser | None = None):
    """Fit the denoiser on ``(LatentDynamic, SeedImage)`` pairs.

    Each step draws a batch, one uniform ``t`` per item, and fresh noise.
    Returns ``(model, TrainingLog)``.
    """
    pairs = list(latent_dataset)
    if not pairs:
        raise ValueError("empty latent dataset")
    shapes = {z.shape for z, _ in pairs}
    if len(shapes) != 1:
        raise GeometryError(f"latents have inconsistent shapes {sorted(shapes)}")
    z_all = latents_to_tensor([z for z, _ in pairs])
    x_all = seeds_to_tensor([s for _, s in pairs])
    if model is None:
        model = build_denoiser(z_all.shape[1:], x_all.shape[1:], schedule.T, config.seed, width, time_dim)
        with torch.no_grad():
            model.latent_mean.fill_(float(z_all.mean()))
            model.latent_std.fill_(float(z_all.std()) if z_all.numel() > 1 else 1.0)
    if model.num_steps != schedule.T:
        raise ValueError(f"model was built for T={model.num_steps}, schedule has T={schedule.T}")
    dtype = next(model.parameters()).dtype
    z_all = model.normalize(z_all.to(dtype))
    x_all = x_all.to(dtype)

    rng = rng if rng is not None else torch_generator(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    log = TrainingLog()
    model.train()
    for step in range(config.steps):
        idx = batch_indices(len(z_all), config, rng)
        z0 = z_all[idx]
        t = sample_timesteps(len(idx), schedule.T, rng)
        eps = torch.randn(z0.shape, generator=rng, dtype=dtype)
        loss = diffusion_training_loss(model, z0, x_all[idx], t, eps, schedule)
        log.losses.append(check_finite(loss, step, "diffusion"))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.lr > 0:
            opt.step()
    model.eval()
    return model, log
