"""Variance schedules, forward noising, ancestral sampling.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and the schedule arrays are
indexed with ``t - 1``. ``alpha_bar(0)`` is 1 by convention.

Forward transition:  z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps
Marginal:            z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
Reverse step:        z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) eps_pred) / sqrt(alpha_t) + sigma_t xi

Schedule quantities are float64; latents keep whatever dtype they arrive in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import GeometryError

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor
    sigma_mode: str = "beta"
    beta_start: float | None = None
    beta_end: float | None = None

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    @classmethod
    def from_betas(cls, betas: Sequence[float] | torch.Tensor, sigma_mode: str = "beta",
                   **meta) -> "NoiseSchedule":
        """Build a schedule from explicit betas.

        Accepts the degenerate values 0 and 1 so that limiting cases can be
        tested; :func:`make_linear_schedule` enforces the strict range.
        """
        if sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")
        b = torch.as_tensor(betas, dtype=torch.float64).flatten().clone()
        if b.numel() < 1:
            raise ValueError("schedule needs at least one step")
        if not torch.all((b >= 0) & (b <= 1)):
            raise ValueError("betas must lie in [0, 1]")
        alphas = 1.0 - b
        # sequential product so that abar_t == abar_{t-1} * alpha_t holds exactly
        abars = torch.empty_like(b)
        acc = 1.0
        for i, a in enumerate(alphas.tolist()):
            acc = acc * a
            abars[i] = acc
        if sigma_mode == "beta":
            var = b.clone()
        else:
            prev = torch.cat([torch.ones(1, dtype=torch.float64), abars[:-1]])
            denom = 1.0 - abars
            var = torch.where(denom > 0, (1.0 - prev) / denom.clamp_min(1e-300) * b,
                              torch.zeros_like(b))
        return cls(b, alphas, abars, var.sqrt(), sigma_mode, **meta)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def snr(self) -> torch.Tensor:
        return self.alpha_bars / (1.0 - self.alpha_bars)

    def to_config(self) -> dict:
        if self.beta_start is None:
            raise ValueError("only linear schedules are serializable")
        return {"beta_start": self.beta_start, "beta_end": self.beta_end, "T": self.T,
                "sigma_mode": self.sigma_mode}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return make_linear_schedule(cfg["beta_start"], cfg["beta_end"], cfg["T"],
                                    cfg.get("sigma_mode", "beta"))


def make_linear_schedule(beta_start: float, beta_end: float, T: int,
                         sigma_mode: str = "beta") -> NoiseSchedule:
    if isinstance(T, bool) or int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    betas[0], betas[-1] = beta_start, beta_end
    return NoiseSchedule.from_betas(betas, sigma_mode, beta_start=float(beta_start),
                                    beta_end=float(beta_end))


@dataclass(frozen=True, eq=False)
class LatentState:
    """A latent (or a batch of latents sharing one step) at diffusion step ``step``."""

    values: torch.Tensor
    step: int


def _randn_like(x: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)


def forward_step(z_prev: LatentState, schedule: NoiseSchedule,
                 rng: torch.Generator | None = None) -> LatentState:
    t = z_prev.step + 1
    if z_prev.step < 0 or t > schedule.T:
        raise ValueError(f"cannot step forward from step {z_prev.step} with T={schedule.T}")
    beta = float(schedule.betas[t - 1])
    eps = _randn_like(z_prev.values, rng)
    return LatentState(math.sqrt(1.0 - beta) * z_prev.values + math.sqrt(beta) * eps, t)


def q_sample(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Vectorised marginal with one timestep per leading-batch item."""
    abar = schedule.alpha_bars[t - 1].to(z0.dtype)
    shape = (-1,) + (1,) * (z0.dim() - 1)
    return abar.sqrt().view(shape) * z0 + (1.0 - abar).sqrt().view(shape) * eps


def forward_marginal(z0: LatentState, t: int, schedule: NoiseSchedule,
                     rng: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> tuple[LatentState, torch.Tensor]:
    if z0.step != 0:
        raise ValueError(f"forward_marginal expects a clean latent, got step {z0.step}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    if eps is None:
        eps = _randn_like(z0.values, rng)
    elif eps.shape != z0.values.shape:
        raise GeometryError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.values.shape)}")
    abar = schedule.alpha_bar(t)
    zt = math.sqrt(abar) * z0.values + math.sqrt(1.0 - abar) * eps
    return LatentState(zt, t), eps


def reverse_step(z_t: LatentState, eps_pred: torch.Tensor, schedule: NoiseSchedule,
                 rng: torch.Generator | None = None) -> LatentState:
    t = z_t.step
    if not 1 <= t <= schedule.T:
        raise ValueError(f"cannot step back from step {t} with T={schedule.T}")
    if eps_pred.shape != z_t.values.shape:
        raise GeometryError(
            f"predicted noise shape {tuple(eps_pred.shape)} != latent shape {tuple(z_t.values.shape)}"
        )
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    abar = float(schedule.alpha_bars[t - 1])
    coef = beta / math.sqrt(1.0 - abar) if beta > 0 else 0.0
    mean = (z_t.values - coef * eps_pred) / math.sqrt(alpha)
    sigma = float(schedule.sigmas[t - 1]) if beta > 0 else 0.0
    if t > 1 and sigma > 0:
        mean = mean + sigma * _randn_like(mean, rng)
    return LatentState(mean, t - 1)


def diffusion_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise GeometryError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return ((eps - eps_pred) ** 2).mean()


Denoiser = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]


@torch.no_grad()
def sample_latent(denoiser: Denoiser, condition, shape: Sequence[int],
                  schedule: NoiseSchedule, rng: torch.Generator | None = None,
                  dtype: torch.dtype = torch.float32) -> LatentState:
    """Ancestral sampling from ``z_T ~ N(0, I)`` down to step 0.

    ``denoiser(z_t, t, condition)`` must return a tensor shaped like ``z_t``.
    If it exposes ``latent_shape``, ``shape`` is checked against it (ignoring
    leading batch dimensions).
    """
    if schedule.T < 1:
        raise ValueError("schedule has no steps")
    expected = getattr(denoiser, "latent_shape", None)
    shape = tuple(int(s) for s in shape)
    if expected is not None and shape[-len(expected):] != tuple(expected):
        raise GeometryError(f"sampling shape {shape} does not end with denoiser geometry {tuple(expected)}")
    z = LatentState(torch.randn(shape, generator=rng, dtype=dtype), schedule.T)
    for t in range(schedule.T, 0, -1):
        eps_pred = denoiser(z.values, t, condition)
        z = reverse_step(z, eps_pred, schedule, rng)
    return z
