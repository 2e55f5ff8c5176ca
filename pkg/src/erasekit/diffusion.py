"""Noise schedule, conditional denoiser and samplers.

The denoiser is a small three-level U-Net conditioned on the masked image and
the mask (7 input channels total).  The same architecture serves three roles:
the multi-step teacher and the fake-score model predict the noise, while the
distilled student predicts the clean image directly, which keeps its one-shot
prediction from pure noise stable.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NoiseSchedule:
    """Variance schedule with cumulative signal levels alpha_bar[0..steps].

    alpha_bar[0] is exactly 1 (no noise) and the sequence decreases strictly
    to below 1e-3 at t = steps, so the terminal marginal is near-Gaussian.
    Values are kept in float64; tensor operations follow the input dtype.
    """

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        if steps < 2:
            raise ValueError("schedule needs at least 2 steps")
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        if not (0 < betas[0] and betas[-1] < 1):
            raise ValueError("beta range must lie in (0, 1)")
        alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
        if alpha_bar[-1] >= 1e-3:
            raise ValueError(f"terminal signal level {alpha_bar[-1]:.2e} is too high; "
                             "increase steps or beta_end")
        self.steps = steps
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.alpha_bar = alpha_bar  # float64, shape (steps + 1,)

    def _gather(self, t, like: torch.Tensor) -> torch.Tensor:
        """alpha_bar at integer times t, broadcast against `like`."""
        t = torch.as_tensor(t)
        if t.dtype.is_floating_point:
            raise TypeError("timesteps must be integers")
        if bool((t < 0).any()) or bool((t > self.steps).any()):
            raise ValueError(f"timestep out of range [0, {self.steps}]")
        table = torch.as_tensor(self.alpha_bar, dtype=like.dtype, device=like.device)
        ab = table[t.to(like.device)]
        while ab.ndim < like.ndim:
            ab = ab.unsqueeze(-1)
        return ab

    def add_noise(self, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
        """Sample x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.

        t may be a python int or a tensor with one entry per sample; it must
        lie in [1, steps].  noise must match x0's shape.
        """
        if noise.shape != x0.shape:
            raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape "
                             f"{tuple(x0.shape)}")
        tt = torch.as_tensor(t)
        if bool((tt < 1).any()):
            raise ValueError("add_noise needs t >= 1; t=0 is the clean image")
        ab = self._gather(t, x0)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def pred_x0(self, eps_hat: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        """Invert add_noise: x0 = (x_t - sigma_t eps_hat) / sqrt(alpha_bar_t)."""
        if eps_hat.shape != x_t.shape:
            raise ValueError("eps_hat and x_t shapes differ")
        ab = self._gather(t, x_t)
        if bool((ab < 1e-8).any()):
            raise ValueError("alpha_bar below 1e-8; x0 reconstruction is ill-conditioned")
        return (x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()

    def eps_from_x0(self, x0_hat: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        """The noise consistent with a clean-image prediction at time t."""
        ab = self._gather(t, x_t)
        sigma = (1 - ab).sqrt()
        if bool((sigma < 1e-8).any()):
            raise ValueError("sigma below 1e-8; eps reconstruction is ill-conditioned")
        return (x_t - ab.sqrt() * x0_hat) / sigma


@dataclass
class Condition:
    """Erasure conditioning: the masked image and the mask, batched NCHW."""

    x_m: torch.Tensor  # (N, 3, H, W) float
    m_in: torch.Tensor  # (N, 1, H, W) float in [0, 1]

    def __post_init__(self):
        if self.x_m.ndim != 4 or self.x_m.shape[1] != 3:
            raise ValueError(f"x_m must be (N, 3, H, W), got {tuple(self.x_m.shape)}")
        if self.m_in.ndim != 4 or self.m_in.shape[1] != 1:
            raise ValueError(f"m_in must be (N, 1, H, W), got {tuple(self.m_in.shape)}")
        if self.x_m.shape[0] != self.m_in.shape[0] or self.x_m.shape[2:] != self.m_in.shape[2:]:
            raise ValueError("x_m and m_in disagree on batch or spatial size")
        if bool((self.m_in < 0).any()) or bool((self.m_in > 1).any()):
            raise ValueError("mask values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.x_m.shape[0]

    def to(self, dtype: torch.dtype) -> "Condition":
        return Condition(self.x_m.to(dtype), self.m_in.to(dtype))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype,
                                                           device=t.device) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """Conditional U-Net over (noisy image, masked image, mask) inputs.

    Args:
        schedule: the shared noise schedule, used for eps/x0 conversions.
        prediction: "eps" to predict the noise (teacher, fake-score model) or
            "x0" to predict the clean image directly (student).
        base_width: channel count at full resolution; doubles per level.
        time_dim: width of the timestep embedding.

    forward() returns the raw network output; predict_eps()/predict_x0()
    convert it through the schedule when the parameterization differs.  The
    mid-network activation (lowest resolution, after the bottleneck block) is
    exposed via ``features`` / ``return_features`` for feature-space losses.
    """

    def __init__(self, schedule: NoiseSchedule, prediction: str = "eps",
                 base_width: int = 32, time_dim: int = 128):
        super().__init__()
        if prediction not in ("eps", "x0"):
            raise ValueError(f"prediction must be 'eps' or 'x0', got {prediction!r}")
        self.schedule = schedule
        self.prediction = prediction
        self.base_width = base_width
        self.time_dim = time_dim
        b = base_width

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.stem = nn.Conv2d(7, b, 3, padding=1)
        self.enc1 = _ResBlock(b, time_dim)
        self.down1 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(2 * b, time_dim)
        self.down2 = nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1)
        self.enc3 = _ResBlock(4 * b, time_dim)
        self.mid = _ResBlock(4 * b, time_dim)
        self.up1 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.fuse1 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.dec1 = _ResBlock(2 * b, time_dim)
        self.up2 = nn.Conv2d(2 * b, b, 3, padding=1)
        self.fuse2 = nn.Conv2d(2 * b, b, 3, padding=1)
        self.dec2 = _ResBlock(b, time_dim)
        self.out_norm = nn.GroupNorm(8, b)
        self.out = nn.Conv2d(b, 3, 3, padding=1)

    def _expand_t(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=like.device)
        if t.ndim == 0:
            t = t.repeat(batch)
        if t.shape != (batch,):
            raise ValueError(f"t must be scalar or shape ({batch},), got {tuple(t.shape)}")
        return t

    def forward(self, x_t: torch.Tensor, t, cond: Condition,
                return_features: bool = False):
        if x_t.ndim != 4 or x_t.shape[1] != 3:
            raise ValueError(f"x_t must be (N, 3, H, W), got {tuple(x_t.shape)}")
        if x_t.shape[2] % 4 or x_t.shape[3] % 4:
            raise ValueError("spatial size must be divisible by 4")
        if x_t.shape[0] != len(cond) or x_t.shape[2:] != cond.x_m.shape[2:]:
            raise ValueError("x_t and condition disagree on batch or spatial size")
        tt = self._expand_t(t, x_t.shape[0], x_t).to(x_t.dtype)
        temb = self.time_mlp(timestep_embedding(tt, self.time_dim))

        h = self.stem(torch.cat([x_t, cond.x_m.to(x_t.dtype),
                                 cond.m_in.to(x_t.dtype)], dim=1))
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down1(h1), temb)
        h3 = self.enc3(self.down2(h2), temb)
        mid = self.mid(h3, temb)

        u = F.interpolate(mid, scale_factor=2, mode="nearest")
        u = self.dec1(self.fuse1(torch.cat([self.up1(u), h2], dim=1)), temb)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.dec2(self.fuse2(torch.cat([self.up2(u), h1], dim=1)), temb)
        out = self.out(F.silu(self.out_norm(u)))
        if return_features:
            return out, mid
        return out

    def features(self, x_t: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        """Mid-network activation, (N, 4*base_width, H/4, W/4)."""
        _, mid = self.forward(x_t, t, cond, return_features=True)
        return mid

    def encode_mid(self, x_t: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        """features() without running the decoder half; same activation."""
        tt = self._expand_t(t, x_t.shape[0], x_t).to(x_t.dtype)
        temb = self.time_mlp(timestep_embedding(tt, self.time_dim))
        h = self.stem(torch.cat([x_t, cond.x_m.to(x_t.dtype),
                                 cond.m_in.to(x_t.dtype)], dim=1))
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down1(h1), temb)
        h3 = self.enc3(self.down2(h2), temb)
        return self.mid(h3, temb)

    def predict_eps(self, x_t: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        raw = self.forward(x_t, t, cond)
        if self.prediction == "eps":
            return raw
        return self.schedule.eps_from_x0(raw, x_t, t)

    def predict_x0(self, x_t: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        raw = self.forward(x_t, t, cond)
        if self.prediction == "x0":
            return raw
        return self.schedule.pred_x0(raw, x_t, t)


def _model_eps_x0(model, schedule: NoiseSchedule, x_t: torch.Tensor, t, cond):
    """One model evaluation returning both the eps and x0 views of it."""
    raw = model(x_t, t, cond)
    if getattr(model, "prediction", "eps") == "x0":
        return schedule.eps_from_x0(raw, x_t, t), raw
    return raw, schedule.pred_x0(raw, x_t, t)


def ode_sample(model, x_t: torch.Tensor, t: int, cond, steps: int = 20,
               schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Deterministic multi-step denoising from time t down to 0.

    Integrates the probability-flow ODE with the standard deterministic
    update: at each sub-step the model's clean-image estimate is re-projected
    onto the next noise level using the model's own noise estimate.  With
    steps=1 this reduces to a single clean-image prediction.  The walk is
    gradient-free and uses uniformly spaced sub-steps.
    """
    schedule = schedule or getattr(model, "schedule", None)
    if schedule is None:
        raise ValueError("ode_sample needs a schedule (model attribute or argument)")
    if not (1 <= t <= schedule.steps):
        raise ValueError(f"start timestep must lie in [1, {schedule.steps}]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    times = np.unique(np.linspace(t, 0, steps + 1).round().astype(int))[::-1]
    with torch.no_grad():
        x = x_t
        for t_now, t_next in zip(times[:-1], times[1:]):
            eps_hat, x0_hat = _model_eps_x0(model, schedule, x, int(t_now), cond)
            if t_next == 0:
                x = x0_hat
            else:
                ab_next = schedule._gather(int(t_next), x)
                x = ab_next.sqrt() * x0_hat + (1 - ab_next).sqrt() * eps_hat
    return x.detach()


def student_sample(student, cond: Condition, num_steps: int = 2, seed: int = 0,
                   mid_timestep: int = 499, composite: bool = True) -> torch.Tensor:
    """Few-step erasure sampling with the distilled student.

    Draws pure noise at the terminal time, predicts the clean image, and (for
    the default two-step mode) re-noises that prediction to `mid_timestep`
    for one refinement pass.  Predictions are clamped to [0, 1].  With
    composite=True (default) the prediction is pasted into the mask region
    only, so pixels outside the mask equal the masked input exactly.
    Deterministic for a fixed seed.
    """
    if num_steps not in (1, 2):
        raise ValueError("num_steps must be 1 or 2")
    schedule = student.schedule
    if not (1 <= mid_timestep < schedule.steps):
        raise ValueError(f"mid_timestep must lie in [1, {schedule.steps})")
    gen = torch.Generator().manual_seed(seed)
    shape = cond.x_m.shape
    with torch.no_grad():
        x = torch.randn(shape, generator=gen, dtype=cond.x_m.dtype)
        x0_hat = student.predict_x0(x, schedule.steps, cond).clamp(0.0, 1.0)
        if num_steps == 2:
            noise = torch.randn(shape, generator=gen, dtype=cond.x_m.dtype)
            x_mid = schedule.add_noise(x0_hat, mid_timestep, noise)
            x0_hat = student.predict_x0(x_mid, mid_timestep, cond).clamp(0.0, 1.0)
    if composite:
        m = cond.m_in
        x0_hat = m * x0_hat + (1.0 - m) * cond.x_m
    return x0_hat.detach()
