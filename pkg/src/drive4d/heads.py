"""Output heads: occupancy, flow, autoregressive text, diffusion planning.

The occupancy path lifts processed vision tokens back onto the BEV plane
(the exact inverse of the projector's patch layout), folds channels into
height bins, and runs shared per-voxel MLPs.  The planner is a small
denoising model over the 12 waypoint scalars.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ShapeError
from .occgrid import GridSpec, N_WAYPOINTS
from .projector import unpatchify
from .worldgen import COMMANDS

TRAJ_DIM = N_WAYPOINTS * 2


class BevLift(nn.Module):
    """Per-token linear to K*K*C cells, then spatial unpatchify to [H,W,C]."""

    def __init__(self, lm_width: int, patch_size: int, channels: int):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.proj = nn.Linear(lm_width, patch_size * patch_size * channels)

    def forward(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        k = self.patch_size
        n_expected = (h // k) * (w // k)
        if h % k or w % k or tokens.shape[-2] != n_expected:
            raise ShapeError(
                f"{tokens.shape[-2]} tokens cannot tile {h}x{w} with K={k}")
        cells = self.proj(tokens)
        shape = tokens.shape[:-1] + (k * k, self.channels)
        return unpatchify(cells.view(shape), h, w, k)


class OccupancyHead(nn.Module):
    """Channel-to-height fold plus shared MLPs for class and velocity."""

    def __init__(self, channels: int, nz: int, num_classes: int,
                 height_width: int | None = None):
        super().__init__()
        if channels % nz:
            raise ShapeError(f"channels {channels} not divisible by nz {nz}")
        self.nz = nz
        self.per_bin = channels // nz
        hw = height_width or self.per_bin
        self.class_mlp = nn.Sequential(
            nn.Linear(self.per_bin, hw), nn.GELU(), nn.Linear(hw, num_classes))
        self.flow_mlp = nn.Sequential(
            nn.Linear(self.per_bin, hw), nn.GELU(), nn.Linear(hw, 2))

    def _fold(self, bev: torch.Tensor, spec: GridSpec) -> torch.Tensor:
        h, w = bev.shape[-3], bev.shape[-2]
        if (h, w) != (spec.nx, spec.ny):
            # Bilinear resample on the BEV plane to the grid resolution.
            flat = bev.reshape(-1, h, w, bev.shape[-1]).permute(0, 3, 1, 2)
            flat = nn.functional.interpolate(
                flat, size=(spec.nx, spec.ny), mode="bilinear", align_corners=False)
            bev = flat.permute(0, 2, 3, 1).reshape(
                bev.shape[:-3] + (spec.nx, spec.ny, bev.shape[-1]))
        if self.nz != spec.nz:
            raise ShapeError(f"head built for nz={self.nz}, grid has {spec.nz}")
        return bev.reshape(bev.shape[:-1] + (spec.nz, self.per_bin))

    def occ_logits(self, bev: torch.Tensor, spec: GridSpec) -> torch.Tensor:
        return self.class_mlp(self._fold(bev, spec))

    def flow(self, bev: torch.Tensor, spec: GridSpec) -> torch.Tensor:
        return self.flow_mlp(self._fold(bev, spec))


class TextHead(nn.Module):
    def __init__(self, hidden: int, vocab_size: int,
                 tied_embedding: nn.Embedding | None = None):
        super().__init__()
        self.tied = tied_embedding
        if tied_embedding is None:
            self.proj = nn.Linear(hidden, vocab_size, bias=False)
        else:
            self.proj = None

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.tied is not None:
            return hidden @ self.tied.weight.t()
        return self.proj(hidden)


# ---------------------------------------------------------------------------
# Trajectory diffusion
# ---------------------------------------------------------------------------

class DiffusionSchedule:
    """Cosine noise schedule with x0-prediction bookkeeping."""

    def __init__(self, steps: int = 100, s: float = 0.008, max_beta: float = 0.999):
        ts = torch.arange(steps + 1, dtype=torch.float64)
        f = torch.cos(((ts / steps) + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        self.steps = steps
        self.betas = betas.clamp(1e-8, max_beta)
        self.alpha_bars = torch.cumprod(1.0 - self.betas, dim=0)  # index t-1 = abar_t
        if not torch.all(self.betas[1:] >= self.betas[:-1] - 1e-12):
            raise ValueError("beta schedule must be non-decreasing")
        if not torch.all(self.alpha_bars[1:] < self.alpha_bars[:-1]):
            raise ValueError("alpha-bar must decrease strictly")

    def alpha_bar(self, t: int) -> float:
        if not (1 <= t <= self.steps):
            raise ValueError(f"t={t} outside [1, {self.steps}]")
        return float(self.alpha_bars[t - 1])


def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype,
                                                       device=t.device) / half)
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TrajectoryDenoiser(nn.Module):
    """MLP that maps (noisy plan, step, conditioning) to a clean plan.

    Plans are scaled to roughly unit range internally; inputs and outputs
    stay in meters.
    """

    def __init__(self, cond_dim: int, hidden: int = 128, time_dim: int = 32,
                 traj_scale: float = 10.0):
        super().__init__()
        self.traj_scale = traj_scale
        self.time_dim = time_dim
        self.net = nn.Sequential(
            nn.Linear(TRAJ_DIM + time_dim + cond_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, TRAJ_DIM))

    def forward(self, noisy_flat: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        temb = _time_embedding(t.to(noisy_flat.dtype), self.time_dim)
        x = torch.cat([noisy_flat / self.traj_scale, temb, cond], dim=-1)
        return self.net(x) * self.traj_scale


class ActionConditioner(nn.Module):
    """cond = mean-pooled vision states || command embedding || ego status."""

    def __init__(self, lm_width: int, command_dim: int = 16,
                 use_ego_status: bool = True):
        super().__init__()
        self.command_embed = nn.Embedding(len(COMMANDS), command_dim)
        self.use_ego_status = use_ego_status
        self.dim = lm_width + command_dim + 3

    def forward(self, vision_states: torch.Tensor, command_idx: torch.Tensor,
                ego_status: torch.Tensor | None) -> torch.Tensor:
        pooled = vision_states.mean(dim=-2)
        cmd = self.command_embed(command_idx).to(pooled.dtype)
        if ego_status is None or not self.use_ego_status:
            status = torch.zeros(pooled.shape[:-1] + (3,), dtype=pooled.dtype,
                                 device=pooled.device)
        else:
            status = ego_status.to(pooled.dtype)
        return torch.cat([pooled, cmd, status], dim=-1)


def diffusion_train_step(denoiser: TrajectoryDenoiser, schedule: DiffusionSchedule,
                         plan_gt: torch.Tensor, cond: torch.Tensor,
                         t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """L1 between the denoiser's clean-plan estimate and the true plan.

    plan_gt, noise: [..., 6, 2]; t: integer tensor [...] in [1, steps].
    """
    flat_gt = plan_gt.reshape(plan_gt.shape[:-2] + (TRAJ_DIM,))
    flat_noise = noise.reshape(flat_gt.shape)
    abar = torch.as_tensor(
        [schedule.alpha_bar(int(ti)) for ti in t.reshape(-1)],
        dtype=flat_gt.dtype, device=flat_gt.device).reshape(t.shape + (1,))
    noisy = torch.sqrt(abar) * flat_gt + torch.sqrt(1.0 - abar) * flat_noise
    pred = denoiser(noisy, t, cond)
    return (pred - flat_gt).abs().mean()


@torch.no_grad()
def diffusion_sample(denoiser: TrajectoryDenoiser, schedule: DiffusionSchedule,
                     cond: torch.Tensor, sample_steps: int = 10,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Deterministic-variance sampling from pure noise; [..., 6, 2] meters."""
    batch_shape = cond.shape[:-1]
    dtype = cond.dtype
    x = torch.randn(batch_shape + (TRAJ_DIM,), generator=generator,
                    dtype=dtype) * denoiser.traj_scale
    ts = torch.linspace(schedule.steps, 1, sample_steps).round().to(torch.int64)
    ones = torch.ones(batch_shape, dtype=torch.int64)
    for i, t in enumerate(ts):
        abar_t = schedule.alpha_bar(int(t))
        x0 = denoiser(x, ones * int(t), cond)
        if i + 1 < len(ts):
            t_next = int(ts[i + 1])
            abar_n = schedule.alpha_bar(t_next)
            eps = (x - math.sqrt(abar_t) * x0) / math.sqrt(max(1.0 - abar_t, 1e-12))
            x = math.sqrt(abar_n) * x0 + math.sqrt(1.0 - abar_n) * eps
        else:
            x = x0
    return x.reshape(batch_shape + (N_WAYPOINTS, 2))
