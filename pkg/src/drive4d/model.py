"""Full pipeline assembly: frozen sensor encoder, spatial projector,
language backbone, perception heads, and the diffusion trajectory planner."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn

from .backbone import (
    BOS,
    EOS,
    PAD,
    LmConfig,
    TinyLm,
    Vocabulary,
    extract_vision_states,
)
from .errors import ConfigError, LengthError
from .heads import (
    ActionConditioner,
    BevLift,
    DiffusionSchedule,
    OccupancyHead,
    TextHead,
    TrajectoryDenoiser,
    diffusion_sample,
    diffusion_train_step,
)
from .occgrid import CLASS_NAMES, GridSpec, desk_spec
from .projector import SpatialProjector
from .worldgen import COMMANDS

HIDDEN_MODES = ("last", "weighted")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs for the assembled model.

    The vocabulary is deliberately not part of the config: it is derived from
    the QA corpus and stored alongside the weights at checkpoint time.
    """

    grid: GridSpec = field(default_factory=desk_spec)
    patch_size: int = 8
    channels: int = 64
    encoder_hidden: int = 32
    encoder_seed: int = 0
    lm_layers: int = 4
    lm_hidden: int = 128
    lm_heads: int = 4
    lm_ffn: int = 256
    max_seq: int = 512
    hidden_mode: str = "last"
    tied_text_head: bool = True
    use_ego_status: bool = True
    command_dim: int = 16
    diffusion_steps: int = 100
    sample_steps: int = 10
    traj_scale: float = 10.0
    denoiser_hidden: int = 128
    time_dim: int = 32

    def __post_init__(self):
        if self.hidden_mode not in HIDDEN_MODES:
            raise ConfigError(f"hidden_mode must be one of {HIDDEN_MODES}")
        if self.channels % self.grid.nz:
            raise ConfigError(
                f"channels {self.channels} must fold into {self.grid.nz} height bins")
        if self.grid.nx % self.patch_size or self.grid.ny % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide the "
                f"{self.grid.nx}x{self.grid.ny} grid")
        if not (1 <= self.sample_steps <= self.diffusion_steps):
            raise ConfigError("sample_steps must lie in [1, diffusion_steps]")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if f.name == "grid" else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "grid" in kwargs and isinstance(kwargs["grid"], dict):
            kwargs["grid"] = GridSpec(**kwargs["grid"])
        return cls(**kwargs)


class SensorEncoder(nn.Module):
    """Frozen, seeded two-layer conv stack over the 2-channel sensor raster.

    Stands in for a pretrained image backbone: the weights are drawn once
    from a fixed seed and are never trained in either stage.
    """

    def __init__(self, in_channels: int = 2, hidden: int = 32,
                 out_channels: int = 64, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, padding=1)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=g) * std)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, sensor: torch.Tensor) -> torch.Tensor:
        """[..., 2, H, W] raster -> [..., H, W, C] channels-last features."""
        squeeze = sensor.dim() == 3
        if squeeze:
            sensor = sensor[None]
        x = torch.nn.functional.gelu(self.conv1(sensor))
        x = torch.nn.functional.gelu(self.conv2(x))
        x = x.permute(0, 2, 3, 1)
        return x[0] if squeeze else x


class Drive4dModel(nn.Module):
    """Sensor raster in; occupancy, flow, text, and trajectories out."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        spec = cfg.grid
        self.encoder = SensorEncoder(2, cfg.encoder_hidden, cfg.channels,
                                     seed=cfg.encoder_seed)
        self.projector = SpatialProjector(cfg.patch_size, cfg.channels,
                                          cfg.lm_hidden)
        self.lm = TinyLm(LmConfig(layers=cfg.lm_layers, hidden=cfg.lm_hidden,
                                  heads=cfg.lm_heads, ffn=cfg.lm_ffn,
                                  max_seq=cfg.max_seq, vocab_size=len(vocab)))
        tied = self.lm.embed if cfg.tied_text_head else None
        self.text_head = TextHead(cfg.lm_hidden, len(vocab), tied_embedding=tied)
        self.bev_lift = BevLift(cfg.lm_hidden, cfg.patch_size, cfg.channels)
        self.occ_head = OccupancyHead(cfg.channels, spec.nz, len(CLASS_NAMES))
        self.conditioner = ActionConditioner(cfg.lm_hidden, cfg.command_dim,
                                             cfg.use_ego_status)
        self.denoiser = TrajectoryDenoiser(self.conditioner.dim,
                                           cfg.denoiser_hidden, cfg.time_dim,
                                           cfg.traj_scale)
        self.schedule = DiffusionSchedule(cfg.diffusion_steps)

    @property
    def num_vision_tokens(self) -> int:
        spec = self.cfg.grid
        return self.projector.num_tokens(spec.nx, spec.ny)

    def vision_tokens(self, sensor: torch.Tensor) -> torch.Tensor:
        """[..., 2, nx, ny] sensor raster -> [..., N, lm_hidden] tokens."""
        return self.projector(self.encoder(sensor))

    def forward(self, vision: torch.Tensor | None, text_ids: torch.Tensor,
                key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Combined hidden states [B, N+T, lm_hidden]."""
        states = self.lm(vision, text_ids, key_padding_mask)
        return self.lm.combine_hidden(states, self.cfg.hidden_mode)

    def text_logits(self, combined: torch.Tensor) -> torch.Tensor:
        return self.text_head(combined)

    def vision_states(self, combined: torch.Tensor) -> torch.Tensor:
        return extract_vision_states(combined, self.num_vision_tokens)

    def perception(self, combined: torch.Tensor):
        """Occupancy logits [..., nx, ny, nz, C] and flow [..., nx, ny, nz, 2]."""
        spec = self.cfg.grid
        bev = self.bev_lift(self.vision_states(combined), spec.nx, spec.ny)
        return self.occ_head.occ_logits(bev, spec), self.occ_head.flow(bev, spec)

    def perceive_scene(self, sensor: torch.Tensor):
        """Perception from the sensor alone (empty text suffix)."""
        vision = self.vision_tokens(sensor)
        if vision.dim() == 2:
            vision = vision[None]
        empty = torch.zeros(vision.shape[0], 0, dtype=torch.long,
                            device=vision.device)
        return self.perception(self.forward(vision, empty))

    def plan_condition(self, combined: torch.Tensor, command_idx: torch.Tensor,
                       ego_status: torch.Tensor | None) -> torch.Tensor:
        return self.conditioner(self.vision_states(combined), command_idx,
                                ego_status)

    def plan_training_loss(self, cond: torch.Tensor, gt_plan: torch.Tensor,
                           generator: torch.Generator | None = None) -> torch.Tensor:
        b = gt_plan.shape[0]
        t = torch.randint(1, self.schedule.steps + 1, (b,), generator=generator)
        noise = torch.randn(gt_plan.shape, generator=generator,
                            dtype=gt_plan.dtype)
        return diffusion_train_step(self.denoiser, self.schedule, gt_plan,
                                    cond, t, noise)

    def sample_plan(self, cond: torch.Tensor,
                    generator: torch.Generator | None = None) -> torch.Tensor:
        return diffusion_sample(self.denoiser, self.schedule, cond,
                                sample_steps=self.cfg.sample_steps,
                                generator=generator)

    def encode_prompt(self, question: str) -> list[int]:
        return [BOS] + self.vocab.encode(question)

    def encode_answer(self, answer: str) -> list[int]:
        return self.vocab.encode(answer) + [EOS]

    @torch.no_grad()
    def greedy_decode(self, vision: torch.Tensor, prompts: list[list[int]],
                      max_new_tokens: int = 64) -> list[str]:
        """Batched greedy continuation of right-padded prompts.

        vision: [B, N, lm_hidden], one row per prompt.  Prompts are prefill
        batched into a key/value cache; rows stop at EOS or when the window
        fills, and finished rows are compacted out of the batch.
        """
        if vision.dim() == 2:
            vision = vision[None]
        b = len(prompts)
        if vision.shape[0] != b:
            raise LengthError(f"{vision.shape[0]} vision rows for {b} prompts")
        lengths = torch.tensor([len(p) for p in prompts], dtype=torch.long)
        if int(lengths.min()) < 1:
            raise LengthError("prompts must be nonempty")
        n_vis = self.num_vision_tokens
        tmax = int(lengths.max())
        capacity = min(self.cfg.max_seq, n_vis + tmax + max_new_tokens)
        if n_vis + tmax > capacity:
            raise LengthError("prompt exceeds the decode window")
        ids = torch.full((b, tmax), PAD, dtype=torch.long)
        mask = torch.zeros(b, tmax, dtype=torch.bool)
        for i, p in enumerate(prompts):
            ids[i, :len(p)] = torch.tensor(p, dtype=torch.long)
            mask[i, :len(p)] = True

        states, cache = self.lm.prefill(vision, ids, mask, capacity)
        combined = self.lm.combine_hidden(states, self.cfg.hidden_mode)
        last = combined[torch.arange(b), n_vis + lengths - 1]
        tokens = self.text_head(last).argmax(dim=-1)

        outputs: list[list[int]] = [[] for _ in range(b)]
        active = torch.arange(b)
        while active.numel():
            keep, feed = [], []
            for i in range(active.numel()):
                orig = int(active[i])
                tok = int(tokens[i])
                if tok == EOS:
                    continue
                outputs[orig].append(tok)
                if len(outputs[orig]) >= max_new_tokens:
                    continue
                if int(cache.positions[i]) >= capacity:
                    continue
                keep.append(i)
                feed.append(tok)
            if not keep:
                break
            sel = torch.tensor(keep, dtype=torch.long)
            if sel.numel() != active.numel():
                cache = cache.select(sel)
            active = active[sel]
            states = self.lm.decode_step(cache, torch.tensor(feed))
            combined = self.lm.combine_hidden(states, self.cfg.hidden_mode)
            tokens = self.text_head(combined[:, 0]).argmax(dim=-1)
        return [self.vocab.decode(out) for out in outputs]


def command_index(command: str) -> int:
    try:
        return COMMANDS.index(command)
    except ValueError:
        raise ConfigError(f"unknown command {command!r}") from None


def parameter_hash(module: nn.Module, prefix: str = "") -> str:
    """SHA-256 over names, shapes, and exact bytes of matching parameters."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        if not name.startswith(prefix):
            continue
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
