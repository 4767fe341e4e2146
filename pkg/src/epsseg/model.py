"""Hierarchical VAE backbone (bottom-up encoder, top-down decoder) and the full model."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError
from .head import (
    STD_FLOOR,
    LevelDistribution,
    SegmentationHead,
    _generator,
    build_prior,
    gumbel_softmax_sample,
    select_component,
    standard_normal_prior,
    std_from_raw,
)


@dataclass(frozen=True)
class ModelConfig:
    num_levels: int = 3
    channels: tuple = (16, 32, 64)
    top_latent_dim: int = 64
    num_classes: int = 3
    patch_side: int = 31
    blocks_per_level: int = 1
    latent_channels: int = 8  # z channels at every level below the top
    head_hidden: int = 64
    prior: str = "gmm"  # "gmm" or "normal"
    prior_scale: float = 3.0
    use_film: bool = True
    detach_head: bool = False  # head trains on a stop-gradient copy of h
    std_floor: float = STD_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_levels < 2:
            raise ConfigError("num_levels must be >= 2")
        if len(self.channels) != self.num_levels:
            raise ConfigError(f"channels has {len(self.channels)} entries, expected {self.num_levels}")
        if self.top_latent_dim < self.num_classes:
            raise ConfigError("top_latent_dim must be >= num_classes")
        if self.patch_side % 2 == 0 or self.patch_side < 3:
            raise ConfigError(f"patch_side must be odd, got {self.patch_side}")
        if self.prior not in ("gmm", "normal"):
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.level_sides()[-1] < 1:
            raise ConfigError("patch too small for this many levels")

    def level_sides(self) -> list[int]:
        """Spatial side after each stride-2 stage; entry i belongs to level i+1.

        The last entry is the grid that gets flattened into the top vector.
        """
        sides, s = [], self.patch_side
        for _ in range(self.num_levels):
            s = (s - 1) // 2 + 1
            sides.append(s)
        return sides

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class LatentLevel:
    posterior: LevelDistribution
    prior: Optional[LevelDistribution]  # None at the top: the GMM component is chosen later
    z: Tensor


@dataclass
class LatentState:
    levels: list  # LatentLevel, index 0 is level 1, last is level L

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> LatentLevel:
        return self.levels[-1]

    def posterior_means(self) -> list[Tensor]:
        return [lv.posterior.mean for lv in self.levels]


@dataclass
class EncoderFeatures:
    levels: list  # per-level feature grids below the top
    h: Tensor  # (B, 2 * top_latent_dim)


def reparameterize(dist: LevelDistribution, noise_seed: Union[int, torch.Generator, None] = None) -> Tensor:
    eps = torch.randn(dist.mean.shape, dtype=dist.mean.dtype, generator=_generator(noise_seed))
    return dist.mean + dist.std * eps


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.elu(self.c1(F.elu(x))))


def _stage(c_in: int, c_out: int, blocks: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), *[ResBlock(c_out) for _ in range(blocks)])


class HVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch, L, k = cfg.channels, cfg.num_levels, cfg.latent_channels
        self.sides = cfg.level_sides()
        top_side = self.sides[-1]

        self.stem = nn.Conv2d(1, ch[0], 3, padding=1)
        self.down = nn.ModuleList(
            [_stage(ch[max(i - 1, 0)], ch[i], cfg.blocks_per_level, 2) for i in range(L)]
        )
        self.to_h = nn.Linear(ch[-1] * top_side * top_side, 2 * cfg.top_latent_dim)

        self.from_top = nn.Linear(cfg.top_latent_dim, ch[-1] * top_side * top_side)
        # index j handles level j+1, fed from level j+2 (channels ch[j+1])
        self.up = nn.ModuleList([_stage(ch[j + 1], ch[j], cfg.blocks_per_level, 1) for j in range(L - 1)])
        self.prior_net = nn.ModuleList([nn.Conv2d(ch[j], 2 * k, 3, padding=1) for j in range(L - 1)])
        self.post_net = nn.ModuleList([nn.Conv2d(2 * ch[j], 2 * k, 3, padding=1) for j in range(L - 1)])
        self.merge = nn.ModuleList([nn.Conv2d(k, ch[j], 1) for j in range(L - 1)])
        self.out = nn.Sequential(
            nn.Conv2d(ch[0], ch[0], 3, padding=1), nn.ELU(), nn.Conv2d(ch[0], 1, 3, padding=1)
        )

    # -------------------------------------------------------------- bottom-up

    def encode_bottom_up(self, x: Tensor) -> EncoderFeatures:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        P = self.cfg.patch_side
        if x.shape[-2:] != (P, P):
            raise ValueError(f"expected {P}x{P} patches, got {tuple(x.shape[-2:])}")
        a = self.stem(x)
        feats = []
        for stage in self.down:
            a = stage(a)
            feats.append(a)
        h = self.to_h(F.elu(feats[-1]).flatten(1))
        return EncoderFeatures(feats[:-1], h)

    # -------------------------------------------------------------- top-down

    def _top_state(self, z_top: Tensor) -> Tensor:
        s = self.sides[-1]
        return F.elu(self.from_top(z_top)).view(z_top.shape[0], self.cfg.channels[-1], s, s)

    def _level_state(self, i: int, above: Tensor) -> Tensor:
        """Deterministic top-down state at level i (1-based) from the merged state above."""
        if i == self.cfg.num_levels - 1 and above.dim() == 2:
            above = self._top_state(above)
        side = self.sides[i - 1]
        return self.up[i - 1](F.interpolate(above, size=(side, side), mode="nearest"))

    def level_prior(self, i: int, above: Tensor) -> LevelDistribution:
        """Conditional prior p(z_i | levels above) for 1 <= i < L.

        ``above`` is the merged top-down state of level i+1; for i = L-1 the top
        latent vector z_L itself may be passed.
        """
        if not 1 <= i < self.cfg.num_levels:
            raise ValueError(f"level_prior is defined for 1 <= i < {self.cfg.num_levels}; the top uses the GMM prior")
        return self._prior_from_state(i, self._level_state(i, above))

    def _prior_from_state(self, i: int, state: Tensor) -> LevelDistribution:
        mean, raw = torch.chunk(self.prior_net[i - 1](F.elu(state)), 2, dim=1)
        return LevelDistribution(mean, std_from_raw(raw, self.cfg.std_floor))

    def _posterior(self, i: int, state: Tensor, feat: Tensor) -> LevelDistribution:
        mean, raw = torch.chunk(self.post_net[i - 1](F.elu(torch.cat([state, feat], 1))), 2, dim=1)
        return LevelDistribution(mean, std_from_raw(raw, self.cfg.std_floor))

    def _output(self, state: Tensor) -> Tensor:
        P = self.cfg.patch_side
        return self.out(F.interpolate(state, size=(P, P), mode="nearest")).squeeze(1)

    def infer_latents(
        self, feats: EncoderFeatures, top_posterior: LevelDistribution, noise_seed=None
    ) -> tuple[LatentState, Tensor]:
        """Sample the hierarchy top to bottom; returns latents and the inpainting output."""
        gen = _generator(noise_seed)
        z_top = reparameterize(top_posterior, gen)
        levels = [LatentLevel(top_posterior, None, z_top)]
        above = self._top_state(z_top)
        for i in range(self.cfg.num_levels - 1, 0, -1):
            state = self._level_state(i, above)
            prior = self._prior_from_state(i, state)
            post = self._posterior(i, state, feats.levels[i - 1])
            z = reparameterize(post, gen)
            levels.append(LatentLevel(post, prior, z))
            above = state + self.merge[i - 1](z)
        return LatentState(levels[::-1]), self._output(above)

    def decode_top_down(self, latents: LatentState) -> Tensor:
        """Replay the top-down path with the given samples; returns a patch-shaped prediction."""
        L = self.cfg.num_levels
        if len(latents) != L or any(lv is None or lv.z is None for lv in latents.levels):
            raise ValueError(f"latent state must hold {L} sampled levels, got {len(latents)}")
        above = self._top_state(latents.levels[-1].z)
        for i in range(L - 1, 0, -1):
            state = self._level_state(i, above)
            above = state + self.merge[i - 1](latents.levels[i - 1].z)
        return self._output(above)


@dataclass
class ForwardOutput:
    logits: Tensor
    y: Tensor  # relaxed (training) or plain softmax assignment
    component: Tensor
    latents: LatentState
    prediction: Tensor  # (B, P, P)


class EpsSegModel(nn.Module):
    """Backbone + segmentation head + fixed top prior."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = HVAE(cfg)
        self.head = SegmentationHead(2 * cfg.top_latent_dim, cfg.num_classes, cfg.head_hidden, cfg.std_floor)
        if cfg.prior == "gmm":
            self.prior = build_prior(cfg.num_classes, cfg.top_latent_dim, cfg.prior_scale)
        else:
            self.prior = standard_normal_prior(cfg.top_latent_dim)

    def top_posterior(self, h: Tensor, logits: Tensor) -> LevelDistribution:
        if self.cfg.use_film:
            return self.head.film_modulate(h, logits)
        return self.head.chunk(h)

    def classify(self, x: Tensor) -> Tensor:
        """Logits only; the inference path (no sampling, no decoder)."""
        return self.head.classify_logits(self.backbone.encode_bottom_up(x).h)

    def forward(
        self, x: Tensor, labels: Optional[Tensor] = None, tau: float = 1.0, noise_seed=None, gumbel: bool = True
    ) -> ForwardOutput:
        gen = _generator(noise_seed)
        feats = self.backbone.encode_bottom_up(x)
        h = feats.h
        logits = self.head.classify_logits(h.detach() if self.cfg.detach_head else h)
        if gumbel:
            y = gumbel_softmax_sample(logits, tau, gen)
        else:
            y = torch.softmax(logits, dim=-1)
        if self.cfg.prior == "gmm":
            component = select_component(y.detach(), labels)
        else:
            component = torch.zeros(len(x), dtype=torch.long)
        latents, pred = self.backbone.infer_latents(feats, self.top_posterior(h, logits), gen)
        return ForwardOutput(logits, y, component, latents, pred)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
