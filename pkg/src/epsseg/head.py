"""Top-level latent machinery: class logits, FiLM posterior, GMM prior, Gumbel-Softmax."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError

STD_FLOOR = 1e-3


@dataclass(frozen=True)
class LevelDistribution:
    mean: Tensor
    std: Tensor


def std_from_raw(raw: Tensor, floor: float = STD_FLOOR) -> Tensor:
    return F.softplus(raw) + floor


# ---------------------------------------------------------------- prior


@dataclass
class GmmPrior:
    """Fixed mixture over the top latent: one component per class."""

    means: np.ndarray  # (C, D)
    stds: np.ndarray  # (C, D)
    weights: np.ndarray  # (C,)

    def __post_init__(self):
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ConfigError("mixture weights must sum to 1")
        if np.any(self.stds <= 0):
            raise ConfigError("component stds must be positive")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    def component(self, index: Tensor, like: Tensor) -> LevelDistribution:
        """Per-item component parameters as tensors matching ``like``'s dtype."""
        means = torch.as_tensor(self.means, dtype=like.dtype)[index]
        stds = torch.as_tensor(self.stds, dtype=like.dtype)[index]
        return LevelDistribution(means, stds)

    def to_json(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GmmPrior":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float), np.asarray(d["weights"], float))


def build_prior(num_classes: int, latent_dim: int, scale: float = 3.0) -> GmmPrior:
    """Scaled one-hot means along the first C latent axes, unit stds, uniform weights."""
    if latent_dim < num_classes:
        raise ConfigError(f"top latent dim {latent_dim} < number of classes {num_classes}")
    means = np.zeros((num_classes, latent_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = scale
    return GmmPrior(means, np.ones((num_classes, latent_dim)), np.full(num_classes, 1.0 / num_classes))


def standard_normal_prior(latent_dim: int) -> GmmPrior:
    """Single N(0, I) component, the plain HVAE top prior."""
    return GmmPrior(np.zeros((1, latent_dim)), np.ones((1, latent_dim)), np.ones(1))


# ---------------------------------------------------------------- temperature


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_min: float = 0.5
    rate: float = 0.999
    # t is divided by this before decay; None means "total training steps"
    time_scale: Optional[float] = None


def anneal_temperature(schedule: TemperatureSchedule, t: int, total_steps: Optional[int] = None) -> float:
    """tau = max(tau_min, exp(-rate * t / time_scale))."""
    scale = schedule.time_scale
    if scale is None:
        scale = float(total_steps) if total_steps else 1.0
    return max(schedule.tau_min, math.exp(-schedule.rate * t / scale))


# ---------------------------------------------------------------- sampling


def _generator(noise_seed: Union[int, torch.Generator, None]) -> Optional[torch.Generator]:
    if isinstance(noise_seed, int):
        return torch.Generator().manual_seed(noise_seed)
    return noise_seed


def gumbel_noise(shape, dtype=torch.float32, generator=None) -> Tensor:
    u = torch.rand(shape, dtype=dtype, generator=_generator(generator))
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u.clamp(min=tiny, max=1.0 - torch.finfo(dtype).eps)))


def gumbel_softmax_sample(
    logits: Tensor, tau: float, noise_seed=None, noise: Optional[Tensor] = None
) -> Tensor:
    """Relaxed one-hot sample softmax((logits + g) / tau) with g ~ Gumbel(0, 1)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if noise is None:
        noise = gumbel_noise(logits.shape, logits.dtype, noise_seed)
    return torch.softmax((logits + noise) / tau, dim=-1)


def infer_assignment(logits: Tensor) -> tuple[Tensor, Tensor]:
    y = torch.softmax(logits, dim=-1)
    return y, torch.argmax(y, dim=-1)


def select_component(y: Tensor, labels: Optional[Tensor] = None) -> Tensor:
    """Ground-truth label where known (label >= 0), else argmax of y (lowest index on ties)."""
    guess = torch.argmax(y, dim=-1)
    if labels is None:
        return guess
    labels = torch.as_tensor(labels, device=y.device)
    return torch.where(labels >= 0, labels, guess)


# ---------------------------------------------------------------- modules


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.ELU(), nn.Linear(hidden, n_out))


class SegmentationHead(nn.Module):
    """Classifier f(h) plus the two FiLM generators g_gamma, g_beta."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 64, std_floor: float = STD_FLOOR):
        super().__init__()
        self.feature_dim = feature_dim
        self.std_floor = std_floor
        self.classifier = _mlp(feature_dim, hidden, num_classes)
        self.g_gamma = _mlp(num_classes, 2 * num_classes, feature_dim)
        self.g_beta = _mlp(num_classes, 2 * num_classes, feature_dim)
        # start near the identity modulation
        with torch.no_grad():
            self.g_gamma[-1].weight.mul_(0.1)
            self.g_gamma[-1].bias.fill_(1.0)
            self.g_beta[-1].weight.mul_(0.1)
            self.g_beta[-1].bias.zero_()

    def classify_logits(self, h: Tensor) -> Tensor:
        return self.classifier(h)

    def film_params(self, logits: Tensor) -> tuple[Tensor, Tensor]:
        return self.g_gamma(logits), self.g_beta(logits)

    def film_modulate(
        self, h: Tensor, logits: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None
    ) -> LevelDistribution:
        if gamma is None or beta is None:
            g, b = self.film_params(logits)
            gamma = g if gamma is None else gamma
            beta = b if beta is None else beta
        return self.chunk(gamma * h + beta)

    def chunk(self, h: Tensor) -> LevelDistribution:
        """Split a 2*D feature vector into (mean, std) of the top posterior."""
        mean, raw = torch.chunk(h, 2, dim=-1)
        return LevelDistribution(mean, std_from_raw(raw, self.std_floor))
