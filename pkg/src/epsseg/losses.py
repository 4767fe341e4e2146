"""Loss terms and their weighted combination.

Reductions: inpainting sums over mask pixels and averages over the batch; CE and
entropy average over the items they apply to; KL sums over latent dimensions and
levels and averages over the batch; the negative contrastive term is a plain sum
over ordered negative pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence, Union

import torch
from torch import Tensor

from .errors import ConfigError, NumericError
from .head import GmmPrior, LevelDistribution

LOG_CLIP = 1e-8
Number = Union[float, Tensor]


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0  # cross-entropy
    alpha2: float = 0.1  # KL
    alpha3: float = 0.1  # contrastive
    lam: float = 0.5
    margin: float = 5.0
    entropy_weight: float = 0.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.entropy_weight) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")


@dataclass
class LossBreakdown:
    inpaint: Number
    ce: Number
    kl: Number
    cl: Number
    entropy: Number
    total: Number

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


class Term(NamedTuple):
    value: Tensor
    count: int  # contributing items; 0 flags an empty term


class ContrastiveTerm(NamedTuple):
    value: Tensor
    positive: Tensor
    negative: Tensor
    n_pos: int
    n_neg: int


def inpainting_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """(1/B) * sum of squared errors over the mask window of each item."""
    if prediction.shape != target.shape:
        raise ValueError(f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    if prediction.shape[0] == 0:
        raise ValueError("empty batch")
    return (prediction - target).pow(2).flatten(1).sum(1).mean()


def mask_region(patches: Tensor, side: int) -> Tensor:
    P = patches.shape[-1]
    lo = P // 2 - side // 2
    return patches[..., lo : lo + side, lo : lo + side]


def cross_entropy_loss(y: Tensor, labels: Tensor) -> Term:
    """-mean over labeled items of log y[label]; unlabeled items (label < 0) are ignored."""
    labels = torch.as_tensor(labels)
    keep = labels >= 0
    n = int(keep.sum())
    if n == 0:
        return Term(y.sum() * 0.0, 0)
    picked = y[keep].gather(1, labels[keep].unsqueeze(1)).squeeze(1)
    return Term(-torch.log(picked.clamp(min=LOG_CLIP)).mean(), n)


def entropy_loss(y: Tensor, labels: Tensor) -> Term:
    """Mean entropy -sum y log y over unlabeled rows."""
    keep = torch.as_tensor(labels) < 0
    n = int(keep.sum())
    if n == 0:
        return Term(y.sum() * 0.0, 0)
    rows = y[keep]
    return Term(-(rows * torch.log(rows.clamp(min=LOG_CLIP))).sum(1).mean(), n)


def _dist_args(d):
    if isinstance(d, LevelDistribution):
        return d.mean, d.std
    return d


def gaussian_kl(q, p, batch: bool = False) -> Tensor:
    """KL(q || p) for diagonal Gaussians given as (mean, std) or LevelDistribution.

    Summed over all dimensions, or over all but the first when ``batch``.
    """
    mq, sq = _dist_args(q)
    mp, sp = _dist_args(p)
    mq, sq, mp, sp = (torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t for t in (mq, sq, mp, sp))
    if bool((sq <= 0).any()) or bool((sp <= 0).any()):
        raise ValueError("standard deviations must be positive")
    kl = torch.log(sp / sq) + (sq.pow(2) + (mq - mp).pow(2)) / (2 * sp.pow(2)) - 0.5
    if batch:
        return kl.flatten(1).sum(1)
    return kl.sum()


def kl_hierarchy_loss(latents, component: Tensor, prior: GmmPrior) -> Tensor:
    """Batch mean of the summed per-level KL terms; the top level is scored against
    the selected mixture component."""
    levels = latents.levels
    if any(lv.posterior is None for lv in levels) or any(lv.prior is None for lv in levels[:-1]):
        raise ValueError("latent state is missing a level")
    total = 0.0
    for lv in levels[:-1]:
        total = total + gaussian_kl(lv.posterior, lv.prior, batch=True)
    top = levels[-1].posterior
    comp = prior.component(torch.as_tensor(component), top.mean)
    total = total + gaussian_kl(top, comp, batch=True)
    return total.mean()


def pair_matrices(labels) -> tuple[Tensor, Tensor]:
    """Boolean positive / negative pair matrices; negative labels mean unlabeled."""
    labels = torch.as_tensor(labels)
    known = labels >= 0
    both = known[:, None] & known[None, :]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    return both & same & ~eye, both & ~same


def pooled_means(means: Sequence[Tensor]) -> list[Tensor]:
    """Spatial mean of each level's posterior mean -> (B, channels) vectors."""
    return [m.flatten(2).mean(2) if m.dim() > 2 else m for m in means]


def _pair_distance(vecs: Sequence[Tensor], i: Tensor, j: Tensor) -> Tensor:
    d = 0.0
    for v in vecs:
        sq = (v[i] - v[j]).pow(2).sum(1)
        pos = sq > 0
        # sqrt has an infinite slope at 0; coincident points get distance 0 and gradient 0
        d = d + torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return d


def negative_penalty(d: Tensor, margin: float) -> Tensor:
    return torch.where(d < margin, (margin - d).pow(2), torch.zeros_like(d))


def contrastive_loss(means: Sequence[Tensor], labels, margin: float, lam: float) -> ContrastiveTerm:
    """lam * (mean positive-pair distance) + (1 - lam) * sum of hinge penalties on negative pairs.

    The distance between two items is the sum over levels of the Euclidean distance
    between their spatially pooled posterior means.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    vecs = pooled_means(means)
    P, N = pair_matrices(labels)
    zero = vecs[0].sum() * 0.0
    pi, pj = torch.nonzero(P, as_tuple=True)
    ni, nj = torch.nonzero(N, as_tuple=True)
    pos = _pair_distance(vecs, pi, pj).mean() if len(pi) else zero
    neg = negative_penalty(_pair_distance(vecs, ni, nj), margin).sum() if len(ni) else zero
    return ContrastiveTerm(lam * pos + (1 - lam) * neg, pos, neg, len(pi), len(ni))


def total_loss(parts: dict, weights: LossWeights) -> LossBreakdown:
    """Weighted sum inpaint + a1*ce + a2*kl + a3*cl + w_H*entropy.

    ``parts`` maps term names to floats or scalar tensors; missing terms count as 0.
    """
    vals = {k: parts.get(k, 0.0) for k in ("inpaint", "ce", "kl", "cl", "entropy")}
    for name, v in vals.items():
        x = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(x):
            raise NumericError(f"loss term {name!r} is not finite ({x})")
    total = (
        vals["inpaint"]
        + weights.alpha1 * vals["ce"]
        + weights.alpha2 * vals["kl"]
        + weights.alpha3 * vals["cl"]
        + weights.entropy_weight * vals["entropy"]
    )
    return LossBreakdown(total=total, **vals)
