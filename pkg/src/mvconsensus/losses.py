"""Self-supervised training objectives.

All sampled terms are multiplied by the importance ratio r_j of the drawn
voxel, so averaging them over draws estimates the expectation under q.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .bbox import PixelBBox, coverage
from .camera import as_tensor

SEG_LAMBDA = 0.005


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 2.0
    eta: float = 0.25
    zeta: float = 0.1
    use_q_prior: bool = False
    # "sum" adds squared errors over all pixels; "mean" divides each camera's
    # reconstruction and perceptual sums by their element counts
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass(eq=False)
class LossBreakdown:
    g: torch.Tensor
    o: torch.Tensor
    o_perc: torch.Tensor
    l_seg: torch.Tensor
    l_q: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("g", "o", "o_perc", "l_seg", "l_q", "total")}


def loss_G(originals: Sequence[torch.Tensor], inpainted: Sequence[torch.Tensor], boxes: Sequence[PixelBBox], ratio) -> torch.Tensor:
    """Negative area-normalized inpainting error over each expanded box.

    The error map is weighted by the pixel coverage of the expanded box, which
    carries the gradient with respect to the box; the inpainted images
    themselves are taken as given.
    """
    ratio = as_tensor(ratio)
    total = torch.zeros((), dtype=torch.float64)
    for img, bg, box in zip(originals, inpainted, boxes):
        box.check()
        H, W = img.shape[:2]
        err = ((bg - img) ** 2).sum(dim=-1)
        region = coverage(box.expanded(), H, W)
        total = total + (region * err).sum() / box.area
    return -ratio * total


def _reduce(sq: torch.Tensor, reduction: str) -> torch.Tensor:
    return sq.mean() if reduction == "mean" else sq.sum()


def loss_O(originals: Sequence[torch.Tensor], reconstructions: Sequence[torch.Tensor], ratio, reduction: str = "sum") -> torch.Tensor:
    ratio = as_tensor(ratio)
    total = torch.zeros((), dtype=torch.float64)
    for img, rec in zip(originals, reconstructions):
        total = total + _reduce((rec - img) ** 2, reduction)
    return ratio * total


class PoolProjection:
    """Fixed stand-in feature map: 4x4 average pooling, then a seeded random
    linear map from RGB to 32 channels at every pooled location."""

    def __init__(self, channels: int = 32, pool: int = 4, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.pool = pool
        self.weight = torch.randn(channels, 3, generator=gen, dtype=torch.float64) / 3**0.5

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        x = image.permute(2, 0, 1).unsqueeze(0)
        pooled = F.avg_pool2d(x, self.pool)[0]  # (3, h, w)
        return torch.einsum("kc,chw->khw", self.weight, pooled)


DEFAULT_PHI = PoolProjection()


def loss_perceptual(originals, reconstructions, ratio, phi=None, reduction: str = "sum") -> torch.Tensor:
    phi = DEFAULT_PHI if phi is None else phi
    ratio = as_tensor(ratio)
    total = torch.zeros((), dtype=torch.float64)
    for img, rec in zip(originals, reconstructions):
        total = total + _reduce((phi(rec) - phi(img)) ** 2, reduction)
    return ratio * total


def prior_seg(masks: Sequence[torch.Tensor], lam: float = SEG_LAMBDA) -> torch.Tensor:
    """Sum over cameras of ``|mean(mask) - lam| + lam`` on full-image masks."""
    total = torch.zeros((), dtype=torch.float64)
    for m in masks:
        total = total + torch.abs(m.mean() - lam) + lam
    return total


def prior_q(q) -> torch.Tensor:
    q = getattr(q, "q", q)
    return as_tensor(q).abs().sum()


def combine(g, o, o_perc, l_seg, l_q=None, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted total. ``g`` is the (non-positive) G value, so it enters as ``alpha * g``."""
    z = torch.zeros((), dtype=torch.float64)
    g, o, o_perc, l_seg = (as_tensor(t) for t in (g, o, o_perc, l_seg))
    l_q = z if l_q is None else as_tensor(l_q)
    total = weights.alpha * g + weights.beta * o + weights.gamma * o_perc + weights.eta * l_seg
    if weights.use_q_prior:
        total = total + weights.zeta * l_q
    return LossBreakdown(g=g, o=o, o_perc=o_perc, l_seg=l_seg, l_q=l_q, total=total)


def loss_total(
    originals: Sequence[torch.Tensor],
    inpainted: Sequence[torch.Tensor],
    reconstructions: Sequence[torch.Tensor],
    pasted_masks: Sequence[torch.Tensor],
    boxes: Sequence[PixelBBox],
    ratio,
    q: Optional[torch.Tensor] = None,
    weights: LossWeights = LossWeights(),
    phi=None,
) -> LossBreakdown:
    g = loss_G(originals, inpainted, boxes, ratio)
    o = loss_O(originals, reconstructions, ratio, weights.reduction)
    o_perc = loss_perceptual(originals, reconstructions, ratio, phi, weights.reduction)
    l_seg = prior_seg(pasted_masks)
    l_q = prior_q(q) if q is not None else None
    return combine(g, o, o_perc, l_seg, l_q, weights)
