"""Importance sampling of a single voxel from the fused occupancy.

Voxels are drawn from ``k = 0.936 q + eps`` with ``eps = 0.064 / V`` over the V
supported voxels, so 6.4% of the mass explores uniformly. The returned ratio
``q_j / k_j`` keeps the sampled loss an unbiased estimate of its expectation
under q; k is treated as a constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .proposal_grid import VoxelDistribution

EXPLORATION_MASS = 0.064


@dataclass(frozen=True, eq=False)
class ImportanceSample:
    voxel: int
    ratio: torch.Tensor
    k: torch.Tensor


def exploration_eps(n_support: int) -> float:
    return EXPLORATION_MASS / n_support


def importance_distribution(dist: VoxelDistribution) -> torch.Tensor:
    """Sampling distribution over all V voxels (zero outside the support), detached."""
    V = dist.V
    if V < 1:
        raise ValueError("empty support")
    eps = exploration_eps(V)
    q = dist.q.detach()
    k = torch.zeros_like(q)
    sup = torch.from_numpy(dist.support)
    k[sup] = q[sup] * (1.0 - V * eps) + eps
    return k


def draw(k_support: np.ndarray, rng: np.random.Generator, n: int | None = None):
    """Inverse-CDF draws of positions into ``k_support``."""
    cdf = np.cumsum(k_support)
    u = rng.random(n) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(k_support) - 1)


def sample_voxel(dist: VoxelDistribution, rng: np.random.Generator) -> ImportanceSample:
    k = importance_distribution(dist)
    sup = dist.support
    pos = int(draw(k[torch.from_numpy(sup)].numpy(), rng))
    j = int(sup[pos])
    return ImportanceSample(voxel=j, ratio=dist.q[j] / k[j], k=k)


def child_rng(seed: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_id)])
