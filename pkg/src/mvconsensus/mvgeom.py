"""Closest point to a set of 3D lines, in the least-squares sense.

For lines with origins ``o_c`` and unit directions ``n_c`` the point minimizing
``sum_c (o_c - x)^T (I - n_c n_c^T) (o_c - x)`` solves ``A x = m`` with
``A = sum_c (I - n_c n_c^T)`` and ``m = sum_c (I - n_c n_c^T) o_c``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .camera import CameraRig, Line3, optical_axis
from .errors import DegenerateConfiguration

DAMPING = 1e-9
MAX_CONDITION = 1e9


@dataclass(frozen=True, eq=False)
class LsqResult:
    point: torch.Tensor
    condition: float
    residual: torch.Tensor


def solve3(A: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Solve a 3x3 system through the explicit adjugate inverse."""
    a, bb, c = A[0, 0], A[0, 1], A[0, 2]
    d, e, f = A[1, 0], A[1, 1], A[1, 2]
    g, h, i = A[2, 0], A[2, 1], A[2, 2]
    co00 = e * i - f * h
    co01 = -(d * i - f * g)
    co02 = d * h - e * g
    det = a * co00 + bb * co01 + c * co02
    adj = torch.stack([
        torch.stack([co00, -(bb * i - c * h), bb * f - c * e]),
        torch.stack([co01, a * i - c * g, -(a * f - c * d)]),
        torch.stack([co02, -(a * h - bb * g), a * e - bb * d]),
    ])
    return adj @ b / det


def normal_equations(lines: Sequence[Line3]) -> tuple[torch.Tensor, torch.Tensor]:
    eye = torch.eye(3, dtype=torch.float64)
    A = torch.zeros(3, 3, dtype=torch.float64)
    m = torch.zeros(3, dtype=torch.float64)
    for line in lines:
        proj = eye - torch.outer(line.dir, line.dir)
        A = A + proj
        m = m + proj @ line.origin
    return A, m


def sum_sq_distances(lines: Sequence[Line3], x: torch.Tensor) -> torch.Tensor:
    total = x.new_zeros(())
    for line in lines:
        d = line.origin - x
        total = total + d @ d - (d @ line.dir) ** 2
    return total


def condition_number(A: torch.Tensor) -> float:
    ev = torch.linalg.eigvalsh(A.detach())
    lo, hi = float(ev[0]), float(ev[-1])
    if lo <= 0.0:
        return float("inf")
    return hi / lo


def nearest_point_to_lines(lines: Sequence[Line3]) -> LsqResult:
    """Least-squares intersection of two or more lines.

    Differentiable with respect to every line origin and direction. Raises
    :class:`DegenerateConfiguration` when the normal matrix has condition
    number above ``1e9`` (for instance, all lines parallel).
    """
    lines = list(lines)
    if len(lines) < 2:
        raise DegenerateConfiguration(f"need at least 2 lines, got {len(lines)}")
    A, m = normal_equations(lines)
    cond = condition_number(A)
    if not cond <= MAX_CONDITION:
        raise DegenerateConfiguration(f"condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")
    x = solve3(A + DAMPING * torch.eye(3, dtype=A.dtype), m)
    # clamp guards against a -1e-18 residual from cancellation
    residual = torch.clamp(sum_sq_distances(lines, x), min=0.0)
    return LsqResult(point=x, condition=cond, residual=residual)


def _objective_np(origins: np.ndarray, dirs: np.ndarray, X: np.ndarray) -> np.ndarray:
    # X: (N, 3) candidate points
    d = origins[None, :, :] - X[:, None, :]
    along = np.einsum("nci,ci->nc", d, dirs)
    return (np.einsum("nci,nci->nc", d, d) - along**2).sum(axis=1)


def nearest_point_bruteforce(lines: Sequence[Line3], bounds, step: float) -> np.ndarray:
    """Grid search of the summed squared distance, then pattern refinement.

    ``bounds`` is ``(lo, hi)`` with two 3-vectors. The coarse search evaluates
    every lattice point at spacing ``step``; the refinement repeatedly searches
    the 26-neighbourhood of the incumbent and halves the spacing until it is
    at most ``step / 1024``. Uses objective evaluations only.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    origins = np.array([line.origin.detach().numpy() for line in lines])
    dirs = np.array([line.dir.detach().numpy() for line in lines])
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.arange(lo[k], hi[k] + 0.5 * step, step) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = _objective_np(origins, dirs, grid)
    best = grid[int(np.argmin(vals))]
    best_val = float(vals.min())

    offsets = np.array([o for o in itertools.product((-1, 0, 1), repeat=3)], dtype=np.float64)
    h = step / 2
    # finish a few halvings past step/1024 so ill-conditioned valleys still settle
    while h >= step / 1024 / 8:
        for _ in range(10_000):
            cand = best + h * offsets
            cv = _objective_np(origins, dirs, cand)
            k = int(np.argmin(cv))
            if cv[k] >= best_val:
                break
            best, best_val = cand[k], float(cv[k])
        h /= 2
    return best


def rig_focus_point(rig: CameraRig) -> torch.Tensor:
    """Point nearest to the optical axes of all cameras."""
    return nearest_point_to_lines([optical_axis(cam) for cam in rig]).point
