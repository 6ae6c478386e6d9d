"""3D voxel proposal grid and multi-view fusion of per-view cell probabilities.

Each voxel center projects into one cell of every view's 2D grid. The fused
occupancy of voxel j is proportional to the product over views of the cell
probabilities it lands in, computed in log space and normalized over the
voxels that every camera sees.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .camera import CameraRig, as_tensor, project_h, DEPTH_EPS
from .errors import EmptySupport, InvalidSpec

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class GridSpec2D:
    n_col: int = 8
    n_row: int = 8
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.n_col < 2 or self.n_row < 2:
            raise InvalidSpec(f"2D grid needs at least 2x2 cells, got {self.n_col}x{self.n_row}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidSpec("image size must be positive")

    @property
    def n_cells(self) -> int:
        return self.n_col * self.n_row

    @property
    def cell_w(self) -> float:
        return self.width / self.n_col

    @property
    def cell_h(self) -> float:
        return self.height / self.n_row

    def col_row(self, cell: int) -> tuple[int, int]:
        return cell % self.n_col, cell // self.n_col

    def cell_center(self, cell: int) -> tuple[float, float]:
        col, row = self.col_row(cell)
        return (col + 0.5) * self.cell_w, (row + 0.5) * self.cell_h

    def interior_mask(self) -> torch.Tensor:
        m = torch.zeros(self.n_row, self.n_col, dtype=torch.bool)
        m[1:-1, 1:-1] = True
        return m.reshape(-1)

    @classmethod
    def for_camera(cls, cam, n_col: int = 8, n_row: int = 8) -> "GridSpec2D":
        return cls(n_col, n_row, cam.width, cam.height)


@dataclass(frozen=True, eq=False)
class ProbMap2D:
    spec: GridSpec2D
    p: torch.Tensor

    def check(self, tol: float = 1e-9) -> None:
        p = self.p.detach()
        if p.shape != (self.spec.n_cells,):
            raise InvalidSpec(f"expected {self.spec.n_cells} probabilities, got {tuple(p.shape)}")
        if bool((p < 0).any()):
            raise InvalidSpec("negative probability")
        if abs(float(p.sum()) - 1.0) > tol:
            raise InvalidSpec(f"probabilities sum to {float(p.sum())}")
        if bool((p[~self.spec.interior_mask()] != 0).any()):
            raise InvalidSpec("border cells must have zero probability")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    center: torch.Tensor
    side: float
    dims: tuple[int, int, int]
    centers: torch.Tensor

    @property
    def V(self) -> int:
        return self.centers.shape[0]

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return tuple(self.side / n for n in self.dims)

    def nearest_voxel(self, X) -> int:
        d = self.centers - as_tensor(X)
        return int(torch.argmin((d * d).sum(dim=1)))


@dataclass(frozen=True, eq=False)
class VoxelDistribution:
    grid: VoxelGrid
    q: torch.Tensor
    support: np.ndarray

    @property
    def V(self) -> int:
        return len(self.support)


def build_grid(center, side: float, dims) -> VoxelGrid:
    """Regular lattice of voxel centers filling a cube of edge ``side`` meters."""
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise InvalidSpec(f"voxel dims must be three integers >= 2, got {dims}")
    if not (side > 0 and math.isfinite(side)):
        raise InvalidSpec(f"side must be positive, got {side}")
    center = as_tensor(center).detach().clone()
    axes = []
    for k, n in enumerate(dims):
        h = side / n
        axes.append(center[k] - side / 2 + (torch.arange(n, dtype=torch.float64) + 0.5) * h)
    mesh = torch.meshgrid(*axes, indexing="ij")
    centers = torch.stack(mesh, dim=-1).reshape(-1, 3)
    return VoxelGrid(center=center, side=float(side), dims=dims, centers=centers)


def cell_index(spec: GridSpec2D, u: float, v: float) -> Optional[int]:
    if not (0 <= u < spec.width and 0 <= v < spec.height):
        return None
    return math.floor(u * spec.n_col / spec.width) + spec.n_col * math.floor(v * spec.n_row / spec.height)


def _cells_for_points(spec: GridSpec2D, uv: np.ndarray, w: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    inside = (w > DEPTH_EPS) & (u >= 0) & (u < spec.width) & (v >= 0) & (v < spec.height)
    col = np.floor(np.where(inside, u, 0) * spec.n_col / spec.width).astype(np.int64)
    row = np.floor(np.where(inside, v, 0) * spec.n_row / spec.height).astype(np.int64)
    return np.where(inside, col + spec.n_col * row, -1)


@functools.lru_cache(maxsize=64)
def voxel_cells(rig: CameraRig, grid: VoxelGrid, n_col: int = 8, n_row: int = 8) -> np.ndarray:
    """``(C, V)`` table of 2D cell ids per camera and voxel; -1 when not visible."""
    out = []
    for cam in rig:
        uv, w = project_h(cam, grid.centers)
        spec = GridSpec2D(n_col, n_row, cam.width, cam.height)
        out.append(_cells_for_points(spec, uv.numpy(), w.numpy()))
    table = np.stack(out)
    table.setflags(write=False)
    return table


def visible_support(cells: np.ndarray) -> np.ndarray:
    return np.flatnonzero((cells >= 0).all(axis=0))


def _as_p(m) -> torch.Tensor:
    return m.p if isinstance(m, ProbMap2D) else as_tensor(m)


def _grid_shape(maps) -> tuple[int, int]:
    m = maps[0]
    if isinstance(m, ProbMap2D):
        return m.spec.n_col, m.spec.n_row
    n = int(round(math.sqrt(len(m))))
    return n, n


def fuse(maps: Sequence, rig: CameraRig, grid: VoxelGrid) -> VoxelDistribution:
    """Fuse per-camera cell probabilities into a voxel occupancy distribution.

    ``maps`` holds one :class:`ProbMap2D` (or flat probability tensor, assumed
    square) per camera, in rig order. Differentiable in every probability.
    """
    if len(maps) != rig.C:
        raise InvalidSpec(f"expected {rig.C} probability maps, got {len(maps)}")
    n_col, n_row = _grid_shape(maps)
    cells = voxel_cells(rig, grid, n_col, n_row)
    support = visible_support(cells)
    if support.size == 0:
        raise EmptySupport("no voxel is visible in every camera")
    idx = torch.from_numpy(cells[:, support])
    logq = torch.zeros(len(support), dtype=torch.float64)
    for c, m in enumerate(maps):
        p = _as_p(m)
        logq = logq + torch.log(torch.clamp(p[idx[c]], min=LOG_FLOOR))
    q_support = torch.softmax(logq, dim=0)
    q = torch.zeros(grid.V, dtype=torch.float64).index_put((torch.from_numpy(support),), q_support)
    return VoxelDistribution(grid=grid, q=q, support=support)


def marginalize(dist: VoxelDistribution, rig: CameraRig, cam_index: int, n_col: int = 8, n_row: int = 8) -> torch.Tensor:
    """Per-cell mass of the voxel distribution as seen from one camera."""
    cells = voxel_cells(rig, dist.grid, n_col, n_row)[cam_index]
    sup = dist.support
    out = torch.zeros(n_col * n_row, dtype=torch.float64)
    return out.index_add(0, torch.from_numpy(cells[sup]), dist.q[torch.from_numpy(sup)])
