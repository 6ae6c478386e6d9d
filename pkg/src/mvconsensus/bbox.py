"""Bounding boxes: decoding from grid cells, multi-view consistency, and the
differentiable crop / uncrop / paste / composite operators.

Resampling is separable because boxes are axis aligned: a crop is
``Ry @ I @ Rx^T`` with bilinear interpolation matrices built from the box, so
gradients flow to the image values and to the box parameters alike.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .camera import CameraRig, as_tensor, project, ray_through_pixel
from .errors import DegenerateBox, InvertedBox
from .proposal_grid import GridSpec2D
from .mvgeom import nearest_point_to_lines

PATCH = 128
EXPAND = 1.15
MIN_SIDE = 1.0


@dataclass(frozen=True, eq=False)
class BBoxParams:
    cell: int
    dx: torch.Tensor
    dy: torch.Tensor
    sx: torch.Tensor
    sy: torch.Tensor


@dataclass(frozen=True, eq=False)
class PixelBBox:
    cu: torch.Tensor
    cv: torch.Tensor
    w: torch.Tensor
    h: torch.Tensor

    @classmethod
    def of(cls, cu, cv, w, h) -> "PixelBBox":
        return cls(as_tensor(cu), as_tensor(cv), as_tensor(w), as_tensor(h))

    @property
    def left(self):
        return self.cu - self.w / 2

    @property
    def top(self):
        return self.cv - self.h / 2

    @property
    def area(self):
        return self.w * self.h

    def check(self) -> None:
        w, h = float(self.w.detach()), float(self.h.detach())
        if not (w >= MIN_SIDE and h >= MIN_SIDE):
            raise DegenerateBox(f"box {w:.3f}x{h:.3f} px is below {MIN_SIDE} px")

    def expanded(self, factor: float = EXPAND) -> "PixelBBox":
        return PixelBBox(self.cu, self.cv, self.w * factor, self.h * factor)

    def detach(self) -> "PixelBBox":
        return PixelBBox(self.cu.detach(), self.cv.detach(), self.w.detach(), self.h.detach())

    def as_tuple(self) -> tuple[float, float, float, float]:
        return float(self.cu.detach()), float(self.cv.detach()), float(self.w.detach()), float(self.h.detach())


def decode_bbox(spec: GridSpec2D, params: BBoxParams) -> PixelBBox:
    """Box whose center stays inside its cell: ``cu = g_x + (dx - 0.5) * cell_w``."""
    gx, gy = spec.cell_center(params.cell)
    box = PixelBBox(
        cu=gx + (as_tensor(params.dx) - 0.5) * spec.cell_w,
        cv=gy + (as_tensor(params.dy) - 0.5) * spec.cell_h,
        w=as_tensor(params.sx) * spec.width,
        h=as_tensor(params.sy) * spec.height,
    )
    box.check()
    return box


def _triangulate_and_reproject(rig: CameraRig, us: Sequence, vs: Sequence) -> list[torch.Tensor]:
    lines = [ray_through_pixel(cam, u, v) for cam, u, v in zip(rig, us, vs)]
    point = nearest_point_to_lines(lines).point
    return [project(cam, point) for cam in rig]


def adjust_centers(rig: CameraRig, boxes: Sequence[PixelBBox]) -> list[PixelBBox]:
    """Move every box center to the reprojection of the triangulated center."""
    uv = _triangulate_and_reproject(rig, [b.cu for b in boxes], [b.cv for b in boxes])
    return [replace(b, cu=p[0], cv=p[1]) for b, p in zip(boxes, uv)]


def adjust_heights(rig: CameraRig, boxes: Sequence[PixelBBox]) -> list[PixelBBox]:
    """Triangulate top and bottom midpoints; the new height is their reprojected
    vertical distance. Centers and widths are left as they are."""
    tops = _triangulate_and_reproject(rig, [b.cu for b in boxes], [b.cv - b.h / 2 for b in boxes])
    bots = _triangulate_and_reproject(rig, [b.cu for b in boxes], [b.cv + b.h / 2 for b in boxes])
    out = []
    for c, (b, t, bt) in enumerate(zip(boxes, tops, bots)):
        h = bt[1] - t[1]
        if float(h.detach()) <= 0:
            raise InvertedBox(f"camera {c}: reprojected top lies below bottom")
        out.append(replace(b, h=h))
    return out


def adjust_widths(rig: CameraRig, boxes: Sequence[PixelBBox]) -> list[PixelBBox]:
    """Width counterpart of :func:`adjust_heights` using left/right midpoints.

    Only meaningful for parallel cameras; kept for the width-consistency ablation.
    """
    lefts = _triangulate_and_reproject(rig, [b.cu - b.w / 2 for b in boxes], [b.cv for b in boxes])
    rights = _triangulate_and_reproject(rig, [b.cu + b.w / 2 for b in boxes], [b.cv for b in boxes])
    return [replace(b, w=torch.abs(r[0] - l[0])) for b, l, r in zip(boxes, lefts, rights)]


def _interp_matrix(pos: torch.Tensor, n: int) -> torch.Tensor:
    """``(len(pos), n)`` bilinear weights sampling index coordinates ``pos``.

    Pixel i covers ``[i - 0.5, i + 0.5]``, so samples in the outer half pixel
    read the edge pixel and samples beyond ``[-0.5, n - 0.5]`` read zero. At
    integer positions the subgradient is the linear piece of the cell ending
    at the sample.
    """
    inside = ((pos.detach() >= -0.5) & (pos.detach() <= n - 0.5)).to(pos.dtype)
    pos = torch.clamp(pos, 0.0, n - 1.0)
    base = torch.ceil(pos.detach()) - 1
    frac = pos - base
    idx = torch.arange(n, dtype=torch.float64)
    left = (idx[None, :] == base[:, None]).to(pos.dtype)
    right = (idx[None, :] == base[:, None] + 1).to(pos.dtype)
    return inside[:, None] * ((1 - frac)[:, None] * left + frac[:, None] * right)


def crop_matrices(bbox: PixelBBox, height: int, width: int, size: int = PATCH):
    k = torch.arange(size, dtype=torch.float64) + 0.5
    xs = bbox.left + k * (bbox.w / size) - 0.5
    ys = bbox.top + k * (bbox.h / size) - 0.5
    return _interp_matrix(ys, height), _interp_matrix(xs, width)


def crop(image: torch.Tensor, bbox: PixelBBox, size: int = PATCH) -> torch.Tensor:
    """Bilinear resampling of the box onto a ``size x size`` patch; zeros off-image."""
    bbox.check()
    H, W = image.shape[:2]
    Ry, Rx = crop_matrices(bbox, H, W, size)
    return torch.einsum("ah,hwc,bw->abc", Ry, image, Rx)


def uncrop(patch: torch.Tensor, bbox: PixelBBox, canvas: tuple[int, int]) -> torch.Tensor:
    """Bilinear splat of a patch into a zero canvas: the exact adjoint of :func:`crop`."""
    bbox.check()
    H, W = canvas
    Ry, Rx = crop_matrices(bbox, H, W, patch.shape[0])
    return torch.einsum("ah,abk,bw->hwk", Ry, patch, Rx)


def paste(patch: torch.Tensor, bbox: PixelBBox, canvas: tuple[int, int]) -> torch.Tensor:
    """Inverse warp: sample the patch at every canvas pixel center; zero outside.

    Unlike :func:`uncrop` this preserves values (a constant patch pastes as the
    same constant over the box footprint), which is what recomposition needs.
    """
    bbox.check()
    H, W = canvas
    n = patch.shape[0]
    ty = (torch.arange(H, dtype=torch.float64) + 0.5 - bbox.top) * (n / bbox.h) - 0.5
    tx = (torch.arange(W, dtype=torch.float64) + 0.5 - bbox.left) * (n / bbox.w) - 0.5
    Qy = _interp_matrix(ty, n)
    Qx = _interp_matrix(tx, n)
    return torch.einsum("ha,abk,wb->hwk", Qy, patch, Qx)


def composite(fg: torch.Tensor, mask: torch.Tensor, bg: torch.Tensor, bbox: PixelBBox) -> torch.Tensor:
    """``paste(fg * S) + bg * (1 - paste(S))``."""
    H, W = bg.shape[:2]
    S = mask.unsqueeze(-1)
    both = paste(torch.cat([fg * S, S], dim=-1), bbox, (H, W))
    return both[..., :3] + bg * (1 - both[..., 3:])


def coverage(bbox: PixelBBox, height: int, width: int) -> torch.Tensor:
    """Fraction of each pixel covered by the box, ``(H, W)``; piecewise linear in the box."""
    def axis(lo, hi, n):
        i = torch.arange(n, dtype=torch.float64)
        return torch.clamp(torch.minimum(i + 1, hi) - torch.maximum(i, lo), 0.0, 1.0)

    ry = axis(bbox.top, bbox.top + bbox.h, height)
    rx = axis(bbox.left, bbox.left + bbox.w, width)
    return ry[:, None] * rx[None, :]
