"""Projective camera models, projection, back-projection and rig files.

Pixel convention: u grows to the right from the left image edge, v grows
downward from the top edge, u in [0, width) and v in [0, height).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import BehindCamera, ParseError, SingularCamera, TooFewCameras

DTYPE = torch.float64
DET_EPS = 1e-12
DEPTH_EPS = 1e-9


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class Line3:
    """A ray with an origin and a unit direction (both world meters)."""

    origin: torch.Tensor
    dir: torch.Tensor

    def __post_init__(self):
        n = float(torch.linalg.norm(self.dir.detach()))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"line direction must be unit length, got norm {n}")

    @classmethod
    def from_points(cls, origin, direction) -> "Line3":
        origin = as_tensor(origin)
        direction = as_tensor(direction)
        return cls(origin, direction / torch.linalg.norm(direction))

    def at(self, lam) -> torch.Tensor:
        return self.origin + lam * self.dir


@dataclass(frozen=True, eq=False)
class CameraModel:
    P: torch.Tensor
    M: torch.Tensor
    M_inv: torch.Tensor
    center: torch.Tensor
    width: int
    height: int

    @property
    def m(self) -> torch.Tensor:
        return self.P[:, 3]

    def to_list(self) -> list[list[float]]:
        return [[float(x) for x in row] for row in self.P.tolist()]


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[CameraModel, ...]

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise TooFewCameras(f"a rig needs at least 2 cameras, got {len(self.cameras)}")

    @property
    def C(self) -> int:
        return len(self.cameras)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i) -> CameraModel:
        return self.cameras[i]


def decompose(P, width: int, height: int) -> CameraModel:
    """Split ``P = [M | m]`` and cache ``M^-1`` and the optical center ``-M^-1 m``."""
    P = as_tensor(P)
    if P.shape != (3, 4):
        raise ValueError(f"projection matrix must be 3x4, got {tuple(P.shape)}")
    if not torch.isfinite(P).all():
        raise SingularCamera("projection matrix has non-finite entries")
    M = P[:, :3]
    det = float(torch.linalg.det(M))
    if abs(det) <= DET_EPS:
        raise SingularCamera(f"|det M| = {abs(det):.3e} <= {DET_EPS}")
    M_inv = torch.linalg.inv(M)
    center = -(M_inv @ P[:, 3])
    return CameraModel(P=P, M=M, M_inv=M_inv, center=center, width=int(width), height=int(height))


def project_h(cam: CameraModel, X) -> tuple[torch.Tensor, torch.Tensor]:
    """Project ``(..., 3)`` points; returns pixel coordinates and homogeneous depth w.

    No depth check is made; callers that need one use :func:`project`.
    """
    X = as_tensor(X)
    x = X @ cam.M.T + cam.m
    w = x[..., 2]
    return x[..., :2] / w.unsqueeze(-1), w


def project(cam: CameraModel, X) -> torch.Tensor:
    uv, w = project_h(cam, X)
    if bool((w.detach() <= DEPTH_EPS).any()):
        raise BehindCamera(f"point has homogeneous depth {float(w.detach().min()):.3e}")
    return uv


def ray_through_pixel(cam: CameraModel, u, v) -> Line3:
    """Line of sight through pixel (u, v); u and v may be differentiable tensors.

    Since ``M @ (M^-1 x) = x`` has third component 1, the unnormalized direction
    already gives positive depth for positive ray parameters.
    """
    u = as_tensor(u)
    v = as_tensor(v)
    x = torch.stack([u, v, torch.ones_like(u)])
    d = cam.M_inv @ x
    return Line3(cam.center, d / torch.linalg.norm(d))


def optical_axis(cam: CameraModel) -> Line3:
    r3 = cam.M[2]
    return Line3(cam.center, r3 / torch.linalg.norm(r3))


def look_at(eye, target, focal: float, width: int, height: int, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Pinhole camera at ``eye`` looking at ``target`` with square pixels.

    The camera's downward image axis is aligned with ``-up`` projected onto the
    image plane, so cameras built with the same ``up`` share a vertical.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise SingularCamera("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    P = K @ np.hstack([R, (-R @ eye)[:, None]])
    return decompose(P, width, height)


def rig_from_matrices(mats: Sequence, sizes: Sequence[tuple[int, int]]) -> CameraRig:
    return CameraRig(tuple(decompose(P, w, h) for P, (w, h) in zip(mats, sizes)))


def rig_to_dict(rig: CameraRig) -> dict:
    return {"cameras": [{"P": cam.to_list(), "width": cam.width, "height": cam.height} for cam in rig]}


def save_rig(rig: CameraRig, path) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=1) + "\n", encoding="utf-8")


def rig_from_dict(data) -> CameraRig:
    try:
        entries = data["cameras"]
        cams = []
        for e in entries:
            P = np.asarray(e["P"], dtype=np.float64)
            if P.shape != (3, 4):
                raise ParseError(f"camera P must be 3x4, got shape {P.shape}")
            cams.append((P, int(e["width"]), int(e["height"])))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed rig: {exc}") from exc
    if len(cams) < 2:
        raise TooFewCameras(f"a rig needs at least 2 cameras, got {len(cams)}")
    return CameraRig(tuple(decompose(P, w, h) for P, w, h in cams))


def load_rig(path) -> CameraRig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return rig_from_dict(data)
