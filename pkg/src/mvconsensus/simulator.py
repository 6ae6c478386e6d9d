"""Synthetic multi-camera scenes with exact ground truth.

A single ellipsoid subject moves along a smooth closed trajectory inside a
ring of cameras. Masks come from analytic ray/ellipsoid intersection at pixel
centers; backgrounds are smooth procedural textures, optionally with static
blobs, plus per-view decoys that exist in one camera only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .camera import CameraModel, CameraRig, look_at
from .errors import InvalidConfig

SUBJECT_BOTTOM = np.array([0.80, 0.18, 0.12])
SUBJECT_TOP = np.array([0.98, 0.80, 0.22])


@dataclass(frozen=True)
class Decoy:
    """A disc drawn in one camera only, drifting on a small circle in the image."""

    camera: int
    u: float
    v: float
    radius_u: float = 9.0
    radius_v: float = 20.0
    drift: float = 6.0
    color: tuple[float, float, float] = (0.92, 0.45, 0.15)


@dataclass(frozen=True)
class SceneConfig:
    n_cameras: int = 3
    ring_radius: float = 8.0
    camera_height: float = 1.2
    image_size: tuple[int, int] = (128, 128)
    focal: float = 280.0
    subject_axes: tuple[float, float, float] = (0.3, 0.3, 0.85)
    trajectory_radius: float = 0.9
    trajectory_knots: int = 6
    texture_octaves: int = 3
    texture_blobs: int = 0
    distractors: tuple[Decoy, ...] = ()
    moving_cameras: bool = False
    pan_amplitude: float = 0.05
    frames: int = 200
    seed: int = 7

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractors"] = [asdict(x) for x in self.distractors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["distractors"] = tuple(Decoy(**x) for x in d.get("distractors", ()))
        for key in ("image_size", "subject_axes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FrameView:
    image: np.ndarray
    gt_mask: np.ndarray
    gt_box: tuple[float, float, float, float]


@dataclass
class FrameBundle:
    images: list[np.ndarray]
    gt_masks: list[np.ndarray]
    gt_boxes: list[tuple[float, float, float, float]]
    subject_pos: np.ndarray
    rig: CameraRig = field(repr=False)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, octaves: int) -> np.ndarray:
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        n = 3 * 2**o
        coarse = rng.random((n + 1, n + 1))
        ys = np.linspace(0, n, h)
        xs = np.linspace(0, n, w)
        y0 = np.minimum(np.floor(ys).astype(int), n - 1)
        x0 = np.minimum(np.floor(xs).astype(int), n - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        # smoothstep keeps the octave C1 across lattice lines
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        a = coarse[y0][:, x0]
        b = coarse[y0][:, x0 + 1]
        c = coarse[y0 + 1][:, x0]
        d = coarse[y0 + 1][:, x0 + 1]
        out += amp * ((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d))
        total += amp
        amp *= 0.5
    return out / total


def background_texture(rng: np.random.Generator, h: int, w: int, octaves: int, blobs: int) -> np.ndarray:
    base = rng.uniform([0.25, 0.35, 0.25], [0.45, 0.55, 0.55])
    tex = np.empty((h, w, 3))
    for ch in range(3):
        tex[..., ch] = base[ch] + 0.25 * (_smooth_noise(rng, h, w, octaves) - 0.5)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(blobs):
        cu, cv = rng.uniform(0, w), rng.uniform(0, h)
        ru, rv = rng.uniform(4, 12), rng.uniform(4, 12)
        inside = ((xx - cu) / ru) ** 2 + ((yy - cv) / rv) ** 2 <= 1
        tex[inside] = rng.uniform(0.1, 0.6, size=3)
    return np.clip(tex, 0.0, 1.0)


class Scene:
    def __init__(self, config: SceneConfig, rig: CameraRig, knots: np.ndarray, textures: list[np.ndarray]):
        self.config = config
        self.rig = rig
        self.knots = knots
        self.textures = textures
        t = np.linspace(0.0, 1.0, len(knots) + 1)
        self._spline = CubicSpline(t, np.vstack([knots, knots[:1]]), bc_type="periodic")
        self._rigs: dict[int, CameraRig] = {}

    @cached_property
    def centroid(self) -> np.ndarray:
        ts = np.linspace(0, 1, 256, endpoint=False)
        return self._spline(ts).mean(axis=0)

    def subject_pos(self, t: int) -> np.ndarray:
        return np.asarray(self._spline((t % self.config.frames) / self.config.frames), dtype=np.float64)

    def rig_at(self, t: int) -> CameraRig:
        if not self.config.moving_cameras:
            return self.rig
        if t not in self._rigs:
            self._rigs[t] = _ring_rig(self.config, self.centroid, pan_phase=t)
        return self._rigs[t]


def _ring_rig(config: SceneConfig, target: np.ndarray, pan_phase: Optional[int] = None) -> CameraRig:
    W, H = config.image_size
    cams = []
    # two opposite cameras would share one optical axis, so a pair sits a quarter turn apart
    step = math.pi / 2 if config.n_cameras == 2 else 2 * math.pi / config.n_cameras
    for c in range(config.n_cameras):
        a = step * c
        eye = np.array([config.ring_radius * math.cos(a), config.ring_radius * math.sin(a), config.camera_height])
        aim = np.array(target, dtype=np.float64)
        if pan_phase is not None:
            # pan sideways around the aim point; amplitude is in radians
            yaw = config.pan_amplitude * math.sin(2 * math.pi * pan_phase / 50.0 + c)
            d = aim - eye
            cy, sy = math.cos(yaw), math.sin(yaw)
            aim = eye + np.array([cy * d[0] - sy * d[1], sy * d[0] + cy * d[1], d[2]])
        cams.append(look_at(eye, aim, config.focal, W, H))
    return CameraRig(tuple(cams))


def make_scene(config: SceneConfig) -> Scene:
    if config.n_cameras < 2:
        raise InvalidConfig(f"need at least 2 cameras, got {config.n_cameras}")
    if config.frames < 1 or min(config.image_size) < 16:
        raise InvalidConfig("frames must be positive and images at least 16 px")
    rng = np.random.default_rng(config.seed)
    n = config.trajectory_knots
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    rad = config.trajectory_radius * np.sqrt(rng.uniform(0.2, 1.0, n))
    knots = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.full(n, config.subject_axes[2])], axis=1)
    probe = Scene(config, None, knots, [])
    rig = _ring_rig(config, probe.centroid)
    W, H = config.image_size
    textures = [background_texture(rng, H, W, config.texture_octaves, config.texture_blobs) for _ in range(config.n_cameras)]
    scene = Scene(config, rig, knots, textures)
    _check_visible(scene)
    return scene


def _check_visible(scene: Scene) -> None:
    a = np.asarray(scene.config.subject_axes)
    offsets = np.array([[s * a[0], 0, 0] for s in (-1, 1)] + [[0, s * a[1], 0] for s in (-1, 1)] + [[0, 0, s * a[2]] for s in (-1, 1)])
    for t in np.linspace(0, scene.config.frames, 40, endpoint=False):
        pos = scene.subject_pos(int(t))
        rig = scene.rig_at(int(t))
        for c, cam in enumerate(rig):
            P = cam.P.numpy()
            X = np.hstack([pos + offsets, np.ones((len(offsets), 1))]) @ P.T
            if (X[:, 2] <= 0).any():
                raise InvalidConfig(f"subject behind camera {c} at frame {int(t)}")
            uv = X[:, :2] / X[:, 2:]
            if (uv < 0).any() or (uv[:, 0] >= cam.width).any() or (uv[:, 1] >= cam.height).any():
                raise InvalidConfig(f"subject leaves the view of camera {c} at frame {int(t)}")


def _pixel_rays(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W] + 0.5
    x = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    d = x @ cam.M_inv.numpy().T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cam.center.numpy(), d


def _ellipsoid_hits(origin, dirs, center, axes):
    o = (origin - center) / axes
    d = dirs / axes
    a = (d * d).sum(-1)
    b = 2 * (d @ o)
    c = o @ o - 1
    disc = b * b - 4 * a * c
    hit = disc >= 0
    lam = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), np.inf)
    hit &= lam > 0
    return hit, lam


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    x0, x1, y0, y1 = cols[0], cols[-1] + 1, rows[0], rows[-1] + 1
    return ((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0))


def render(scene: Scene, c: int, t: int) -> FrameView:
    cfg = scene.config
    if not 0 <= t < cfg.frames:
        raise IndexError(f"frame {t} outside [0, {cfg.frames})")
    cam = scene.rig_at(t)[c]
    H, W = cam.height, cam.width
    if cfg.moving_cameras:
        image = _panned_background(scene, c, t)
    else:
        image = scene.textures[c].copy()

    vv, uu = np.mgrid[0:H, 0:W] + 0.5
    for dec in cfg.distractors:
        if dec.camera != c:
            continue
        phase = 2 * math.pi * t / max(cfg.frames, 1)
        du, dv = dec.drift * math.cos(phase), dec.drift * math.sin(phase)
        r2 = ((uu - dec.u - du) / dec.radius_u) ** 2 + ((vv - dec.v - dv) / dec.radius_v) ** 2
        inside = r2 <= 1
        shade = 0.75 + 0.25 * np.sqrt(np.clip(1 - r2, 0, 1))
        image[inside] = (np.asarray(dec.color) * shade[..., None])[inside]

    pos = scene.subject_pos(t)
    axes = np.asarray(cfg.subject_axes)
    origin, dirs = _pixel_rays(cam)
    hit, lam = _ellipsoid_hits(origin, dirs, pos, axes)
    pts = origin + np.where(hit, lam, 0)[..., None] * dirs
    height = np.clip((pts[..., 2] - (pos[2] - axes[2])) / (2 * axes[2]), 0, 1)
    color = SUBJECT_BOTTOM + height[..., None] * (SUBJECT_TOP - SUBJECT_BOTTOM)
    normal = (pts - pos) / axes**2
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True) + 1e-12
    lambert = np.clip(-(normal * dirs).sum(-1), 0, 1)
    color = color * (0.55 + 0.45 * lambert)[..., None]
    image[hit] = color[hit]
    return FrameView(image=np.clip(image, 0, 1), gt_mask=hit, gt_box=_tight_box(hit))


def _panned_background(scene: Scene, c: int, t: int) -> np.ndarray:
    # texture addressed by viewing direction so panning shifts it consistently
    cam = scene.rig_at(t)[c]
    _, dirs = _pixel_rays(cam)
    base = scene.rig[c]
    fwd = base.M[2].numpy() / np.linalg.norm(base.M[2].numpy())
    right = base.M[0].numpy() - base.M[0].numpy() @ fwd * fwd
    right /= np.linalg.norm(right)
    az = np.arctan2(dirs @ right, dirs @ fwd)
    el = dirs[..., 2]
    tex = scene.textures[c]
    H, W = tex.shape[:2]
    u = np.clip((az * scene.config.focal / W + 0.5) * (W - 1), 0, W - 1)
    v = np.clip((0.5 - el * scene.config.focal / H) * (H - 1), 0, H - 1)
    return tex[np.round(v).astype(int), np.round(u).astype(int)].copy()


def render_frame(scene: Scene, t: int) -> FrameBundle:
    views = [render(scene, c, t) for c in range(scene.config.n_cameras)]
    return FrameBundle(
        images=[v.image for v in views],
        gt_masks=[v.gt_mask for v in views],
        gt_boxes=[v.gt_box for v in views],
        subject_pos=scene.subject_pos(t),
        rig=scene.rig_at(t),
    )
