"""Self-supervised multi-view training and single-view inference.

One step uses one frame set (an image per camera at a shared time):

    detect -> fuse -> sample_voxel -> decode_boxes -> adjust_centers
    -> adjust_heights -> synthesize -> loss_total -> update

``synthesize`` covers crop, mask head, inpainting and recomposition. The
stage names are appended to ``Trainer.trace`` as they run; disabled
consistency stages are skipped and therefore absent from the trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .bbox import PixelBBox, adjust_centers, adjust_heights, adjust_widths, composite, crop, decode_bbox, paste
from .camera import CameraRig, ray_through_pixel
from .errors import BehindCamera, DegenerateBox, DegenerateConfiguration, InvalidConfig, InvertedBox, NonFiniteValue
from .proposal_grid import GridSpec2D, VoxelGrid, build_grid, fuse, voxel_cells
from .losses import LossBreakdown, LossWeights, loss_total
from .metrics import EvalReport, evaluate
from .model import Detector, MaskHead, image_features, inpaint, inpaint_tensor
from .mvgeom import nearest_point_to_lines, rig_focus_point
from .sampling import child_rng, sample_voxel
from .simulator import FrameBundle, Scene, render, render_frame

STAGES = (
    "detect",
    "fuse",
    "sample_voxel",
    "decode_boxes",
    "adjust_centers",
    "adjust_heights",
    "synthesize",
    "loss_total",
    "update",
)
DEGENERATE = (DegenerateConfiguration, DegenerateBox, InvertedBox, BehindCamera, NonFiniteValue)
HOLDOUT_EVERY = 5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    mask_lr: float = 1e-4
    batch: int = 1
    steps: int = 2000
    seed: int = 7
    n_cameras: int = 3
    grid_dims: tuple[int, int, int] = (16, 16, 16)
    grid_side: float = 4.0
    n_col: int = 8
    n_row: int = 8
    center_consistency: bool = True
    height_consistency: bool = True
    width_consistency: bool = False
    tc_baseline: bool = False
    tc_weight: float = 0.1
    mask_gain: float = 10.0
    # let gradients reach the box through the (parameter-free) fill
    fill_gradient: bool = True
    # "cosine" anneals both rates to zero over ``steps``; "constant" keeps them fixed
    lr_schedule: str = "cosine"
    weights: LossWeights = LossWeights(reduction="mean")

    def __post_init__(self):
        if self.lr <= 0 or self.mask_lr <= 0:
            raise InvalidConfig("learning rates must be positive")
        if self.steps < 0 or self.batch < 1:
            raise InvalidConfig("steps must be >= 0 and batch >= 1")
        if self.n_cameras < 2:
            raise InvalidConfig("need at least 2 cameras")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidConfig(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["grid_dims"] = tuple(d.get("grid_dims", cls.grid_dims))
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)

    @classmethod
    def variant(cls, name: str, **kw) -> "TrainConfig":
        """Ablation presets: ``full``, ``vc`` (w/o view consistency), ``hc``
        (w/o height consistency), ``wc`` (with width consistency), ``tc``
        (triangulation loss instead of box adjustment)."""
        flags = {
            "full": {},
            "vc": dict(center_consistency=False, height_consistency=False),
            "hc": dict(height_consistency=False),
            "wc": dict(width_consistency=True),
            "tc": dict(center_consistency=False, height_consistency=False, tc_baseline=True),
        }
        if name not in flags:
            raise InvalidConfig(f"unknown variant {name!r}; expected one of {sorted(flags)}")
        return cls(**{**flags[name], **kw})


def triangulation_loss_baseline(rig: CameraRig, boxes: Sequence[PixelBBox]) -> torch.Tensor:
    """Sum of squared distances from the least-squares point to the box-center rays."""
    lines = [ray_through_pixel(cam, b.cu, b.cv) for cam, b in zip(rig, boxes)]
    return nearest_point_to_lines(lines).residual


def split_frames(n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Training and held-out frame ids; every fifth frame is held out."""
    t = np.arange(n_frames)
    held = t % HOLDOUT_EVERY == HOLDOUT_EVERY - 1
    return t[~held], t[held]


@dataclass
class StepRecord:
    step: int
    frame: int
    voxel: int
    losses: dict[str, float]
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)


class Trainer:
    """Owns the model parameters, the optimizer and the per-frame feature cache."""

    def __init__(self, scene: Scene, config: TrainConfig = TrainConfig()):
        if scene.config.n_cameras != config.n_cameras:
            raise InvalidConfig(f"scene has {scene.config.n_cameras} cameras, config expects {config.n_cameras}")
        self.scene = scene
        self.config = config
        W, H = scene.config.image_size
        self.spec = GridSpec2D(config.n_col, config.n_row, W, H)
        torch.manual_seed(config.seed)
        self.detector = Detector(self.spec)
        self.mask_head = MaskHead(gain=config.mask_gain, seed=config.seed)
        self.optimizer = torch.optim.Adam(
            [
                {"params": self.detector.parameters(), "lr": config.lr},
                {"params": self.mask_head.parameters(), "lr": config.mask_lr},
            ],
            betas=(0.9, 0.999),
            eps=1e-8,
        )
        self.scheduler = None
        if config.lr_schedule == "cosine" and config.steps > 0:
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, config.steps)
        self.train_frames, self.heldout_frames = split_frames(scene.config.frames)
        self.step_count = 0
        self.trace: list[str] = []
        self.history: list[StepRecord] = []
        self._frames: dict[int, tuple[FrameBundle, list[torch.Tensor]]] = {}
        self._grids: dict[int, VoxelGrid] = {}

    # -- data ---------------------------------------------------------------
    def frame(self, t: int) -> tuple[FrameBundle, list[torch.Tensor]]:
        if t not in self._frames:
            fb = render_frame(self.scene, t)
            feats = [image_features(img, self.spec) for img in fb.images]
            self._frames[t] = (fb, feats)
        return self._frames[t]

    def grid_for(self, rig: CameraRig) -> VoxelGrid:
        key = id(rig)
        if key not in self._grids:
            self._grids[key] = build_grid(rig_focus_point(rig), self.config.grid_side, self.config.grid_dims)
        return self._grids[key]

    # -- one step -----------------------------------------------------------
    def _mark(self, stage: str) -> None:
        self.trace.append(stage)

    def _boxes(self, rig: CameraRig, fields, cells) -> tuple[list[PixelBBox], Optional[torch.Tensor]]:
        cfg = self.config
        boxes = [decode_bbox(self.spec, self.detector.params_at(f, int(c))) for f, c in zip(fields, cells)]
        self._mark("decode_boxes")
        tc = None
        if cfg.tc_baseline:
            tc = triangulation_loss_baseline(rig, boxes)
        if cfg.center_consistency:
            boxes = adjust_centers(rig, boxes)
            self._mark("adjust_centers")
        if cfg.height_consistency:
            boxes = adjust_heights(rig, boxes)
            self._mark("adjust_heights")
        if cfg.width_consistency:
            boxes = adjust_widths(rig, boxes)
            self._mark("adjust_widths")
        for b in boxes:
            b.check()
        return boxes, tc

    def _forward(self, fb: FrameBundle, feats, rng: np.random.Generator):
        cfg = self.config
        rig = fb.rig
        outs = [self.detector(f) for f in feats]
        self._mark("detect")
        grid = self.grid_for(rig)
        dist = fuse([o[0] for o in outs], rig, grid)
        self._mark("fuse")
        cells_table = voxel_cells(rig, grid, cfg.n_col, cfg.n_row)
        last = None
        for attempt in range(2):
            sample = sample_voxel(dist, rng)
            self._mark("sample_voxel")
            try:
                boxes, tc = self._boxes(rig, [o[1] for o in outs], cells_table[:, sample.voxel])
                break
            except DEGENERATE as exc:
                last = exc
        else:
            raise last
        originals, inpainted, recons, masks = [], [], [], []
        H, W = fb.images[0].shape[:2]
        for img, box in zip(fb.images, boxes):
            x = torch.from_numpy(img)
            fg, S = self.mask_head(crop(x, box))
            if cfg.fill_gradient:
                bg = inpaint_tensor(img, box)
            else:
                bg = torch.from_numpy(inpaint(img, box.detach()))
            recons.append(composite(fg, S, bg, box))
            masks.append(paste(S.unsqueeze(-1), box, (H, W))[..., 0])
            originals.append(x)
            inpainted.append(bg)
        self._mark("synthesize")
        losses = loss_total(originals, inpainted, recons, masks, boxes, sample.ratio, q=dist.q, weights=cfg.weights)
        if tc is not None:
            losses = replace(losses, total=losses.total + cfg.tc_weight * tc)
        self._mark("loss_total")
        return losses, sample.voxel, boxes

    def step(self, t: Optional[int] = None) -> LossBreakdown:
        """One optimisation step on frame ``t`` (drawn from the training split if omitted)."""
        rng = child_rng(self.config.seed, self.step_count)
        if t is None:
            t = int(self.train_frames[rng.integers(len(self.train_frames))])
        self.trace = []
        fb, feats = self.frame(t)
        self.optimizer.zero_grad()
        losses, voxel, boxes = self._forward(fb, feats, rng)
        losses.total.backward()
        self.optimizer.step()
        # past config.steps the rates stay at the end of the schedule
        if self.scheduler is not None and self.step_count < self.config.steps:
            self.scheduler.step()
        self._mark("update")
        self.history.append(StepRecord(self.step_count, t, voxel, losses.as_floats(), [b.as_tuple() for b in boxes]))
        self.step_count += 1
        return losses

    def train(self, steps: Optional[int] = None, log_every: int = 0, log=print) -> list[float]:
        steps = self.config.steps if steps is None else steps
        start = time.perf_counter()
        totals = []
        for _ in range(steps):
            totals.append(float(self.step().total.detach()))
            if log_every and self.step_count % log_every == 0:
                recent = np.median(totals[-log_every:])
                log(f"step {self.step_count}: median total {recent:.4f} ({time.perf_counter() - start:.1f}s)")
        return totals

    # -- inference and evaluation ------------------------------------------
    def infer(self, image: np.ndarray) -> tuple[PixelBBox, np.ndarray]:
        return infer_single_view(self.detector, self.mask_head, image)

    def evaluate(self, frames: Optional[Sequence[int]] = None, f_tol: Optional[float] = None) -> EvalReport:
        frames = self.heldout_frames if frames is None else frames
        probs, gts, pred_boxes, gt_boxes = [], [], [], []
        for t in frames:
            for c in range(self.config.n_cameras):
                view = render(self.scene, c, int(t))
                box, prob = self.infer(view.image)
                probs.append(prob)
                gts.append(view.gt_mask)
                pred_boxes.append(box.as_tuple())
                gt_boxes.append(view.gt_box)
        return evaluate(probs, gts, pred_boxes, gt_boxes, f_tol)

    # -- checkpoints --------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.detector, self.mask_head, self.config, self.step_count)


def infer_single_view(detector: Detector, mask_head: MaskHead, image: np.ndarray) -> tuple[PixelBBox, np.ndarray]:
    """Box and full-frame mask probabilities from one image, nothing else.

    The highest-probability cell wins; ties go to the smallest cell index.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    spec = detector.spec
    if (W, H) != (spec.width, spec.height):
        raise InvalidConfig(f"image is {W}x{H}, detector expects {spec.width}x{spec.height}")
    with torch.no_grad():
        pmap, fields = detector(image_features(image, spec))
        cell = int(np.argmax(pmap.p.numpy()))
        box = decode_bbox(spec, detector.params_at(fields, cell)).detach()
        _, S = mask_head(crop(torch.from_numpy(image), box))
        prob = paste(S.unsqueeze(-1), box, (H, W))[..., 0].numpy()
    return box, prob


def save_checkpoint(path, detector: Detector, mask_head: MaskHead, config: TrainConfig, step: int = 0) -> None:
    arrays = {f"detector.{k}": v.detach().numpy() for k, v in detector.state_dict().items()}
    arrays.update({f"mask_head.{k}": v.detach().numpy() for k, v in mask_head.named_parameters()})
    meta = {
        "version": __version__,
        "seed": config.seed,
        "step": step,
        "image_size": [detector.spec.width, detector.spec.height],
        "config": config.to_dict(),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Detector, MaskHead, TrainConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        config = TrainConfig.from_dict(meta["config"])
        arrays = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "meta"}
    detector_state = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("detector.")}
    W, H = meta["image_size"]
    detector = Detector(GridSpec2D(config.n_col, config.n_row, W, H))
    detector.load_state_dict(detector_state)
    mask_head = MaskHead(gain=config.mask_gain, seed=config.seed)
    with torch.no_grad():
        for k, p in mask_head.named_parameters():
            p.copy_(arrays[f"mask_head.{k}"])
    return detector, mask_head, config, meta
