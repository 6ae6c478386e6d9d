"""Command line entry point: ``mvc <subcommand> [flags]``.

Exit codes: 0 on success, 1 on invalid input (one-line diagnostic on stderr),
2 on internal errors. Every run writes a ``manifest.json`` next to its
outputs; text outputs start with a ``# seed=... version=...`` header and PNGs
carry the same information in a text chunk.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import __version__
from .camera import load_rig, ray_through_pixel, save_rig
from .errors import InvalidConfig, ParseError, ValidationError
from .proposal_grid import GridSpec2D, build_grid, fuse
from .metrics import evaluate
from .mvgeom import nearest_point_to_lines, rig_focus_point
from .simulator import Decoy, SceneConfig, make_scene, render
from .train import TrainConfig, Trainer, infer_single_view, load_checkpoint

VARIANT_LABELS = {
    "full": "Ours",
    "vc": "Ours w/o VC",
    "hc": "Ours w/o HC",
    "wc": "Ours w/ WC",
    "tc": "Ours w/ TC",
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- file helpers ----------------------------------------------------------


def header(seed, extra: str = "") -> str:
    return f"# seed={seed} version={__version__}{(' ' + extra) if extra else ''}\n"


def write_text(path: Path, seed, body: str, extra: str = "") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header(seed, extra) + body)


def write_csv(path: Path, seed, columns: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    write_text(path, seed, buf.getvalue())


def read_csv(path) -> list[dict[str, str]]:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return list(csv.DictReader(lines))


def write_png(path: Path, array: np.ndarray, seed) -> None:
    """8-bit PNG (RGB or grayscale) with fixed encoder settings and a seed/version text chunk."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(array, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    info = PngInfo()
    info.add_text("mvc", f"seed={seed} version={__version__}")
    Image.fromarray(data).save(path, format="PNG", pnginfo=info, optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    """Pixel values scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read image {path}: {exc}") from exc


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], seed, config: dict, artifacts: Sequence[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": command,
        "argv": list(argv),
        "seed": seed,
        "version": __version__,
        "config": config,
        "artifacts": sorted(str(Path(a).relative_to(out_dir)) if Path(a).is_relative_to(out_dir) else str(a) for a in artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def parse_ints(text: str, n: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())
    except ValueError as exc:
        raise ParseError(f"expected comma-separated integers, got {text!r}") from exc
    if n is not None and len(vals) == 1:
        vals = vals * n
    if n is not None and len(vals) != n:
        raise ParseError(f"expected {n} integers, got {text!r}")
    return vals


def read_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot parse {path}: {exc}") from exc


# -- scenes ----------------------------------------------------------------


def default_decoys(n_cameras: int) -> tuple[Decoy, ...]:
    """One decoy in each of the first two views (or the first one for 2 cameras)."""
    spots = [(0, 30.0, 42.0), (1, 98.0, 86.0)]
    return tuple(Decoy(c, u, v) for c, u, v in spots[: max(1, min(2, n_cameras - 1))])


def scene_config_from_args(args) -> SceneConfig:
    if getattr(args, "scene", None):
        path = Path(args.scene)
        path = path / "scene.json" if path.is_dir() else path
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read scene config {path}: {exc}") from exc
        return SceneConfig.from_dict(data.get("scene", data))
    decoys = default_decoys(args.cams) if getattr(args, "distractors", False) else ()
    return SceneConfig(
        n_cameras=args.cams,
        frames=args.frames,
        seed=args.scene_seed,
        distractors=decoys,
        moving_cameras=getattr(args, "moving_cameras", False),
    )


# -- subcommands -----------------------------------------------------------


def cmd_simulate(args, argv) -> int:
    cfg = SceneConfig(
        n_cameras=args.cams,
        frames=args.frames,
        seed=args.seed,
        distractors=default_decoys(args.cams) if args.distractors else (),
        moving_cameras=args.moving_cameras,
    )
    scene = make_scene(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    save_rig(scene.rig, out / "rig.json")
    artifacts.append(out / "rig.json")
    (out / "scene.json").write_text(json.dumps({"seed": cfg.seed, "version": __version__, "scene": cfg.to_dict()}, indent=1) + "\n")
    artifacts.append(out / "scene.json")
    rows = []
    for t in range(cfg.frames):
        for c in range(cfg.n_cameras):
            view = render(scene, c, t)
            img_path = out / "images" / f"c{c}_t{t:04d}.png"
            mask_path = out / "masks" / f"c{c}_t{t:04d}.png"
            write_png(img_path, view.image, cfg.seed)
            write_png(mask_path, view.gt_mask.astype(np.float64), cfg.seed)
            artifacts += [img_path, mask_path]
            rows.append((t, c, *view.gt_box))
    write_csv(out / "boxes.csv", cfg.seed, ["frame", "camera", "cu", "cv", "w", "h"], rows)
    artifacts.append(out / "boxes.csv")
    write_manifest(out, "simulate", argv, cfg.seed, cfg.to_dict(), artifacts)
    print(f"wrote {cfg.frames} frames x {cfg.n_cameras} cameras to {out}")
    return 0


def train_config_from_args(args, **overrides) -> TrainConfig:
    kw = dict(
        lr=args.lr,
        mask_lr=args.mask_lr,
        steps=args.steps,
        seed=args.seed,
        n_cameras=args.cams,
        grid_dims=parse_ints(args.grid_dims, 3),
        grid_side=args.grid_side,
        lr_schedule=args.lr_schedule,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def cmd_train(args, argv) -> int:
    scene_cfg = scene_config_from_args(args)
    cfg = train_config_from_args(
        args,
        n_cameras=scene_cfg.n_cameras,
        center_consistency=not args.no_center_consistency,
        height_consistency=not args.no_height_consistency,
        width_consistency=args.width_consistency,
        tc_baseline=args.tc_baseline,
    )
    trainer = Trainer(make_scene(scene_cfg), cfg)
    log = (lambda s: print(s, flush=True)) if args.log_every else None
    trainer.train(log_every=args.log_every, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / "checkpoint.npz")
    rows = [(r.step, r.frame, r.voxel, *(r.losses[k] for k in ("g", "o", "o_perc", "l_seg", "l_q", "total"))) for r in trainer.history]
    write_csv(out / "losses.csv", cfg.seed, ["step", "frame", "voxel", "g", "o", "o_perc", "l_seg", "l_q", "total"], rows)
    artifacts = [out / "checkpoint.npz", out / "losses.csv"]
    if not args.no_eval:
        report = trainer.evaluate(f_tol=args.f_tol)
        write_text(out / "report.json", cfg.seed, json.dumps(report.to_dict(), indent=1) + "\n")
        artifacts.append(out / "report.json")
        print(json.dumps(report.to_dict()))
    write_manifest(out, "train", argv, cfg.seed, {"train": cfg.to_dict(), "scene": scene_cfg.to_dict()}, artifacts)
    return 0


def cmd_infer(args, argv) -> int:
    detector, mask_head, cfg, meta = load_checkpoint(args.checkpoint)
    image = read_png(args.image)
    if image.ndim != 3 or image.shape[2] < 3:
        raise ParseError(f"{args.image} is not an RGB image")
    box, prob = infer_single_view(detector, mask_head, image[..., :3])
    out = Path(args.out)
    write_csv(out / "box.csv", cfg.seed, ["cu", "cv", "w", "h"], [box.as_tuple()])
    write_png(out / "mask.png", prob, cfg.seed)
    write_manifest(out, "infer", argv, cfg.seed, {"checkpoint": str(args.checkpoint), "image": str(args.image)}, [out / "box.csv", out / "mask.png"])
    print(",".join(repr(v) for v in box.as_tuple()))
    return 0


def _box_table(path) -> dict[tuple[int, int], tuple[float, ...]]:
    out = {}
    for row in read_csv(path):
        try:
            key = (int(row.get("frame", 0)), int(row.get("camera", 0)))
            out[key] = tuple(float(row[k]) for k in ("cu", "cv", "w", "h"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad box row in {path}: {row}") from exc
    return out


def cmd_eval(args, argv) -> int:
    pred_dir, gt_dir = Path(args.pred_masks), Path(args.gt_masks)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise ParseError(f"no PNG masks in {gt_dir}")
    probs, gts = [], []
    for name in names:
        if not (pred_dir / name).exists():
            raise ParseError(f"missing prediction {pred_dir / name}")
        probs.append(read_png(pred_dir / name))
        gts.append(read_png(gt_dir / name) >= 0.5)
    pred_boxes, gt_boxes = _box_table(args.pred_boxes), _box_table(args.gt_boxes)
    keys = sorted(gt_boxes)
    missing = [k for k in keys if k not in pred_boxes]
    if missing:
        raise ParseError(f"no predicted box for frame/camera {missing[0]}")
    report = evaluate(probs, gts, [pred_boxes[k] for k in keys], [gt_boxes[k] for k in keys], args.f_tol)
    text = json.dumps(report.to_dict(), indent=1)
    print(text)
    if args.out:
        out = Path(args.out)
        write_text(out, args.seed, text + "\n")
        write_manifest(out.parent, "eval", argv, args.seed, {"f_tol": args.f_tol}, [out])
    return 0


def cmd_triangulate(args, argv) -> int:
    rig = load_rig(args.rig)
    pts = read_matrix(args.points)
    if pts.shape != (rig.C, 2):
        raise ParseError(f"expected {rig.C} rows of 'u v', got shape {pts.shape}")
    lines = [ray_through_pixel(cam, float(u), float(v)) for cam, (u, v) in zip(rig, pts)]
    res = nearest_point_to_lines(lines)
    x, y, z = (float(v) for v in res.point)
    print(f"point {x!r} {y!r} {z!r}")
    print(f"residual {float(res.residual)!r}")
    print(f"condition {res.condition!r}")
    return 0


def cmd_fuse(args, argv) -> int:
    rig = load_rig(args.rig)
    if len(args.maps) != rig.C:
        raise ParseError(f"rig has {rig.C} cameras but {len(args.maps)} maps were given")
    n_col, n_row = parse_ints(args.cells, 2)
    maps = []
    for path, cam in zip(args.maps, rig):
        p = read_matrix(path).ravel()
        if p.size != n_col * n_row:
            raise ParseError(f"{path}: expected {n_col * n_row} values, got {p.size}")
        maps.append(torch.from_numpy(p.reshape(n_row, n_col).ravel()))
    center = rig_focus_point(rig) if args.center is None else torch.tensor([float(v) for v in args.center.split(",")])
    grid = build_grid(center, args.side, parse_ints(args.dims, 3))
    dist = fuse(maps, rig, grid)
    q = dist.q.numpy()
    centers = grid.centers.numpy()
    rows = [(j, *centers[j], q[j]) for j in range(grid.V)]
    out = Path(args.out)
    write_csv(out, args.seed, ["index", "x", "y", "z", "q"], rows)
    write_manifest(out.parent, "fuse", argv, args.seed, {"dims": args.dims, "side": args.side}, [out])
    j = int(np.argmax(q))
    print(f"argmax voxel {j} at {tuple(float(v) for v in centers[j])} q={q[j]!r}")
    return 0


def run_ablation(scene_cfg: SceneConfig, variants: Sequence[str], seeds: Sequence[int], base: TrainConfig, log=None) -> list[dict]:
    scene = make_scene(scene_cfg)
    rows = []
    for name in variants:
        for seed in seeds:
            cfg = TrainConfig.variant(name, **{**base.to_dict(), "seed": seed, "weights": base.weights, "grid_dims": base.grid_dims})
            trainer = Trainer(scene, cfg)
            trainer.train()
            rep = trainer.evaluate()
            rows.append({"variant": name, "seed": seed, **rep.to_dict()})
            if log:
                log(f"{VARIANT_LABELS[name]:12s} seed {seed}: J={rep.j:.3f} F={rep.f:.3f} mAP={rep.map50:.3f}")
    return rows


def cmd_ablate(args, argv) -> int:
    variants = ["full"] + [v for v in args.variants.split(",") if v and v != "full"]
    for v in variants:
        if v not in VARIANT_LABELS:
            raise InvalidConfig(f"unknown variant {v!r}; expected some of {','.join(VARIANT_LABELS)}")
    seeds = parse_ints(args.seeds)
    scene_cfg = scene_config_from_args(args)
    base = train_config_from_args(args, n_cameras=scene_cfg.n_cameras)
    rows = run_ablation(scene_cfg, variants, seeds, base, log=lambda s: print(s, flush=True))
    table = []
    for v in variants:
        sub = [r for r in rows if r["variant"] == v]
        table.append((VARIANT_LABELS[v], *(float(np.mean([r[k] for r in sub])) for k in ("j", "f", "map50")), *(float(np.std([r[k] for r in sub])) for k in ("j", "f", "map50"))))
    print(f"{'variant':12s} {'J':>7s} {'F':>7s} {'mAP':>7s}")
    for name, j, f, m, *_ in table:
        print(f"{name:12s} {j:7.3f} {f:7.3f} {m:7.3f}")
    out = Path(args.out)
    write_csv(out / "ablation.csv", ",".join(map(str, seeds)), ["variant", "j", "f", "map50", "j_std", "f_std", "map50_std"], table)
    write_csv(out / "runs.csv", ",".join(map(str, seeds)), ["variant", "seed", "j", "f", "map50", "threshold"], [tuple(r.values()) for r in rows])
    write_manifest(out, "ablate", argv, list(seeds), {"train": base.to_dict(), "scene": scene_cfg.to_dict(), "variants": variants}, [out / "ablation.csv", out / "runs.csv"])
    return 0


# -- parser ----------------------------------------------------------------


def _add_scene_flags(p, with_scene_file: bool = True) -> None:
    if with_scene_file:
        p.add_argument("--scene", help="scene.json written by 'simulate' (or its directory); overrides the scene flags below")
    p.add_argument("--cams", type=int, default=3, help="number of cameras (default 3)")
    p.add_argument("--frames", type=int, default=200, help="frames in the synthetic sequence (default 200)")
    p.add_argument("--distractors", action="store_true", help="add decoys that appear in a single view only")
    p.add_argument("--moving-cameras", action="store_true", help="pan the cameras over time")


def _add_train_flags(p) -> None:
    p.add_argument("--steps", type=int, default=2000, help="optimisation steps (default 2000)")
    p.add_argument("--seed", type=int, default=7, help="training seed (default 7)")
    p.add_argument("--scene-seed", type=int, default=7, help="seed of the synthetic scene (default 7)")
    p.add_argument("--lr", type=float, default=1e-3, help="detector learning rate (default 1e-3)")
    p.add_argument("--mask-lr", type=float, default=1e-4, help="mask head learning rate (default 1e-4)")
    p.add_argument("--grid-dims", default="16,16,16", help="voxel grid dimensions, e.g. 16,16,16 or 10 (default 16,16,16)")
    p.add_argument("--grid-side", type=float, default=4.0, help="voxel grid side length in meters (default 4)")
    p.add_argument("--lr-schedule", choices=("cosine", "constant"), default="cosine",
                   help="anneal learning rates to zero over the run, or keep them fixed (default cosine)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvc", description="Multi-view consensus detection and segmentation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{simulate,train,infer,eval,triangulate,fuse,ablate}", parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a synthetic multi-camera sequence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7, help="scene seed (default 7)")
    _add_scene_flags(p, with_scene_file=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="self-supervised multi-view training")
    p.add_argument("--out", required=True, help="output directory for checkpoint, loss log and report")
    _add_scene_flags(p)
    _add_train_flags(p)
    p.add_argument("--no-center-consistency", action="store_true", help="do not move box centers to the triangulated center")
    p.add_argument("--no-height-consistency", action="store_true", help="do not adjust box heights by triangulating top/bottom")
    p.add_argument("--width-consistency", action="store_true", help="also adjust widths from left/right midpoints")
    p.add_argument("--tc-baseline", action="store_true", help="triangulation-loss baseline instead of box adjustment")
    p.add_argument("--log-every", type=int, default=0, help="print the median loss every N steps (0 = quiet)")
    p.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation")
    p.add_argument("--f-tol", type=float, default=None, help="boundary tolerance in pixels (default 0.8%% of the diagonal)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="single-view inference on one image")
    p.add_argument("--checkpoint", required=True, help="checkpoint.npz written by 'train'")
    p.add_argument("--image", required=True, help="RGB PNG")
    p.add_argument("--out", required=True, help="output directory for box.csv and mask.png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks and boxes")
    p.add_argument("--pred-masks", required=True, help="directory of 8-bit probability mask PNGs")
    p.add_argument("--gt-masks", required=True, help="directory of ground-truth mask PNGs with the same file names")
    p.add_argument("--pred-boxes", required=True, help="CSV with frame,camera,cu,cv,w,h")
    p.add_argument("--gt-boxes", required=True, help="CSV with frame,camera,cu,cv,w,h")
    p.add_argument("--f-tol", type=float, default=None, help="boundary tolerance in pixels (default 0.8%% of the diagonal)")
    p.add_argument("--seed", default="none", help="seed recorded in the report header")
    p.add_argument("--out", help="write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("triangulate", help="least-squares 3D point from one pixel per camera")
    p.add_argument("--rig", required=True, help="rig JSON")
    p.add_argument("--points", required=True, help="text file with one 'u v' row per camera")
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("fuse", help="fuse per-view cell probabilities on a voxel grid")
    p.add_argument("--rig", required=True, help="rig JSON")
    p.add_argument("--maps", required=True, nargs="+", help="one text file of row-major cell probabilities per camera")
    p.add_argument("--cells", default="8,8", help="2D grid columns,rows (default 8,8)")
    p.add_argument("--dims", default="16,16,16", help="voxel grid dimensions (default 16,16,16)")
    p.add_argument("--side", type=float, default=4.0, help="voxel grid side in meters (default 4)")
    p.add_argument("--center", default=None, help="grid center x,y,z (default: rig focus point)")
    p.add_argument("--seed", default="none", help="seed recorded in the output header")
    p.add_argument("--out", required=True, help="output CSV (index,x,y,z,q)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("ablate", help="train ablation variants over several seeds and tabulate J/F/mAP")
    p.add_argument("--variants", default="vc,hc,wc,tc", help="comma list from vc,hc,wc,tc (the full model is always included)")
    p.add_argument("--seeds", default="1,2,3", help="comma list of training seeds (default 1,2,3)")
    p.add_argument("--out", required=True, help="output directory")
    _add_scene_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _apply_threads() -> None:
    raw = os.environ.get("MVC_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise InvalidConfig(f"MVC_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise InvalidConfig("MVC_THREADS must be >= 1")
        torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            raise UsageError("missing subcommand")
        _apply_threads()
        return args.func(args, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
