import json

import numpy as np
import pytest

from mvconsensus import __version__, cli
from mvconsensus.camera import load_rig, project
from mvconsensus.cli import main, read_csv, read_png


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--frames", "5", "--seed", "3"]) == 0
    return out


def test_simulate_outputs(sim_dir):
    rig = load_rig(sim_dir / "rig.json")
    assert rig.C == 3
    assert len(list((sim_dir / "images").glob("*.png"))) == 15
    rows = read_csv(sim_dir / "boxes.csv")
    assert len(rows) == 15 and set(rows[0]) == {"frame", "camera", "cu", "cv", "w", "h"}
    first = (sim_dir / "boxes.csv").read_text().splitlines()[0]
    assert first.startswith("#") and "seed=3" in first and __version__ in first
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and manifest["seed"] == 3
    mask = read_png(sim_dir / "masks" / "c0_t0000.png")
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_simulate_is_byte_identical(sim_dir, tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--frames", "5", "--seed", "3"]) == 0
    for name in ("rig.json", "boxes.csv", "images/c1_t0003.png", "masks/c2_t0004.png"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def test_triangulate(sim_dir, tmp_path, capsys):
    rig = load_rig(sim_dir / "rig.json")
    X = np.array([0.1, -0.2, 0.8])
    pts = np.array([project(cam, X).numpy() for cam in rig])
    np.savetxt(tmp_path / "pts.txt", pts, fmt="%.17g")
    assert main(["triangulate", "--rig", str(sim_dir / "rig.json"), "--points", str(tmp_path / "pts.txt")]) == 0
    out = capsys.readouterr().out.splitlines()
    point = np.array([float(v) for v in out[0].split()[1:]])
    np.testing.assert_allclose(point, X, atol=1e-6)
    assert out[1].startswith("residual") and float(out[1].split()[1]) < 1e-9


def test_triangulate_bad_points(sim_dir, tmp_path, capsys):
    (tmp_path / "pts.txt").write_text("1 2\n")
    assert main(["triangulate", "--rig", str(sim_dir / "rig.json"), "--points", str(tmp_path / "pts.txt")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:")


def test_fuse(sim_dir, tmp_path, capsys):
    p = np.zeros((8, 8))
    p[1:-1, 1:-1] = 1 / 36
    paths = []
    for c in range(3):
        np.savetxt(tmp_path / f"m{c}.txt", p)
        paths.append(str(tmp_path / f"m{c}.txt"))
    out = tmp_path / "q.csv"
    assert main(["fuse", "--rig", str(sim_dir / "rig.json"), "--maps", *paths, "--dims", "6,6,6", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 216
    assert sum(float(r["q"]) for r in rows) == pytest.approx(1.0, abs=1e-9)
    assert main(["fuse", "--rig", str(sim_dir / "rig.json"), "--maps", *paths[:2], "--out", str(out)]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--out", str(out), "--steps", "3", "--frames", "10", "--seed", "2"])
    assert code == 0
    return out


def test_train_outputs(trained):
    rows = read_csv(trained / "losses.csv")
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    report = json.loads("\n".join(l for l in (trained / "report.json").read_text().splitlines() if not l.startswith("#")))
    assert set(report) == {"j", "f", "map50", "threshold"}
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["train"]["steps"] == 3


def test_infer_and_eval(trained, sim_dir, tmp_path, capsys):
    image = sim_dir / "images" / "c0_t0000.png"
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.npz"), "--image", str(image), "--out", str(out)]) == 0
    box = read_csv(out / "box.csv")[0]
    assert float(box["w"]) > 0
    mask = read_png(out / "mask.png")
    assert mask.shape == (128, 128)

    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    (pred_dir / "c0_t0000.png").write_bytes((out / "mask.png").read_bytes())
    (gt_dir / "c0_t0000.png").write_bytes((sim_dir / "masks" / "c0_t0000.png").read_bytes())
    (tmp_path / "pb.csv").write_text("frame,camera,cu,cv,w,h\n0,0,{cu},{cv},{w},{h}\n".format(**box))
    gt_row = read_csv(sim_dir / "boxes.csv")[0]
    (tmp_path / "gb.csv").write_text("frame,camera,cu,cv,w,h\n0,0,{cu},{cv},{w},{h}\n".format(**gt_row))
    capsys.readouterr()
    args = ["eval", "--pred-masks", str(pred_dir), "--gt-masks", str(gt_dir), "--pred-boxes", str(tmp_path / "pb.csv"),
            "--gt-boxes", str(tmp_path / "gb.csv"), "--out", str(tmp_path / "report.json")]
    assert main(args) == 0
    printed = json.loads(capsys.readouterr().out)
    assert 0 <= printed["j"] <= 1
    assert (tmp_path / "report.json").exists()


def test_ablate_table(tmp_path, capsys):
    args = ["ablate", "--variants", "vc,tc", "--seeds", "1", "--steps", "2", "--frames", "10", "--distractors", "--out", str(tmp_path)]
    assert main(args) == 0
    text = capsys.readouterr().out
    for label in ("Ours", "w/o VC", "w/ TC"):
        assert label in text
    table = read_csv(tmp_path / "ablation.csv")
    assert [r["variant"] for r in table] == [cli.VARIANT_LABELS[v] for v in ("full", "vc", "tc")]
    assert len(read_csv(tmp_path / "runs.csv")) == 3


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert main([]) == 1
    assert main(["triangulate", "--rig", str(tmp_path / "missing.json"), "--points", "x"]) == 1
    assert main(["--version"]) == 0
    assert main(["ablate", "--variants", "zz", "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("MVC_THREADS", "zero")
    assert main(["simulate", "--out", str(tmp_path), "--frames", "1"]) == 1
    monkeypatch.delenv("MVC_THREADS")

    def explode(args, argv):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "cmd_triangulate", explode)
    parser_args = ["triangulate", "--rig", "r", "--points", "p"]
    monkeypatch.setattr(cli, "build_parser", _parser_with(explode))
    assert main(parser_args) == 2


def _parser_with(func):
    real = cli.build_parser

    def build():
        parser = real()
        for action in parser._subparsers._group_actions:
            action.choices["triangulate"].set_defaults(func=func)
        return parser

    return build


def test_help_documents_flags(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--cams", "--grid-dims", "--steps", "--seed", "--no-center-consistency", "--no-height-consistency",
                 "--width-consistency", "--tc-baseline"):
        assert flag in text
