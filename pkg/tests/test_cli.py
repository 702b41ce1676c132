import json
import os

import numpy as np
import pytest

from localsplat import plyio
from localsplat.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    rc = main(["synth", "--seed", "3", "--views", "4", "--splats", "8",
               "--resolution", "16", "--out", str(scene)])
    assert rc == 0

    cfg = {"model": {"layers": 1, "dim": 16, "heads": 2, "patch_size": 8,
                     "window": 3},
           "steps": 2, "warmup_steps": 1, "peak_lr": 1e-4,
           "n_targets": 1, "seed": 0}
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    run = root / "run"
    rc = main(["train", "--config", str(cfg_path), "--scene", str(scene),
               "--out", str(run)])
    assert rc == 0
    return {"root": root, "scene": scene, "config": cfg_path, "run": run}


def test_synth_creates_manifest_and_views(workdir):
    scene = workdir["scene"]
    assert (scene / "manifest.json").exists()
    assert (scene / "gt.ply").exists()
    for i in range(4):
        assert (scene / f"view_{i:03d}.png").exists()


def test_synth_deterministic_per_seed(workdir, tmp_path):
    rc = main(["synth", "--seed", "3", "--views", "4", "--splats", "8",
               "--resolution", "16", "--out", str(tmp_path / "again")])
    assert rc == 0
    a = (workdir["scene"] / "view_000.png").read_bytes()
    b = (tmp_path / "again" / "view_000.png").read_bytes()
    assert a == b


def test_train_writes_metrics_and_checkpoint(workdir):
    run = workdir["run"]
    assert (run / "model.npz").exists()
    lines = (run / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"step", "loss", "mse", "psnr", "lr", "grad_norm"} <= set(rec)
    assert rec["step"] == 0 and rec["lr"] == 0.0


def test_render_writes_target_views(workdir, tmp_path, capsys):
    out = tmp_path / "renders"
    rc = main(["render", "--model", str(workdir["run"] / "model.npz"),
               "--scene", str(workdir["scene"]), "--targets", "1,3",
               "--out", str(out)])
    assert rc == 0
    assert (out / "render_001.png").exists()
    assert (out / "render_003.png").exists()
    assert "psnr" in capsys.readouterr().out


def test_render_unknown_target_id_is_data_error(workdir, tmp_path, capsys):
    rc = main(["render", "--model", str(workdir["run"] / "model.npz"),
               "--scene", str(workdir["scene"]), "--targets", "17",
               "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "17" in capsys.readouterr().err


def test_missing_scene_is_data_error(workdir, tmp_path):
    rc = main(["render", "--model", str(workdir["run"] / "model.npz"),
               "--scene", str(tmp_path / "nope"), "--targets", "0",
               "--out", str(tmp_path / "r")])
    assert rc == 2


def test_export_produces_importable_ply(workdir, tmp_path):
    ply = tmp_path / "pred.ply"
    rc = main(["export", "--model", str(workdir["run"] / "model.npz"),
               "--scene", str(workdir["scene"]), "--ply", str(ply)])
    assert rc == 0
    splats = plyio.import_ply(ply)
    # 2 input views (stride 2 of 4) x 16x16 pixels
    assert splats.count == 2 * 16 * 16
    assert np.isfinite(splats.position).all()


def test_bench_report_counts_match_closed_form(workdir, tmp_path, capsys):
    out = tmp_path / "report.txt"
    rc = main(["bench", "--n", "2,4", "--window", "3", "--tokens", "4",
               "--repeats", "1", "--out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert text == capsys.readouterr().out
    rows = [ln.split() for ln in text.splitlines()
            if ln.strip() and ln.split()[0].isdigit()]
    got = {int(r[0]): (int(r[1]), int(r[4])) for r in rows}
    assert got == {2: (2 * 2 * 16, (2 * 4) ** 2), 4: (4 * 3 * 16, (4 * 4) ** 2)}


def test_usage_errors_exit_1(workdir, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err

    with pytest.raises(SystemExit) as e:
        main(["bench", "--n", "8,x"])
    assert e.value.code == 1

    with pytest.raises(SystemExit) as e:
        main(["synth", "--views", "4"])  # missing required --seed/--out
    assert e.value.code == 1


def test_malformed_config_is_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["train", "--config", str(bad), "--scene",
               str(workdir["scene"]), "--out", str(tmp_path / "o")])
    assert rc == 2

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"model": {"no_such_field": 1}}))
    rc = main(["train", "--config", str(unknown), "--scene",
               str(workdir["scene"]), "--out", str(tmp_path / "o2")])
    assert rc == 2
    assert "no_such_field" in capsys.readouterr().err
