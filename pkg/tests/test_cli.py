import numpy as np
import pytest

from semsplat.cli import main
from semsplat.config import (
    SYNTHETIC_PRESET,
    ConfigError,
    defaults,
    format_config,
    load_config,
    parse_config,
)
from semsplat.mapper import write_checkpoint
from semsplat.metrics import parse_report
from semsplat.synthgen import SceneSpec, build_synthetic_scene


def run_cli(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, parse_report(out), err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["generate", "--out", str(root), "--frames", "50", "--width", "40",
                 "--height", "30", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.cfg"
    p.write_text(format_config(dict(SYNTHETIC_PRESET, iterations_per_keyframe=5)))
    return p


def test_generate_writes_the_layout(dataset):
    for sub in ("color", "depth", "feature", "label"):
        assert len(list((dataset / sub).iterdir())) == 50
    rows = [l for l in (dataset / "groundtruth.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 50 and all(len(r.split()) == 8 for r in rows)
    assert "classes=wall,floor,ceiling,object" in (dataset / "manifest.txt").read_text()


def test_run_writes_report_and_artifacts(dataset, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    rc, items, _ = run_cli(capsys, "run", "--dataset", dataset, "--out", out, "--config", config_file)
    assert rc == 0
    report = parse_report((out / "report.txt").read_text())
    for key in ("ate_rmse", "psnr", "miou", "ssim", "pixel_accuracy", "gaussian_count", "keyframes"):
        assert key in report and key in items
    assert all(np.isfinite(float(report[k])) for k in ("ate_rmse", "psnr", "miou"))
    for name in ("checkpoint.splf", "trajectory.txt", "config.txt", "timings.txt"):
        assert (out / name).exists()
    assert len(list((out / "renders").glob("*_color.png"))) == int(report["keyframes"])

    rc, ev, _ = run_cli(capsys, "eval", "--checkpoint", out / "checkpoint.splf", "--dataset", dataset,
                        "--trajectory", out / "trajectory.txt", "--every", 10)
    assert rc == 0 and ev["views"] == "5"
    assert float(ev["ate_rmse"]) == pytest.approx(float(report["ate_rmse"]))


def test_query_on_ground_truth_features_is_exact(dataset, tmp_path, capsys):
    scene = build_synthetic_scene(SceneSpec(density=24, seed=3))
    write_checkpoint(scene.gaussians, tmp_path / "gt.splf")
    for name in ("wall", "floor", "object"):
        rc, items, _ = run_cli(capsys, "query", "--checkpoint", tmp_path / "gt.splf", "--dataset",
                               dataset, "--class", name, "--frame", 7, "--K", 1,
                               "--out", tmp_path / name)
        assert rc == 0
        assert float(items["mask_iou"]) == 1.0
        assert (tmp_path / name / "mask.png").exists() and (tmp_path / name / "heat.png").exists()


def test_query_unknown_class_lists_known_ones(dataset, tmp_path, capsys):
    write_checkpoint(build_synthetic_scene(SceneSpec(density=2)).gaussians, tmp_path / "c.splf")
    rc, _, err = run_cli(capsys, "query", "--checkpoint", tmp_path / "c.splf", "--dataset", dataset,
                         "--class", "chair", "--out", tmp_path / "q")
    assert rc == 2
    assert "chair" in err and "wall, floor, ceiling, object" in err


def test_bad_config_key_is_named(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("K=3\nbogus_key=1\n")
    rc, _, err = run_cli(capsys, "run", "--dataset", dataset, "--out", tmp_path / "r", "--config", cfg)
    assert rc == 2 and "bogus_key" in err and "bad.cfg:2" in err


def test_config_parsing():
    parsed = parse_config("# comment\nK = 5\nprune=false\nkeyframe_time_budget=0.5\nmode=concurrent\n")
    assert parsed == {"K": 5, "prune": False, "keyframe_time_budget": 0.5, "mode": "concurrent"}
    assert parse_config(format_config(defaults())) == defaults()
    with pytest.raises(ConfigError, match="'K'"):
        parse_config("K=three")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config("just words")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config("/nonexistent/x.cfg")


def test_bench_reports_every_row(tmp_path, capsys):
    rc, items, _ = run_cli(capsys, "bench", "--gaussians", 2000, "--size", 64, "--dims", 16,
                           "--ks", 1, 3, "--repeats", 2, "--out", tmp_path)
    assert rc == 0
    assert set(items) == {f"feature_pass_seconds_D16_K{k}" for k in ("1", "3", "full")}
    assert (tmp_path / "bench.txt").exists()
    # the K=1 pass reads a third of the K=3 records; both are far cheaper than a full sweep
    assert float(items["feature_pass_seconds_D16_K3"]) < float(items["feature_pass_seconds_D16_Kfull"])


def test_missing_dataset_is_reported(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "run", "--dataset", tmp_path / "none", "--out", tmp_path / "o")
    assert rc == 2 and "does not exist" in err
