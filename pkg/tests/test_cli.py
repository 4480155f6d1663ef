import hashlib
import json

import numpy as np
import pytest

from voxgrad.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, run_bench
from voxgrad.errors import NumericFailure
from voxgrad.fileio import read_csv, read_ply, read_ppm
from voxgrad.sdf_grid import SdfGrid, save_grid

TINY = {
    "n_views": 4,
    "width": 24,
    "height": 24,
    "batch_rays": 48,
    "n_samples": 12,
    "radiance": {"n_levels": 2, "table_size": 512, "n_min": 4, "n_max": 8, "hidden": 8},
    "checkpoint_every": 2,
    "schedules": {"total_steps": 4, "milestones": [[0, 12], [2, 16]], "w_mask": 0.1},
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run"), "--deterministic"]) == EXIT_OK
    return root / "run"


class TestGen:
    def test_file_count_contract(self, tmp_path):
        out = tmp_path / "data"
        assert main(["gen", "--scene", "sphere", "--views", "8", "--width", "64", "--height", "64", "--out", str(out)]) == 0
        assert len(list(out.glob("image_*.ppm"))) == 8
        assert len(list(out.glob("mask_*.ppm"))) == 8
        cams = json.loads((out / "cameras.json").read_text())["cameras"]
        assert len(cams) == 8
        assert read_ppm(out / "image_000.ppm").shape == (64, 64, 3)

    def test_regeneration_is_byte_identical(self, tmp_path):
        args = ["gen", "--scene", "textured_box", "--views", "3", "--width", "32", "--height", "32", "--seed", "4"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        for f in sorted((tmp_path / "a").iterdir()):
            assert digest(f) == digest(tmp_path / "b" / f.name)

    def test_invalid_scene(self, tmp_path, capsys):
        assert main(["gen", "--scene", "no_such_scene", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "unknown scene" in capsys.readouterr().err
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"shape": {"kind": "blob"}}))
        assert main(["gen", "--scene", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE


class TestTrain:
    def test_smoke_run_writes_all_artifacts(self, trained):
        for name in ("metrics.csv", "train_report.json", "final/grid.sdfg", "final/radiance.radf", "final/config.json"):
            assert (trained / name).exists(), name
        assert list(read_csv(trained / "metrics.csv")["step"]) == [0, 1, 2, 3]

    def test_estimators_give_different_checkpoints(self, tiny_config, tmp_path):
        for g in ("analytical", "interpolated"):
            assert main(["train", "--config", str(tiny_config), "--gradient", g, "--out", str(tmp_path / g), "--deterministic"]) == 0
        assert digest(tmp_path / "analytical/final/grid.sdfg") != digest(tmp_path / "interpolated/final/grid.sdfg")

    def test_resume_reproduces_uninterrupted_log(self, trained, tmp_path):
        ckpt = trained / "ckpt_000002"
        assert ckpt.is_dir()
        assert main(["train", "--resume", str(ckpt), "--out", str(tmp_path / "resumed")]) == 0
        resumed = read_csv(tmp_path / "resumed" / "metrics.csv")
        full = read_csv(trained / "metrics.csv")
        np.testing.assert_array_equal(resumed["step"], [2, 3])
        for col in full:
            np.testing.assert_array_equal(resumed[col], full[col][2:])
        assert digest(tmp_path / "resumed/final/grid.sdfg") == digest(trained / "final/grid.sdfg")

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"learning_rate": 1.0}))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_numeric_failure_exit_code(self, tiny_config, tmp_path, monkeypatch):
        import voxgrad.training as tr

        def boom(*a, **k):
            raise NumericFailure("injected")

        monkeypatch.setattr(tr, "train", boom)
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_NUMERIC

    def test_usage_errors(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--gradient", "sobel"])
        assert exc.value.code == EXIT_USAGE
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE


class TestMeshEval:
    def test_mesh_roundtrips_through_reader(self, trained, tmp_path):
        out = tmp_path / "m.ply"
        assert main(["mesh", str(trained / "final"), "--out", str(out)]) == 0
        v, f = read_ply(out)
        assert len(f) > 0 and f.max() < len(v)

    def test_sigma_zero_equals_unfiltered(self, trained, tmp_path):
        main(["mesh", str(trained / "final"), "--out", str(tmp_path / "a.ply")])
        main(["mesh", str(trained / "final" / "grid.sdfg"), "--sigma", "0", "--out", str(tmp_path / "b.ply")])
        assert digest(tmp_path / "a.ply") == digest(tmp_path / "b.ply")
        main(["mesh", str(trained / "final"), "--sigma", "1", "--out", str(tmp_path / "c.ply")])
        assert digest(tmp_path / "a.ply") != digest(tmp_path / "c.ply")

    def test_empty_surface_gives_valid_empty_ply(self, tmp_path):
        save_grid(SdfGrid(np.ones((4, 4, 4)), np.zeros(3), 1.0), tmp_path / "g.sdfg")
        assert main(["mesh", str(tmp_path / "g.sdfg"), "--out", str(tmp_path / "e.ply")]) == 0
        v, f = read_ply(tmp_path / "e.ply")
        assert v.shape == (0, 3) and f.shape == (0, 3)

    def test_mesh_against_itself_is_zero(self, trained, tmp_path, capsys):
        main(["mesh", str(trained / "final"), "--out", str(tmp_path / "m.ply")])
        capsys.readouterr()
        assert main(["eval", "--mesh", str(tmp_path / "m.ply"), "--reference", str(tmp_path / "m.ply"), "--samples", "500"]) == 0
        assert json.loads(capsys.readouterr().out)["chamfer"] == 0.0

    def test_baked_grid_is_close_to_analytic_surface(self, tmp_path, capsys):
        from voxgrad.scenes import bake_grid, builtin_scene

        grid = bake_grid(builtin_scene("sphere"), 48, dtype=np.float64)
        save_grid(grid, tmp_path / "g.sdfg")
        assert main(["eval", "--checkpoint", str(tmp_path / "g.sdfg"), "--scene", "sphere", "--samples", "5000"]) == 0
        report = json.loads(capsys.readouterr().out)
        # sampling density dominates: mean spacing of 5000 points on the sphere ~ 0.01
        assert report["chamfer"] < 0.02
        assert report["spacing"] == pytest.approx(2 / 47)

    def test_missing_mesh_is_io_error(self, tmp_path):
        assert main(["eval", "--mesh", str(tmp_path / "nope.ply")]) == EXIT_IO

    def test_needs_exactly_one_input(self):
        assert main(["eval"]) == EXIT_USAGE


class TestDiagnose:
    def test_report_and_traces(self, tmp_path):
        assert main(["diagnose", "--out", str(tmp_path), "--trials", "30"]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        for key in ("max_analytical_gap", "max_interpolated_gap", "ratio"):
            assert key in report
        assert report["max_interpolated_gap"] <= 1e-9
        trace = read_csv(tmp_path / "ray_trace.csv")
        assert len(trace["t"]) == 256

    def test_config_keys_apply_and_unknown_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"trials": 5, "samples": 64}))
        assert main(["diagnose", "--config", str(path), "--out", str(tmp_path / "d")]) == 0
        assert json.loads((tmp_path / "d" / "report.json").read_text())["trials"] == 5
        path.write_text(json.dumps({"trails": 5}))
        assert main(["diagnose", "--config", str(path), "--out", str(tmp_path / "d")]) == EXIT_USAGE


class TestBenchReg:
    def test_modes_agree_and_schema_is_stable(self):
        reports, grads = {}, {}
        for mode in ("tape-oracle", "manual-serial", "manual-parallel"):
            reports[mode], grads[mode] = run_bench(mode, 32, 1024, repeats=1, workers=2)
        keys = {frozenset(r) for r in reports.values()}
        assert len(keys) == 1
        ref = grads["tape-oracle"]
        scale = np.abs(ref).max()
        for mode in ("manual-serial", "manual-parallel"):
            assert np.abs(grads[mode] - ref).max() <= 1e-6 * scale

    def test_cli_report(self, tmp_path):
        out = tmp_path / "bench.json"
        assert main(["bench-reg", "--resolution", "16", "--batch", "256", "--repeats", "1", "--out", str(out)]) == 0
        reports = json.loads(out.read_text())["reports"]
        assert [r["mode"] for r in reports] == ["tape-oracle", "manual-serial", "manual-parallel"]
        assert all(r["max_rel_diff_vs_tape-oracle"] <= 1e-6 for r in reports)
