import json

import numpy as np
import pytest

from revage.cli import main

TINY_TRAIN = [
    "--iterations", "2",
    "--batch-size", "1",
    "--delta-t-choices", "2",
    "--window-frames", "6",
    "--base-channels", "8",
    "--hidden-channels", "8",
    "--depth", "2",
    "--seed", "0",
]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(
        ["synth", "--out", str(root / "data"), "--subjects", "2", "--ages", "18,85", "--seed", "5"]
    )
    assert code == 0
    code = main(["train", "--data", str(root / "data"), "--out", str(root / "run")] + TINY_TRAIN)
    assert code == 0
    return root


class TestSynth:
    def test_outputs_and_snapshot(self, workspace):
        assert (workspace / "data" / "manifest.json").exists()
        snapshot = json.loads((workspace / "data" / "resolved_config.json").read_text())
        assert snapshot["command"] == "synth"
        assert snapshot["pipeline"]["subjects"] == 2

    def test_deterministic_across_runs(self, workspace, tmp_path, capsys):
        code, _, _ = run(
            capsys, "synth", "--out", str(tmp_path / "data2"), "--subjects", "2",
            "--ages", "18,85", "--seed", "5",
        )
        assert code == 0
        a = json.loads((workspace / "data" / "manifest.json").read_text())
        b = json.loads((tmp_path / "data2" / "manifest.json").read_text())
        a["created_at"] = b["created_at"] = ""
        assert a == b
        frame = "s0000/age_18/frame_000001.png"
        assert (workspace / "data" / frame).read_bytes() == (tmp_path / "data2" / frame).read_bytes()

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")
        )
        assert code == 2
        assert json.loads(err)["kind"] == "usage"


class TestTrain:
    def test_run_artifacts(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "ckpt_final.npz").exists()
        log = (run_dir / "log.csv").read_text().strip().splitlines()
        assert len(log) == 3
        assert json.loads((run_dir / "resolved_config.json").read_text())["command"] == "train"

    def test_deterministic_logs(self, workspace, tmp_path, capsys):
        code, _, _ = run(
            capsys, "train", "--data", str(workspace / "data"), "--out", str(tmp_path / "run2"),
            *TINY_TRAIN,
        )
        assert code == 0
        assert (tmp_path / "run2" / "log.csv").read_bytes() == (
            workspace / "run" / "log.csv"
        ).read_bytes()

    def test_resume_continues_iteration_count(self, workspace, tmp_path, capsys):
        code, out, _ = run(
            capsys, "train", "--data", str(workspace / "data"), "--out", str(tmp_path / "run3"),
            "--resume", str(workspace / "run" / "ckpt_final.npz"),
            *TINY_TRAIN[:1], "4", *TINY_TRAIN[2:],
        )
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["iterations"] == 4


class TestInfer:
    def test_roundtrip(self, workspace, tmp_path, capsys):
        clip_dir = workspace / "data" / "s0000" / "age_18"
        code, out, _ = run(
            capsys, "infer", "--ckpt", str(workspace / "run" / "ckpt_final.npz"),
            "--clip", str(clip_dir), "--target-age", "85", "--out", str(tmp_path / "infer"),
        )
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["frames"] == 57
        assert (tmp_path / "infer" / "grid.png").exists()
        assert (tmp_path / "infer" / "clip" / "frame_000057.png").exists()

    def test_missing_input_age_is_usage_error(self, workspace, tmp_path, capsys):
        from PIL import Image

        bare = tmp_path / "bare"
        bare.mkdir()
        Image.new("RGB", (64, 64)).save(bare / "frame_000001.png")
        code, _, err = run(
            capsys, "infer", "--ckpt", str(workspace / "run" / "ckpt_final.npz"),
            "--clip", str(bare), "--target-age", "85", "--out", str(tmp_path / "o"),
        )
        assert code == 2
        assert json.loads(err)["kind"] == "usage"


class TestEvalAndReport:
    def test_eval_then_report(self, workspace, tmp_path, capsys):
        report_dir = tmp_path / "report"
        code, out, _ = run(
            capsys, "eval", "--ckpt", str(workspace / "run" / "ckpt_final.npz"),
            "--data", str(workspace / "data"), "--targets", "18,85",
            "--out", str(report_dir),
        )
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["rows"] == 8
        assert (report_dir / "rows.csv").exists()
        summary = json.loads((report_dir / "summary.json").read_text())
        assert summary["interval"] == 1

        code, out, _ = run(
            capsys, "report", "--rows", str(report_dir / "rows.csv"),
            "--out", str(tmp_path / "charts"),
        )
        assert code == 0
        assert (tmp_path / "charts" / "report_table.csv").exists()
        for metric in ("trwc", "t_age", "age_mae"):
            assert (tmp_path / "charts" / f"bar_{metric}.png").exists()

    def test_eval_deterministic(self, workspace, tmp_path, capsys):
        outs = []
        for name in ("r1", "r2"):
            code, _, _ = run(
                capsys, "eval", "--ckpt", str(workspace / "run" / "ckpt_final.npz"),
                "--data", str(workspace / "data"), "--targets", "85",
                "--out", str(tmp_path / name),
            )
            assert code == 0
            outs.append((tmp_path / name / "rows.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_runtime_error_exit_code(self, workspace, tmp_path, capsys):
        code, _, err = run(
            capsys, "eval", "--ckpt", str(tmp_path / "missing.npz"),
            "--data", str(workspace / "data"), "--targets", "85",
            "--out", str(tmp_path / "r"),
        )
        assert code == 1
        assert json.loads(err)["kind"] == "runtime"


class TestParser:
    def test_version_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "revage" in capsys.readouterr().out

    def test_bad_flag_is_usage_error(self, capsys):
        code = main(["synth", "--out"])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["kind"] == "usage"
