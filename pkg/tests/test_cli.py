import json

import numpy as np
import pytest

from fusionproxy.cli import CACHE_ENV, build_parser, main
from fusionproxy.images import save_png

from conftest import write_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset, cache and checkpoint shared by the CLI happy-path tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    write_dataset(data, 2, 32, 32, seed=11)
    rc = main(
        [
            "cache",
            "--data",
            str(data),
            "--out",
            str(root / "cache"),
            "--teachers",
            "det,synthA",
            "--n",
            "1",
            "--grid",
            "4",
        ]
    )
    assert rc == 0
    ckpt = root / "run" / "student.fpz"
    rc = main(
        [
            "train",
            "--cache",
            str(root / "cache"),
            "--out",
            str(ckpt),
            "--epochs",
            "1",
            "--batch",
            "2",
            "--crop",
            "32",
            "--variant",
            "ultralight",
        ]
    )
    assert rc == 0
    return {"root": root, "data": data, "cache": root / "cache", "ckpt": ckpt}


def first_json_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return [json.loads(line) for line in out if line.startswith("{")]


class TestParserDefaults:
    def test_train_defaults_match_documented_run(self):
        ns = build_parser().parse_args(["train", "--out", "x.fpz"])
        assert (ns.epochs, ns.batch, ns.crop) == (160, 8, 256)
        assert ns.tau == 1.0
        assert (ns.lambda_pix, ns.lambda_mfm, ns.lambda_ssim) == (1.0, 0.5, 0.2)
        assert (ns.misalign_px, ns.misalign_deg) == (10.0, 2.0)
        assert ns.variant == "default" and ns.seed == 0

    def test_cache_defaults(self):
        ns = build_parser().parse_args(
            ["cache", "--data", "d", "--teachers", "det", "--n", "2"]
        )
        assert ns.grid == 64 and ns.tau == 1.0 and ns.seed == 0

    def test_bench_defaults(self):
        ns = build_parser().parse_args(["bench", "--ckpt", "c"])
        assert (ns.height, ns.width, ns.runs, ns.warmup) == (480, 640, 1000, 50)

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["explode"])
        assert exc.value.code == 2


class TestHeaders:
    def test_cache_header_echoes_resolved_config(self, workdir, tmp_path, capsys):
        rc = main(
            [
                "cache",
                "--data",
                str(workdir["data"]),
                "--out",
                str(tmp_path / "c2"),
                "--teachers",
                "det",
                "--n",
                "1",
            ]
        )
        assert rc == 0
        header = first_json_line(capsys)[0]
        assert header["command"] == "cache"
        assert header["teachers"] == ["det"]
        assert header["grid"] == 64 and header["tau"] == 1.0

    def test_env_var_supplies_cache_root(self, workdir, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
        rc = main(
            ["cache", "--data", str(workdir["data"]), "--teachers", "det", "--n", "1"]
        )
        assert rc == 0
        assert (tmp_path / "envcache" / "manifest.json").exists()
        header = first_json_line(capsys)[0]
        assert header["out"] == str(tmp_path / "envcache")

    def test_missing_cache_root_fails(self, workdir, monkeypatch, capsys):
        monkeypatch.delenv(CACHE_ENV, raising=False)
        rc = main(["cache", "--data", str(workdir["data"]), "--teachers", "det", "--n", "1"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestFuse:
    def test_writes_fused_png(self, workdir, tmp_path, capsys):
        out = tmp_path / "fused" / "a.png"
        rc = main(
            [
                "fuse",
                "--ckpt",
                str(workdir["ckpt"]),
                "--ir",
                str(workdir["data"] / "ir" / "p00.png"),
                "--vis",
                str(workdir["data"] / "vis" / "p00.png"),
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert out.exists()

    def test_deterministic_bytes(self, workdir, tmp_path):
        outs = []
        for name in ("x.png", "y.png"):
            out = tmp_path / name
            rc = main(
                [
                    "fuse",
                    "--ckpt",
                    str(workdir["ckpt"]),
                    "--ir",
                    str(workdir["data"] / "ir" / "p01.png"),
                    "--vis",
                    str(workdir["data"] / "vis" / "p01.png"),
                    "--out",
                    str(out),
                ]
            )
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_fails_cleanly(self, workdir, tmp_path, capsys):
        rc = main(
            [
                "fuse",
                "--ckpt",
                str(tmp_path / "nope.fpz"),
                "--ir",
                str(workdir["data"] / "ir" / "p00.png"),
                "--vis",
                str(workdir["data"] / "vis" / "p00.png"),
                "--out",
                str(tmp_path / "o.png"),
            ]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestBench:
    def test_report_line(self, workdir, capsys):
        rc = main(
            [
                "bench",
                "--ckpt",
                str(workdir["ckpt"]),
                "--height",
                "32",
                "--width",
                "32",
                "--runs",
                "3",
                "--warmup",
                "1",
            ]
        )
        assert rc == 0
        lines = first_json_line(capsys)
        report = lines[-1]
        assert report["runs"] == 3 and report["height"] == 32
        assert report["fps"] * report["median_ms"] == pytest.approx(1000.0, rel=1e-9)


class TestEval:
    def test_scores_directory(self, workdir, tmp_path, capsys):
        fused_dir = tmp_path / "fused"
        for pid in ("p00", "p01"):
            rc = main(
                [
                    "fuse",
                    "--ckpt",
                    str(workdir["ckpt"]),
                    "--ir",
                    str(workdir["data"] / "ir" / f"{pid}.png"),
                    "--vis",
                    str(workdir["data"] / "vis" / f"{pid}.png"),
                    "--out",
                    str(fused_dir / f"{pid}.png"),
                ]
            )
            assert rc == 0
        capsys.readouterr()
        report_path = tmp_path / "report.json"
        rc = main(
            [
                "eval",
                "--fused",
                str(fused_dir),
                "--ir",
                str(workdir["data"] / "ir"),
                "--vis",
                str(workdir["data"] / "vis"),
                "--report",
                str(report_path),
            ]
        )
        assert rc == 0
        payload = first_json_line(capsys)[-1]
        assert payload["count"] == 2
        assert set(payload["aggregate"]) == {
            "entropy",
            "mutual_information",
            "spatial_frequency",
            "q_abf",
        }
        on_disk = json.loads(report_path.read_text())
        assert on_disk["count"] == 2 and set(on_disk["pairs"]) == {"p00", "p01"}

    def test_orphan_fused_file_fails(self, workdir, tmp_path, capsys):
        fused_dir = tmp_path / "fused"
        fused_dir.mkdir()
        save_png(fused_dir / "ghost.png", np.zeros((16, 16, 3), np.float32))
        rc = main(
            [
                "eval",
                "--fused",
                str(fused_dir),
                "--ir",
                str(workdir["data"] / "ir"),
                "--vis",
                str(workdir["data"] / "vis"),
            ]
        )
        assert rc == 1
        assert "ghost" in capsys.readouterr().err


class TestTrainArtifacts:
    def test_log_state_and_checkpoint_written(self, workdir):
        run = workdir["root"] / "run"
        assert (run / "student.fpz").exists()
        assert (run / "student.log.ndjson").exists()
        assert (run / "student.state.fpz").exists()
        lines = (run / "student.log.ndjson").read_text().strip().splitlines()
        rec = json.loads(lines[0])
        assert {"step", "total", "lr"} <= set(rec)

    def test_invalid_teacher_count_fails(self, workdir, tmp_path, capsys):
        rc = main(
            [
                "cache",
                "--data",
                str(workdir["data"]),
                "--out",
                str(tmp_path / "c"),
                "--teachers",
                "det",
                "--n",
                "0",
            ]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err
