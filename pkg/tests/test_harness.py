import math
import re
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from helpers import INTRINSICS
from splatstream.codec import sh_vectors, train_codebook
from splatstream.exceptions import ContractViolation, FormatError
from splatstream.harness import (
    MetricsRow, Pose, ReplayOptions, Trajectory, bench, metrics_csv, orbit, psnr, read_metrics_csv, replay,
    static,
)
from splatstream.harness.cli import COMMANDS, main, read_config
from splatstream.render import read_image

CENTER = (30.0, 30.0, 0.0)


@pytest.fixture(scope="module")
def book(city_tree):
    return train_codebook(sh_vectors(city_tree.gaussians), 128)


class TestTrajectory:
    def test_text_round_trip(self):
        traj = orbit(CENTER, 20, 5, 10)
        back = Trajectory.from_text("# comment\nframe,px,py,pz,qw,qx,qy,qz,t\n" + traj.to_text())
        assert len(back) == 10
        for a, b in zip(traj, back):
            assert a.frame == b.frame and np.array_equal(a.position, b.position)
            assert np.array_equal(a.quaternion, b.quaternion) and a.t == b.t

    def test_orbit_looks_at_centre(self):
        cam = orbit(CENTER, 20, 5, 3)[1].camera(**INTRINSICS)
        x, y, z = cam.rotation @ np.asarray(CENTER) + cam.translation
        assert abs(x) < 1e-4 and abs(y) < 1e-4 and z > 0

    def test_malformed_line(self):
        with pytest.raises(FormatError, match="line 2"):
            Trajectory.from_text("0,0,0,0,1,0,0,0,0\n1,0,0,0,1,0,0\n")
        with pytest.raises(FormatError):
            Trajectory.from_text("0,a,0,0,1,0,0,0,0\n")

    def test_frames_increase(self):
        p = Pose(0, np.zeros(3), np.array([1.0, 0, 0, 0]), 0.0)
        with pytest.raises(ContractViolation):
            Trajectory([p, p])

    def test_unit_quaternion(self):
        with pytest.raises(ContractViolation, match="unit"):
            Trajectory([Pose(0, np.zeros(3), np.array([2.0, 0, 0, 0]), 0.0)])


class TestMetrics:
    def test_psnr_cap(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == 100.0

    def test_psnr_value(self):
        assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)

    def test_psnr_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_csv_schema_and_round_trip(self):
        rows = [MetricsRow(0, 0, 10, 9, 10, 400, 1.0, 1e6, 4e-5, 48.5, 30, 900),
                MetricsRow(1, -1, 10, 9, 0, 0, 1.0, 0.0, 0.0, float("nan"), 0, 880)]
        text = metrics_csv(rows)
        assert text.startswith("# schema=splatstream-metrics/1\nframe,round,")
        assert "search_s" not in text
        back = read_metrics_csv(text)
        assert back[0] == rows[0] and math.isnan(back[1].psnr_db)
        assert "render_s" in metrics_csv(rows, timings=True).splitlines()[1]

    def test_csv_requires_schema(self):
        with pytest.raises(FormatError):
            read_metrics_csv("frame,round\n0,0\n")

    def test_row_validation(self):
        with pytest.raises(ContractViolation):
            MetricsRow(0, 0, 1, 1, 1, -5, 1.0, 0.0, 0.0, 0.0, 0, 0)
        with pytest.raises(ContractViolation):
            MetricsRow(0, 0, 1, 1, 1, 5, 1.5, 0.0, 0.0, 0.0, 0, 0)


class TestReplay:
    def test_single_frame(self, city_tree, book):
        res = replay(city_tree, orbit(CENTER, 30, 8, 1), book, INTRINSICS)
        assert len(res.rows) == 1 and res.rows[0].round == 0
        assert len(res.cloud.log) == 1 and res.client.rounds == 1

    def test_static_pose_sends_no_records(self, city_tree, book):
        first = orbit(CENTER, 30, 8, 1)[0]
        res = replay(city_tree, static(first.position, first.quaternion, 100), book, INTRINSICS,
                     options=ReplayOptions(psnr=False))
        rounds = [r for r in res.rows if r.round >= 0]
        assert len(rounds) == 25 and rounds[0].delta_size > 0
        assert all(r.delta_size == 0 for r in rounds[1:])
        # later frames carry only the cut-id list, identical each round
        assert len({r.delta_bytes for r in rounds[1:]}) == 1
        assert all(r.overlap == 1.0 for r in rounds[1:])

    def test_oracle_checked_orbit(self, city_tree, book):
        res = replay(city_tree, orbit(CENTER, 30, 8, 80), book, INTRINSICS,
                     options=ReplayOptions(check_oracle=True, psnr=False))
        assert res.oracle_rounds == 20
        assert np.mean([r.overlap for r in res.rows if r.round > 0]) >= 0.95

    def test_deterministic_outputs(self, city_tree, book, tmp_path):
        traj = orbit(CENTER, 30, 8, 9)
        outs = []
        for k in range(2):
            opts = ReplayOptions(image_dir=str(tmp_path / f"run{k}"), image_every=4)
            res = replay(city_tree, traj, book, INTRINSICS, options=opts)
            outs.append((res.to_csv(), [p.read_bytes() for p in res.images]))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1] and len(outs[0][1]) == 6

    def test_psnr_reported(self, city_tree, book):
        res = replay(city_tree, orbit(CENTER, 30, 8, 2), book, INTRINSICS)
        assert all(20.0 < r.psnr_db <= 100.0 for r in res.rows)

    def test_frame_context_in_errors(self, city_tree, book):
        bad = dict(INTRINSICS, near=0.5)
        with pytest.raises(ContractViolation, match="frame 0"):
            replay(city_tree, orbit(CENTER, 30, 8, 1), book, bad)


class TestBench:
    def test_counters(self, city_tree):
        report = bench(city_tree, orbit(CENTER, 30, 8, 4), INTRINSICS)
        assert report.row("temporal_search").count < report.row("full_search").count
        assert report.row("stereo_render").count < report.row("mono_pair_render").count
        assert report.row("full_search").calls == 3
        text = report.format()
        assert "temporal/full nodes" in text and "stereo/2xmono alpha" in text
        assert report.to_csv().startswith("stage,calls,wall_s,counter,count\n")

    def test_empty_scene(self):
        report = bench(None, orbit(CENTER, 30, 8, 1), INTRINSICS)
        assert all(r.count == 0 and r.calls == 0 for r in report.rows)


def test_config_file_sections(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("width = 128\n[replay]\nframe-interval = 2\n")
    parsed = read_config(cfg)
    assert set(parsed) == set(COMMANDS)
    assert parsed["replay"] == {"width": "128", "frame_interval": "2"}
    assert parsed["bench"] == {"width": "128"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    run = CliRunner().invoke
    steps = [
        ["gen-scene", "--cells-x", "4", "--cells-y", "4", "--per-cell", "40", "--out", str(d / "s.ply")],
        ["build-tree", "--scene", str(d / "s.ply"), "--out", str(d / "t.nlod")],
        ["partition", "--tree", str(d / "t.nlod"), "--target", "32", "--out", str(d / "p.nlod")],
        ["train-codebook", "--source", str(d / "p.nlod"), "--k", "64", "--out", str(d / "b.ncbk")],
        ["gen-trajectory", "--center", "20", "20", "0", "--radius", "25", "--frames", "12",
         "--out", str(d / "traj.txt")],
    ]
    for args in steps:
        result = run(main, args)
        assert result.exit_code == 0, (args, result.output)
    return d


class TestCli:
    def test_replay_csv_and_images(self, workspace):
        d = workspace
        cfg = d / "replay.cfg"
        cfg.write_text("width = 128\nheight = 96\nfocal = 120\n[replay]\nframe-interval = 2\n")
        result = CliRunner().invoke(main, [
            "--config", str(cfg), "replay", "--tree", str(d / "p.nlod"), "--trajectory", str(d / "traj.txt"),
            "--codebook", str(d / "b.ncbk"), "--check-oracle", "--images", str(d / "img"), "--image-every", "6",
            "--image-format", "ppm", "--bandwidth-csv", str(d / "bw.csv"),
        ])
        assert result.exit_code == 0, result.output
        rows = read_metrics_csv(result.output)
        assert len(rows) == 12 and sum(r.round >= 0 for r in rows) == 6
        assert read_image(d / "img" / "frame00006_R.ppm").shape == (96, 128, 3)
        assert (d / "bw.csv").read_text().startswith("round,bytes,required_bps\n")

    def test_flag_beats_config(self, workspace):
        d = workspace
        cfg = d / "wide.cfg"
        cfg.write_text("[replay]\nframe-interval = 2\n")
        result = CliRunner().invoke(main, [
            "--config", str(cfg), "replay", "--tree", str(d / "p.nlod"), "--trajectory", str(d / "traj.txt"),
            "--frame-interval", "3", "--no-psnr", "--width", "64", "--height", "48", "--focal", "60",
        ])
        assert result.exit_code == 0, result.output
        assert sum(r.round >= 0 for r in read_metrics_csv(result.output)) == 4

    def test_bench(self, workspace):
        d = workspace
        result = CliRunner().invoke(main, ["bench", "--tree", str(d / "p.nlod"), "--trajectory",
                                           str(d / "traj.txt"), "--csv", "--width", "64", "--height", "48",
                                           "--focal", "60"])
        assert result.exit_code == 0, result.output
        assert result.output.splitlines()[0] == "stage,calls,wall_s,counter,count"

    def test_codebook_from_ply(self, workspace):
        d = workspace
        result = CliRunner().invoke(main, ["train-codebook", "--source", str(d / "s.ply"), "--k", "16",
                                           "--out", str(d / "b16.ncbk")])
        assert result.exit_code == 0 and (d / "b16.ncbk").stat().st_size == 20 + 16 * 12 * 4

    def test_missing_input(self, workspace):
        result = CliRunner().invoke(main, ["build-tree", "--scene", str(workspace / "nope.ply"), "--out", "x"])
        assert result.exit_code != 0

    def test_serve_and_client(self, workspace):
        d = workspace
        common = ["--width", "64", "--height", "48", "--focal", "60"]
        server = subprocess.Popen(
            [sys.executable, "-m", "splatstream.harness.cli", "serve", "--tree", str(d / "p.nlod"),
             "--codebook", str(d / "b.ncbk"), "--port", "0", *common],
            stderr=subprocess.PIPE, text=True,
        )
        try:
            line = server.stderr.readline()
            port = int(re.search(r":(\d+)$", line.strip()).group(1))
            result = CliRunner().invoke(main, ["client", "--port", str(port), "--trajectory", str(d / "traj.txt"),
                                               *common])
            assert result.exit_code == 0, result.output
            lines = result.output.strip().splitlines()
            assert lines[0] == "frame,round,delta_bytes,resident,queue" and len(lines) == 13
            server.wait(timeout=30)
            assert "served 3 rounds" in server.stderr.read()
        finally:
            server.kill()
