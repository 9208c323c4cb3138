import json
import os

import numpy as np
import pytest

from kvacontrol import cli
from kvacontrol import kva_field as kvf
from kvacontrol import formats as fm
from kvacontrol.errors import (
    BadMagic,
    InvariantViolation,
    ParseError,
    TruncatedFile,
    VersionMismatch,
)
from kvacontrol.kinematics import ToolGeometry, default_camera, synth_trajectory


class TestTrajectoryFormat:
    def _traj(self, seed=0):
        return synth_trajectory("composite", T=6, seed=seed), default_camera(48, 48)

    def test_round_trip_bit_exact(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam, seq_id="abc")
        back, cam2, seq = fm.read_trajectory(path)
        assert seq == "abc"
        assert back.dt == traj.dt
        for a, b in zip(traj.states, back.states):
            np.testing.assert_array_equal(a.as_vector(), b.as_vector())
        assert (cam2.fx, cam2.fy, cam2.cx, cam2.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
        np.testing.assert_array_equal(cam2.rotation, cam.rotation)

    def test_rewrite_identical_bytes(self, tmp_path):
        traj, cam = self._traj(3)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        fm.write_trajectory(p1, traj, cam)
        fm.write_trajectory(p2, traj, cam)
        assert p1.read_bytes() == p2.read_bytes()

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam)
        text = path.read_text()
        lines = text.splitlines()
        lines.insert(1, "# a comment")
        lines.insert(3, "")
        path.write_text("\n".join(lines) + "\n")
        back, _, _ = fm.read_trajectory(path)
        assert len(back) == len(traj)

    def test_parse_error_reports_line(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam)
        lines = path.read_text().splitlines()
        lines[4] = "frame 1 not_a_number"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as exc:
            fm.read_trajectory(path)
        assert exc.value.line == 5

    def test_unknown_record_rejected(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam)
        path.write_text(path.read_text() + "bogus 1 2 3\n")
        with pytest.raises(ParseError):
            fm.read_trajectory(path)

    def test_nan_action_rejected(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam)
        text = path.read_text().replace("frame 2 ", "frame 2 nan ", 1)
        # replace the first value of frame 2 with nan keeping 9 values
        lines = text.splitlines()
        for i, ln in enumerate(lines):
            if ln.startswith("frame 2 "):
                parts = ln.split()
                parts[2] = "nan"
                lines[i] = " ".join(parts[:11])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InvariantViolation):
            fm.read_trajectory(path)

    def test_gap_in_frame_indices_rejected(self, tmp_path):
        traj, cam = self._traj()
        path = tmp_path / "t.txt"
        fm.write_trajectory(path, traj, cam)
        lines = [ln for ln in path.read_text().splitlines()
                 if not ln.startswith("frame 3 ")]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InvariantViolation):
            fm.read_trajectory(path)

    def test_missing_camera_rejected(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("seq x\ndt 0.5\nframe 1 0 0 0.2 0 0 0 0 0.1 0.1\n")
        with pytest.raises(ParseError):
            fm.read_trajectory(path)


class TestFieldFormat:
    def _field(self, seed=0):
        rng = np.random.default_rng(seed)
        return kvf.KvaField(channels=rng.normal(size=(12, 9, 9)).astype(np.float32)
                            .astype(float), t=3)

    def test_round_trip(self, tmp_path):
        f = self._field()
        path = tmp_path / "f.kvaf"
        fm.write_field(f, path)
        back = fm.read_field(path)
        assert back.t == 3
        np.testing.assert_array_equal(back.channels, f.channels)

    def test_header_layout(self, tmp_path):
        f = self._field()
        path = tmp_path / "f.kvaf"
        fm.write_field(f, path)
        data = path.read_bytes()
        assert data[:4] == b"KVAF"
        import struct
        version, h, w, t, c = struct.unpack("<5I", data[4:24])
        assert (version, h, w, t, c) == (1, 12, 9, 3, 9)
        assert len(data) == 24 + 4 * 12 * 9 * 9

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.kvaf"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagic):
            fm.read_field(path)

    def test_version_mismatch(self, tmp_path):
        f = self._field()
        path = tmp_path / "f.kvaf"
        fm.write_field(f, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            fm.read_field(path)

    def test_truncated(self, tmp_path):
        f = self._field()
        path = tmp_path / "f.kvaf"
        fm.write_field(f, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(TruncatedFile):
            fm.read_field(path)
        path.write_bytes(data[:10])
        with pytest.raises(TruncatedFile):
            fm.read_field(path)


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=(17, 23))
        path = tmp_path / "m.pgm"
        fm.write_pgm(path, labels)
        np.testing.assert_array_equal(fm.read_pgm(path), labels)

    def test_header(self, tmp_path):
        path = tmp_path / "m.pgm"
        fm.write_pgm(path, np.zeros((4, 6), dtype=int))
        assert path.read_bytes().startswith(b"P5\n6 4\n255\n")

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "m.pgm"
        body = bytes(range(6))
        path.write_bytes(b"P5\n# comment\n3 2\n255\n" + body)
        out = fm.read_pgm(path)
        np.testing.assert_array_equal(out, np.arange(6).reshape(2, 3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P6\n1 1\n255\nX")
        with pytest.raises(BadMagic):
            fm.read_pgm(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n4 4\n255\nab")
        with pytest.raises(TruncatedFile):
            fm.read_pgm(path)


class TestConfig:
    def test_defaults(self):
        cfg = fm.load_config()
        assert cfg.top_k == 2
        assert cfg.dense_end == 0.40
        assert cfg.sparse_start == 0.75
        assert (cfg.lam_kp, cfg.lam_src, cfg.lam_cp, cfg.lam_sub) == \
            (0.01, 0.005, 0.01, 0.005)
        assert cfg.ema_beta == 0.95
        assert (cfg.rho_full, cfg.rho_light) == (0.2, 0.3)
        assert cfg.refresh_intervals == (1, 2, 4)
        assert (cfg.lam_b, cfg.lam_t) == (0.5, 0.35)

    def test_json_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"frames": 4, "refresh_intervals": [1, 3, 6]}))
        cfg = fm.load_config(path, {"stride": 8})
        assert cfg.frames == 4
        assert cfg.refresh_intervals == (1, 3, 6)
        assert cfg.stride == 8

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"framez": 4}))
        with pytest.raises(ParseError):
            fm.load_config(path)


class TestRngStreams:
    def test_deterministic(self):
        a = fm.subsystem_rng(7, "gate").random(5)
        b = fm.subsystem_rng(7, "gate").random(5)
        np.testing.assert_array_equal(a, b)

    def test_independent_across_tags(self):
        a = fm.subsystem_rng(7, "gate").random(5)
        b = fm.subsystem_rng(7, "synth").random(5)
        assert not np.array_equal(a, b)

    def test_independent_across_seeds(self):
        a = fm.subsystem_rng(1, "gate").random(5)
        b = fm.subsystem_rng(2, "gate").random(5)
        assert not np.array_equal(a, b)


class TestAtomicWrite:
    def test_no_temp_left_behind(self, tmp_path):
        path = tmp_path / "f.bin"
        fm.atomic_write_bytes(path, b"hello")
        assert path.read_bytes() == b"hello"
        assert os.listdir(tmp_path) == ["f.bin"]

    def test_overwrite(self, tmp_path):
        path = tmp_path / "f.txt"
        fm.atomic_write_text(path, "one")
        fm.atomic_write_text(path, "two")
        assert path.read_text() == "two"


def _tree_bytes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            p = os.path.join(dirpath, name)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


class TestCli:
    def _run(self, *argv):
        assert cli.main(list(argv)) == 0

    def test_full_pipeline(self, tmp_path):
        out = str(tmp_path / "run")
        self._run("--seed", "1", "--out", out, "--resolution", "32x32",
                  "synth", "--frames", "6")
        traj = os.path.join(out, "trajectory.txt")
        assert os.path.exists(traj)
        assert len(os.listdir(os.path.join(out, "masks"))) == 6

        self._run("--seed", "1", "--out", os.path.join(out, "fields"),
                  "--resolution", "32x32", "lift", "--traj", traj)
        assert os.path.exists(os.path.join(out, "fields", "field_0001.kvaf"))
        assert os.path.exists(os.path.join(out, "fields", "channel_stats.csv"))

        self._run("--seed", "1", "--out", os.path.join(out, "routing"),
                  "--resolution", "32x32", "route", "--traj", traj)
        stats = open(os.path.join(out, "routing", "routing_stats.csv")).read()
        assert stats.splitlines()[0].startswith("bin,mean_motion,fusion_")

        self._run("--seed", "1", "--out", os.path.join(out, "losses"),
                  "--resolution", "32x32", "losses", "--traj", traj)
        grad = open(os.path.join(out, "losses", "grad_check.csv")).read()
        for row in grad.splitlines()[1:]:
            assert float(row.split(",")[1]) < 1e-5

        self._run("--seed", "1", "--out", os.path.join(out, "sched"),
                  "--resolution", "32x32", "schedule", "--traj", traj)
        cost = open(os.path.join(out, "sched", "cost_summary.csv")).read()
        assert "adaptive_default" in cost

        self._run("--out", os.path.join(out, "metrics"), "eval",
                  "--pred", os.path.join(out, "masks"),
                  "--target", os.path.join(out, "masks"))
        lines = open(os.path.join(out, "metrics", "metrics.csv")).read().splitlines()
        mean = lines[-1].split(",")
        assert mean[0] == "mean"
        assert float(mean[1]) == 0.0  # CD against itself
        assert float(mean[4]) == 1.0  # Dice against itself

        self._run("--out", os.path.join(out, "rep"), "report", "--inputs",
                  os.path.join(out, "metrics", "metrics.csv"),
                  os.path.join(out, "sched", "cost_summary.csv"))
        assert os.path.exists(os.path.join(out, "rep", "report.csv"))

    def test_rerun_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            self._run("--seed", "5", "--out", out, "--resolution", "32x32",
                      "synth", "--frames", "4")
            traj = os.path.join(out, "trajectory.txt")
            self._run("--seed", "5", "--out", os.path.join(out, "fields"),
                      "--resolution", "32x32", "lift", "--traj", traj)
            self._run("--seed", "5", "--out", os.path.join(out, "routing"),
                      "--resolution", "32x32", "route", "--traj", traj)
            outs.append(_tree_bytes(out))
        assert outs[0].keys() == outs[1].keys()
        for name in outs[0]:
            assert outs[0][name] == outs[1][name], name

    def test_different_seed_differs(self, tmp_path):
        files = []
        for seed in ("1", "2"):
            out = str(tmp_path / seed)
            self._run("--seed", seed, "--out", out, "--resolution", "32x32",
                      "synth", "--frames", "4")
            files.append(open(os.path.join(out, "trajectory.txt"), "rb").read())
        assert files[0] != files[1]

    def test_missing_file_clean_error(self, tmp_path, capsys):
        code = cli.main(["--out", str(tmp_path), "eval",
                         "--pred", str(tmp_path / "nope"),
                         "--target", str(tmp_path / "nope")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_trajectory_clean_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("camera 1 1 0 0 8 8\nframe 1 0 0 1 0 0 0 0 0 0\n")
        code = cli.main(["--out", str(tmp_path / "o"), "lift",
                         "--traj", str(bad)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"frames": 3, "resolution": [24, 24]}))
        out = str(tmp_path / "out")
        self._run("--config", str(cfg), "--out", out, "synth")
        from kvacontrol.formats import read_pgm
        masks = sorted(os.listdir(os.path.join(out, "masks")))
        assert len(masks) == 3
        labels = read_pgm(os.path.join(out, "masks", masks[0]))
        assert labels.shape == (24, 24)
