import json
import subprocess
import sys

import numpy as np
import pytest

from poseact import config as cfgmod
from poseact.cli import SUBCOMMANDS, main
from poseact.mesh import save_obj, textured_cube


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def payload(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def cube_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "cube.obj"
    save_obj(textured_cube(), path)
    return str(path)


class TestDispatch:
    def test_missing_subcommand(self, capsys):
        code, _, err = run(capsys)
        assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "fly")
        assert code == 2 and "usage" in err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "track", "--bogus")
        assert code == 2 and "bogus" in err

    def test_runtime_error_exit_1(self, capsys, tmp_path):
        code, _, err = run(capsys, "track", "--policy", f"network:{tmp_path / 'missing.ckpt'}",
                           "--frames", "2")
        assert code == 1
        assert json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"

    def test_bad_policy_spec(self, capsys):
        code, _, err = run(capsys, "track", "--policy", "magic", "--frames", "2")
        assert code == 2

    def test_help_lists_flags(self):
        for cmd in SUBCOMMANDS:
            r = subprocess.run([sys.executable, "-m", "poseact.cli", cmd, "--help"],
                               capture_output=True, text=True)
            assert r.returncode == 0 and "--seed" in r.stdout and "--config" in r.stdout

    def test_console_script_exit_code(self):
        r = subprocess.run([sys.executable, "-m", "poseact.cli", "nope"], capture_output=True,
                           text=True)
        assert r.returncode == 2 and json.loads(r.stderr.strip().splitlines()[-1])["error"] == "usage"


class TestConfig:
    def test_parse(self):
        cfg = cfgmod.parse_config("# comment\nrun.seed = 5\nsteps.rot = 2\ndata.augment = false\n")
        assert cfg == {"run.seed": 5, "steps.rot": 2.0, "data.augment": False}

    @pytest.mark.parametrize("text", ["run.seed 5", "seed = 5", "run.nope = 1",
                                      "run.seed = abc", "data.augment = 3"])
    def test_errors(self, text):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.parse_config(text)

    def test_env_var_and_override(self, tmp_path, monkeypatch):
        p = tmp_path / "run.cfg"
        p.write_text("run.seed = 11\nloop.max_steps = 9\n")
        monkeypatch.setenv(cfgmod.ENV_VAR, str(p))
        cfg = cfgmod.load_config()
        assert cfg["run.seed"] == 11 and cfg["loop.max_steps"] == 9
        cfg = cfgmod.merge_overrides(cfg, {"run.seed": 3, "loop.max_steps": None})
        assert cfg["run.seed"] == 3 and cfg["loop.max_steps"] == 9

    def test_config_error_exit_2(self, capsys, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("nothing.here = 1\n")
        code, _, err = run(capsys, "render-debug", "--config", str(p), "--out", str(tmp_path / "x"))
        assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "config"

    def test_resolved_config_logged(self, capsys, caplog, tmp_path):
        caplog.set_level("INFO")
        code, _, _ = run(capsys, "render-debug", "--seed", "4", "--out", str(tmp_path / "r"))
        assert code == 0 and any('"run.seed": 4' in m for m in caplog.messages)


class TestCommands:
    def test_gen_data_deterministic(self, capsys, tmp_path, cube_obj):
        hashes = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, "gen-data", "--mesh", cube_obj, "--out", str(tmp_path / name),
                               "--per-group", "1", "--seed", "7", "--no-augment")
            assert code == 0
            hashes.append(payload(out)["sha256"])
        assert hashes[0] == hashes[1]
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["total"] == 5 and manifest["base_seed"] == 7

    def test_gen_data_mesh_set(self, capsys, tmp_path, cube_obj):
        code, out, _ = run(capsys, "gen-data", "--mesh", cube_obj, "--mesh", "builtin:cube",
                           "--out", str(tmp_path / "set"), "--counts", "small=1", "--no-augment")
        assert code == 0 and len(payload(out)["objects"]) == 2
        assert (tmp_path / "set" / "obj01" / "manifest.json").exists()

    def test_track_resets(self, capsys, caplog, tmp_path):
        caplog.set_level("INFO")
        trace = tmp_path / "trace.jsonl"
        code, out, _ = run(capsys, "track", "--policy", "oracle", "--scene", "synth",
                             "--frames", "45", "--reset-every", "15", "--out", str(trace))
        res = payload(out)
        assert code == 0 and res["resets"] == [0, 15, 30]
        for i in (0, 15, 30):
            assert f"frame {i}: reset" in caplog.messages
        lines = trace.read_text().splitlines()
        assert len(lines) == sum(res["decisions_per_frame"])

    def test_robustness(self, capsys, tmp_path):
        code, out, _ = run(capsys, "robustness", "--policy", "oracle", "--m-max", "10",
                           "--out", str(tmp_path / "r.json"), "--csv", str(tmp_path / "r.csv"))
        rep = payload(out)
        assert code == 0 and len(rep["sweep"]) == 11
        assert rep["sweep"][0]["m"] == 0 and rep["sweep"][0]["success"] == 100.0
        assert json.loads((tmp_path / "r.json").read_text())["sweep"] == rep["sweep"]
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 12

    def test_detect_synth(self, capsys, tmp_path):
        code, out, _ = run(capsys, "detect", "--policy", "oracle", "--scene", "synth",
                           "--rotations", "4", "--debug-dir", str(tmp_path / "dbg"))
        res = payload(out)
        assert code == 0 and res["center_error_px"] <= 16.0
        assert "pose" in res and (tmp_path / "dbg" / "detect_W.png").exists()

    def test_eval_report(self, capsys, tmp_path):
        code, out, _ = run(capsys, "eval", "--policy", "oracle", "--scene", "synth", "--frames", "5",
                           "--out", str(tmp_path / "e.json"), "--csv", str(tmp_path / "e.csv"),
                           "--overlay-dir", str(tmp_path / "ov"))
        rep = json.loads((tmp_path / "e.json").read_text())
        cube = rep["per_object"]["cube"]
        assert code == 0 and cube["success_at_0.1d"] == 100.0 and cube["frames"] == 5
        assert len(list((tmp_path / "ov").iterdir())) == 5

    def test_render_debug(self, capsys, tmp_path):
        pose = json.dumps({"q": [1, 0, 0, 0], "t": [0, 0, 0.8]})
        code, out, _ = run(capsys, "render-debug", "--pose", pose, "--out", str(tmp_path / "r"),
                           "--patch")
        res = payload(out)
        assert code == 0 and res["pixels"] > 0
        for key in ("rgb", "depth", "mask"):
            assert (tmp_path / f"r_{key}.png").exists()

    def test_train_and_network_policy(self, capsys, tmp_path):
        ckpt = tmp_path / "tiny.ckpt"
        code, out, _ = run(capsys, "train", "--out", str(ckpt), "--steps", "2", "--batch-size", "2",
                           "--buffer-size", "4", "--refresh", "1", "--no-augment")
        assert code == 0 and payload(out)["steps"] == 2
        code, out, _ = run(capsys, "track", "--policy", f"network:{ckpt}", "--frames", "2",
                           "--max-steps", "3")
        assert code == 0 and max(payload(out)["decisions_per_frame"]) <= 3


def test_seeded_synth_scene_stable(capsys):
    a = payload(run(capsys, "detect", "--scene", "synth", "--seed", "2", "--no-rotation")[1])
    b = payload(run(capsys, "detect", "--scene", "synth", "--seed", "2", "--no-rotation")[1])
    assert a == b and np.isfinite(a["diameter"])
