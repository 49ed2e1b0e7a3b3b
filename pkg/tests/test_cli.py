import pytest

from ndm.cli import EXIT_INVALID, EXIT_OK, lgn_drive_main, ndm_main, rdk_main
from ndm.retina import load_drive
from ndm.stimulus import load_stimulus

SMALL = """
[stimulus]
frame_size = 30
aperture_diameter = 27.0
n_dots = 20
n_frames = 30
[network]
lgn_side = 10
v1_side = 5
mt_side = 2
v1_mt_patch = 3
n_lip_e = 20
n_lip_i = 30
[plan]
coherences = [0.0, 0.8]
stimuli_per_condition = 1
repeats = 1
n_reinit = 1
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_rdk_gen_and_lgn_drive(tmp_path, cfg, capsys):
    out = tmp_path / "m.rdk"
    assert rdk_main(["gen", "--coherence", "0.5", "--direction", "Left", "--seed", "1", "--out", str(out),
                     "--config", str(cfg)]) == EXIT_OK
    stim = load_stimulus(out)
    assert stim.voxels.shape == (30, 30, 30)
    assert lgn_drive_main(["--in", str(out), "--out", str(tmp_path / "d.lgnd"), "--config", str(cfg)]) == EXIT_OK
    assert load_drive(tmp_path / "d.lgnd").on.shape[1:] == (10, 10)


def test_rdk_rejects_bad_coherence(tmp_path, capsys):
    code = rdk_main(["gen", "--coherence", "1.5", "--direction", "Left", "--seed", "1", "--out",
                     str(tmp_path / "m.rdk")])
    assert code == EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_validate(cfg, capsys):
    assert ndm_main(["validate", "--config", str(cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "network.n_lip_e = 20  # published" in out


def test_validate_bad(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[network.excitatory]\nv_threshold = -80.0\n")
    assert ndm_main(["validate", "--config", str(p)]) == EXIT_INVALID
    assert "network.excitatory" in capsys.readouterr().err


def test_run_replay_trace(tmp_path, cfg):
    out = tmp_path / "run"
    assert ndm_main(["run", "baseline", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == EXIT_OK
    assert (out / "run_manifest.json").exists()
    assert ndm_main(["replay", "--manifest", str(out / "run_manifest.json"), "--out", str(tmp_path / "r")]) == 0
    assert ndm_main(["trace", "--config", str(cfg), "--coherence", "0.8", "--out", str(tmp_path / "t"),
                     "--raster", "LIP_E"]) == EXIT_OK
    assert (tmp_path / "t" / "raster.csv").exists()


def test_run_rejects_unknown_stimulation_target(tmp_path, cfg):
    p = tmp_path / "ms.toml"
    p.write_text(SMALL + "targets = ['V4']\n")
    assert ndm_main(["run", "microstim", "--config", str(p), "--out", str(tmp_path / "y")]) == EXIT_INVALID
