import csv
import io

import numpy as np
import pytest
import tomli

from ndm.config import Config, load_config, provenance, record_trace, save_config, validate_config
from ndm.errors import StateError, ValidationError
from ndm.network import NetworkSpec, build_network, run_trial, TrialSettings
from ndm.retina import LgnDrive

from conftest import SMALL_SPEC


def _write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_empty_file_is_default(tmp_path):
    assert load_config(_write(tmp_path, "")) == Config()
    assert load_config() == Config()


def test_round_trip_is_fixed_point(tmp_path):
    cfg = load_config(_write(tmp_path, "[network]\nhebb_strong = 1.3\nn_lip_e = 200\n[plan]\nkind = 'finetune'\n"))
    p = save_config(cfg, tmp_path / "out.toml")
    again = load_config(p)
    assert again == cfg
    assert again.to_toml() == cfg.to_toml()


def test_hebb_strong_echoed(tmp_path):
    out = io.StringIO()
    cfg = validate_config(_write(tmp_path, "[network]\nhebb_strong = 1.3\n"), out=out)
    assert cfg.network.hebb_strong == 1.3
    assert "network.hebb_strong = 1.3  # published" in out.getvalue()


def test_threshold_below_reset_rejected(tmp_path):
    text = "[network.excitatory]\nv_threshold = -60.0\nv_reset = -55.0\n"
    with pytest.raises(ValidationError) as info:
        load_config(_write(tmp_path, text))
    assert any("network.excitatory" in v for v in info.value.violations)


def test_all_violations_are_listed(tmp_path):
    text = "[network]\nbogus = 1\nn_lip_e = 'many'\n[plan]\nn_reinit = 0\n[readout]\ncolour = 1\n[extra]\n"
    with pytest.raises(ValidationError) as info:
        load_config(_write(tmp_path, text))
    v = info.value.violations
    assert len(v) >= 5
    assert any("bogus" in x for x in v) and any("extra" in x for x in v) and any("n_reinit" in x for x in v)


def test_invalid_toml(tmp_path):
    with pytest.raises(ValidationError):
        load_config(_write(tmp_path, "[network\n"))


def test_overrides_win(tmp_path):
    cfg = load_config(_write(tmp_path, "[plan]\nmaster_seed = 3\n"), {"plan": {"master_seed": 9}})
    assert cfg.plan.master_seed == 9


def test_int_coerced_to_float(tmp_path):
    cfg = load_config(_write(tmp_path, "[network]\ng_v1_mt = 2\n"))
    assert isinstance(cfg.network.g_v1_mt, float)


def test_provenance_tags():
    tags = {k: t for k, _, t in Config().annotated()}
    assert set(tags.values()) <= {"published", "calibrated", "chosen"}
    assert tags["network.excitatory.c_m"] == "published"
    assert tags["retina.drive_gain"] == "calibrated"
    assert provenance("plan.workers") == "chosen"
    assert tomli.loads(Config().to_toml())["network"]["n_lip_e"] == NetworkSpec().n_lip_e


def test_record_trace(tmp_path):
    net = build_network(SMALL_SPEC)
    trial = run_trial(net, LgnDrive.zeros(10, 10), seed=3, record_spikes="LIP_I")
    out = record_trace(trial, tmp_path / "t")
    rows = (out / "rates.csv").read_text().splitlines()
    assert rows[0].startswith("t_ms,") and len(rows) == 201
    assert (out / "raster.csv").read_text().startswith("t_ms,neuron")
    again = record_trace(run_trial(net, LgnDrive.zeros(10, 10), seed=3, record_spikes="LIP_I"), tmp_path / "u")
    for name in ("rates.csv", "raster.csv", "trial.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_record_trace_requires_traces(tmp_path):
    net = build_network(SMALL_SPEC)
    trial = run_trial(net, LgnDrive.zeros(10, 10), seed=3, settings=TrialSettings(record_traces=False))
    with pytest.raises(StateError):
        record_trace(trial, tmp_path / "t")


@pytest.fixture(scope="module")
def default_net():
    return build_network(NetworkSpec())


def test_high_coherence_trace_ends_above_threshold(tmp_path, default_net):
    from ndm.retina import compute_lgn_drive
    from ndm.stimulus import RdkParams, generate_stimulus

    drive = compute_lgn_drive(generate_stimulus(RdkParams(coherence=0.8, direction="Left", seed=11)))
    trial = run_trial(default_net, drive, seed=4, coherence=0.8, direction="Left")
    out = record_trace(trial, tmp_path / "t", raster=False)
    with open(out / "rates.csv") as fh:
        rows = list(csv.DictReader(fh))
    winner = "LIP_A" if trial.choice.value == "Left" else "LIP_B"
    last = np.mean([float(r[winner]) for r in rows[-5:]])  # the 50 ms readout window
    assert not trial.no_decision_flag and last > 30.0


def test_blank_trace_sits_at_noise_floor(tmp_path, default_net):
    trial = run_trial(default_net, LgnDrive.zeros(), seed=4, coherence=0.0)
    out = record_trace(trial, tmp_path / "t", raster=False)
    with open(out / "rates.csv") as fh:
        rows = list(csv.DictReader(fh))
    for pop in ("V1_G1", "V1_G2", "MT_L", "MT_R"):
        assert np.mean([float(r[pop]) for r in rows]) < 1.0
