import pytest
from hypothesis import given
from hypothesis import strategies as st

from idus import config as cfgmod
from idus.errors import ConfigurationError


def test_presets():
    full = cfgmod.load(preset_name="full")
    assert (full.synth.side, full.trainer.n_superpixels, full.network.n_classes) == (512, 100, 7)
    assert (full.schedule.U_E, full.schedule.U_S, full.schedule.n_iterations, full.schedule.batch) == (200, 200, 5, 15)
    desk = cfgmod.load(preset_name="desk")
    assert (desk.synth.side, desk.synth.n_images, desk.trainer.n_superpixels, desk.trainer.n_clusters) == (64, 20, 32, 4)
    assert (desk.schedule.U_E, desk.schedule.n_iterations, desk.schedule.batch) == (30, 3, 8)
    assert desk.init.hist_window == 5
    with pytest.raises(ConfigurationError):
        cfgmod.preset("huge")


def test_layering(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("preset: desk\nschedule:\n  U_E: 7\n  U_S: 9\nseed: 4\n")
    cfg = cfgmod.load(f, overrides=["schedule.U_E=11", "network.encoder_layers=[1,1,1,1]"], seed=2, out="x")
    assert cfg.preset == "desk" and cfg.schedule.U_E == 11 and cfg.schedule.U_S == 9
    assert cfg.seed == 2 and cfg.synth.seed == cfg.trainer.seed == cfg.init.seed == 2
    assert cfg.out == "x" and cfg.network.encoder_layers == (1, 1, 1, 1)


def test_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        cfgmod.load(overrides=["schedule.bogus=1"])
    with pytest.raises(ConfigurationError):
        cfgmod.load(overrides=["noequals"])
    with pytest.raises(ConfigurationError):
        cfgmod.load(tmp_path / "missing.yaml")
    with pytest.raises(ConfigurationError):
        cfgmod.load(overrides=["finetune.encoder_unfreeze_epoch=500"])


def test_dump_roundtrip(tmp_path):
    cfg = cfgmod.load(preset_name="desk", seed=5)
    cfgmod.dump(cfg, tmp_path / "c.yaml")
    back = cfgmod.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()


def test_hash_tracks_changes():
    a = cfgmod.load(preset_name="desk")
    assert a.hash() == cfgmod.load(preset_name="desk").hash()
    assert a.hash() != cfgmod.load(preset_name="desk", seed=1).hash()


@given(st.one_of(st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_parse_value_numbers(v):
    assert cfgmod.parse_value(repr(v)) == v


def test_parse_value_scientific():
    assert cfgmod.parse_value("1e-4") == pytest.approx(1e-4)
    assert cfgmod.parse_value("db4") == "db4"
    assert cfgmod.parse_value("true") is True
