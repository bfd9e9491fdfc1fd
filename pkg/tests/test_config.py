import json

import pytest

from pairlink.config import ConfigError, as_dict, load_config, preset_names, schema_text
from pairlink.rng import derive_seed


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_bundled_presets_load():
    assert {"paper", "drift600", "single_nanowire"} <= set(preset_names())
    cfg = load_config("paper")
    assert cfg.seed == 20240611
    assert cfg.bob.link.delay_ps == 151_225_000
    assert cfg.bob.detector.jitter_sigma_ps == 96.7
    assert cfg.alice.detector.resolution_ps == 156
    assert cfg.chsh.settings_deg == ((0.0, 22.5), (0.0, 67.5), (45.0, 22.5), (45.0, 67.5))
    assert load_config("drift600").duration_s == 600
    assert load_config("single_nanowire").source_config().single_nanowire


def test_clock_seeds_derive_from_run_seed():
    cfg = load_config("paper", seed=7)
    assert cfg.bob.clock.rng_seed == derive_seed(7, "clock", "bob")
    assert cfg.alice.clock.rng_seed != cfg.bob.clock.rng_seed


@pytest.mark.parametrize("body, field", [
    ("[run]\nseed = 1\n[source]\npump_pwr = 1\n", "source.pump_pwr"),
    ("[run]\nseed = 1\n[bob.detector]\nefficiency = lots\n", "bob.detector.efficiency"),
    ("[run]\nseed = 1\n[bob.detector]\nefficiency = 1.5\n", "bob.detector"),
    ("[run]\nseed = 1\n[analysis]\nwindow_ps = 0\n", "analysis.window_ps"),
    ("[run]\nseed = 1\n[analysis]\ncorrection_mode = sideways\n", "analysis.correction_mode"),
    ("[run]\nseed = 1\n[chsh]\nsettings_deg = 0:22.5\n", "chsh.settings_deg"),
    ("[run]\nseed = 1\n[carol.link]\nlength_km = 1\n", "carol.link"),
    ("[run]\nduration_s = 1\n", "run.seed"),
])
def test_errors_name_the_field(tmp_path, body, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(_write(tmp_path, "c.cfg", body))


def test_syntax_errors_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "bad.cfg", "no section header\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "bad.json", "{not json"))
    with pytest.raises(ConfigError):
        load_config("no-such-preset")


def test_json_equivalent_to_ini(tmp_path):
    ini = _write(tmp_path, "a.cfg", "[run]\nseed = 5\nduration_s = 2\n[bob.link]\nlength_km = 3\n")
    js = _write(tmp_path, "a.json", json.dumps({"run": {"seed": 5, "duration_s": 2},
                                                "bob": {"link": {"length_km": 3}}}))
    a, b = load_config(ini), load_config(js)
    assert as_dict(a) == as_dict(b)
    assert a.bob.link.length_km == 3.0


def test_include_overrides_base(tmp_path):
    p = _write(tmp_path, "child.cfg", "[run]\ninclude = paper\nduration_s = 3\n[source]\nvisibility = 0.9\n")
    cfg = load_config(p)
    assert cfg.duration_s == 3 and cfg.source["visibility"] == 0.9
    assert cfg.seed == load_config("paper").seed


def test_hash_is_stable_and_sensitive():
    a = load_config("paper")
    assert a.config_hash() == load_config("paper").config_hash()
    assert len(a.config_hash()) == 16
    assert a.with_overrides({"run.seed": 1}).config_hash() != a.config_hash()
    assert load_config("paper", seed=1).config_hash() == a.with_overrides({"run.seed": 1}).config_hash()


def test_overrides_validate():
    cfg = load_config("paper")
    assert cfg.with_overrides({"analysis.window_ps": 500}).analysis.window_ps == 500
    with pytest.raises(ConfigError):
        cfg.with_overrides({"analysis.window": 500})


def test_source_config_selects_pair():
    cfg = load_config("paper")
    src = cfg.source_config()
    assert [p.index for p in src.pairs] == [5]
    assert len(cfg.source_config(all_pairs=True).pairs) == 22
    assert cfg.source_config(pump_power_mw=2.0).pump_power_mw == 2.0


def test_schema_text_lists_every_section():
    text = schema_text()
    for sec in ("[run]", "[source]", "[analysis]", "[chsh]", "[sweep]"):
        assert sec in text
    assert "seed" in text and "window_ps" in text
