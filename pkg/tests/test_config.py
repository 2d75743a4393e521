from dataclasses import fields, replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualimu.config import (
    FilterSection,
    MonteCarloSection,
    ScenarioConfig,
    ScenarioSection,
    dump_config,
    parse_config,
    parse_config_text,
)
from dualimu.errors import ConfigError
from dualimu.simworld import COLUMNS, ROWS, ProfileParams
from dualimu.state import NoiseParams


def test_minimal_config_fills_defaults():
    cfg = parse_config_text('[scenario]\ncell = "I-K"\nmode = "dp"\n')
    assert cfg.scenario.cell == "I-K" and cfg.scenario.mode == "dp"
    assert cfg.noise == NoiseParams()
    assert cfg.rates.imu == 200.0 and cfg.rates.meas == 20.0
    assert cfg.montecarlo.runs == 50
    assert parse_config_text("") == ScenarioConfig()


def test_negative_noise_names_key_and_line():
    text = '[scenario]\ncell = "I-K"\n\n[noise]\nsigma_a1 = 0.01\nsigma_g1 = -1e-3\n'
    with pytest.raises(ConfigError, match=r"noise\.sigma_g1 \(line 6\)"):
        parse_config_text(text)


@pytest.mark.parametrize(
    "text,pattern",
    [
        ('[scenario]\ncell = "I-K"\nfoo = 1\n', r"unknown key scenario\.foo \(line 3\)"),
        ("[bogus]\nx = 1\n", r"unknown section bogus \(line 1\)"),
        ("[montecarlo]\nruns = 0\n", r"montecarlo\.runs \(line 2\)"),
        ("[montecarlo]\nruns = 2.5\n", r"montecarlo\.runs.*integer"),
        ('[scenario]\ncell = "IX-K"\n', r"scenario\.cell"),
        ('[scenario]\nmode = "dq"\n', r"scenario\.mode"),
        ("[rates]\nimu = 200.0\nmeas = 30.0\n", r"rates\.meas"),
        ("[measurement]\nsigma_p = 0.0\n", r"measurement\.sigma_p"),
        ("[initial]\np = [1.0, 2.0]\n", r"initial\.p"),
        ("[initial]\nv = [1.0, 2.0, 3.0]\n", r"initial\.p"),
        ('[observability]\nbackend = "exact"\n', r"observability\.backend"),
        ("[scenario\ncell = 1\n", r"syntax error"),
        ('[filter]\nsecond_order = "yes"\n', r"filter\.second_order"),
        ("[profile]\nduration = -1.0\n", r"profile\.duration"),
    ],
)
def test_invalid_configs(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "absent.toml")


def test_file_parsing(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text('[scenario]\ncell = "V-K"\nseed = 4\n[filter]\ngate = 7.81\n', encoding="utf-8")
    cfg = parse_config(path)
    assert cfg.scenario.seed == 4 and cfg.filter.gate == 7.81


def test_overrides_validate():
    cfg = ScenarioConfig().with_overrides(scenario__cell="III-K", montecarlo__runs=None)
    assert cfg.scenario.cell == "III-K" and cfg.montecarlo.runs == 50
    with pytest.raises(ConfigError):
        ScenarioConfig().with_overrides(montecarlo__runs=0)


def test_p0_diag_order():
    assert FilterSection(p0_ba1=2.0).p0_diag() == (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 2.0, 1e-2)


pos = st.floats(min_value=1e-6, max_value=1e3, allow_nan=False)
nonneg = st.floats(min_value=0.0, max_value=1e3, allow_nan=False)


@st.composite
def configs(draw):
    cell = f"{draw(st.sampled_from(COLUMNS))}-{draw(st.sampled_from(ROWS))}"
    imu = draw(st.sampled_from([100.0, 200.0, 400.0]))
    cfg = ScenarioConfig(
        scenario=ScenarioSection(cell, draw(st.sampled_from(["dp", "dpdq"])), draw(st.integers(0, 2**32))),
        profile=ProfileParams(duration=draw(pos), rel_offset=tuple(draw(st.lists(nonneg, min_size=3, max_size=3)))),
        noise=NoiseParams(*draw(st.lists(nonneg, min_size=8, max_size=8))),
        filter=FilterSection(p0_theta=draw(nonneg), gate=draw(nonneg), second_order=draw(st.booleans())),
        montecarlo=MonteCarloSection(runs=draw(st.integers(1, 1000)), workers=draw(st.integers(1, 8))),
    )
    cfg = replace(cfg, rates=replace(cfg.rates, imu=imu, meas=imu / draw(st.sampled_from([1, 2, 5, 10]))))
    if draw(st.booleans()):
        cfg = replace(cfg, output=replace(cfg.output, out_dir=draw(st.text(min_size=1, max_size=20))))
    return cfg


@settings(max_examples=150, deadline=None)
@given(configs())
def test_dump_parse_round_trip(cfg):
    assert parse_config_text(dump_config(cfg)) == cfg


def test_dump_lists_every_key():
    text = dump_config(ScenarioConfig())
    for sec in fields(ScenarioConfig):
        assert f"[{sec.name}]" in text
