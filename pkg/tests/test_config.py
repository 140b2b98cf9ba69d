from __future__ import annotations

import pytest

from sindyloop.config import ConfigError, RunConfig, load_config


def test_defaults_match_loop_defaults():
    cfg = load_config()
    lc = cfg.loop_config()
    assert (lc.tau, lc.max_iterations, lc.plateau_window, lc.plateau_eps) == (0.1, 10, 3, 0.02)
    assert (lc.base_candidates, lc.plateau_candidates) == (4, 8)
    assert (lc.base_diversity, lc.plateau_diversity) == (0.3, 0.9)
    assert (lc.lambda_c, lc.lambda_p, lc.rejection_memory) == (0.1, 0.1, 20)
    assert lc.sim.timeout == 10.0
    assert cfg.grading.match_fraction == 0.5


def test_ini_file_then_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[loop]\nmax_iterations = 5\ntau = 0.05\n\n[sim]\nrtol = 1e-8\n")
    cfg = load_config(p, ["loop.max_iterations=7"])
    assert cfg.loop.max_iterations == 7
    assert cfg.loop.tau == 0.05
    assert cfg.loop_config().sim.rtol == 1e-8


@pytest.mark.parametrize(
    "override",
    ["loop.bogus=1", "nosection.key=1", "loop.tau=-1", "loop.tau=abc", "run.split=1.0", "tau=0.1", "loop.tau"],
)
def test_bad_overrides_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_unknown_ini_section(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[extras]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_unreadable_ini(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_is_plain_data():
    cfg = RunConfig()
    assert RunConfig.model_validate(cfg.model_dump()) == cfg
