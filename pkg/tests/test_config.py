from dataclasses import replace

import pytest

from isc.config import EvalConfig, config_from_mapping, dump_config, load_config, parse_config_text
from isc.errors import ConfigError


def test_defaults():
    cfg = load_config(None)
    assert cfg == EvalConfig()
    assert (cfg.descriptor.n_sectors, cfg.descriptor.n_rings, cfg.descriptor.l_max) == (20, 60, 50.0)
    assert (cfg.retrieval.eps_geometry, cfg.retrieval.eps_intensity) == (0.9, 0.92)
    assert (cfg.verify.n_temporal, cfg.verify.xi) == (5, 1.8)
    assert cfg.loop_dist == 4.0 and cfg.exclusion_window == 50


def test_flat_file(tmp_path):
    (tmp_path / "curve.txt").write_text("0 1\n50 2\n")
    p = tmp_path / "isc.cfg"
    p.write_text(
        "# table values\n"
        "l_max = 40   # shared\n"
        "n_sectors=30\n"
        "eps_geometry = 0.85\n"
        "xi = 1.7\n"
        "ground_mode = z_threshold\n"
        "calibration = curve.txt\n"
        "loop_dist = 5\n"
        "\n"
    )
    cfg = load_config(p)
    assert cfg.ingest.l_max == cfg.descriptor.l_max == 40.0
    assert cfg.descriptor.n_sectors == 30
    assert cfg.retrieval.eps_geometry == 0.85 and cfg.verify.xi == 1.7
    assert cfg.ingest.ground_mode == "z_threshold"
    assert cfg.ingest.calibration(25) == 1.5
    assert cfg.loop_dist == 5.0


@pytest.mark.parametrize(
    "text",
    ["bogus = 1\n", "n_rings\n", "n_rings = many\n", "eps_intensity = 2\n", "loop_dist = 0\n", "= 3\n"],
)
def test_bad_config(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_dump_round_trip():
    cfg = config_from_mapping({"n_rings": "40", "icp_max_rms": "0.3", "loop_dist": "6"})
    assert config_from_mapping(parse_config_text(dump_config(cfg))) == cfg


def test_mismatched_l_max_rejected():
    with pytest.raises(ValueError):
        replace(EvalConfig(), ingest=replace(EvalConfig().ingest, l_max=30.0))
