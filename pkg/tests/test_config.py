import pytest

from dnvs.config import (
    RunConfig,
    config_digest,
    echo_config,
    format_config,
    loss_weights,
    model_config,
    parse_config,
    parse_overrides,
)
from dnvs.model import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert parse_config(path) == RunConfig()


def test_no_file_gives_defaults():
    assert parse_config() == RunConfig()


def test_file_values_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a comment\nD = 32\nlr = 1e-3  # inline comment\n\nsteps = 7\n")
    cfg = parse_config(path)
    assert cfg.D == 32 and cfg.lr == 1e-3 and cfg.steps == 7
    assert cfg.L == RunConfig().L


def test_override_beats_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("D = 64\n")
    cfg = parse_config(path, {"D": "128"})
    assert cfg.D == 128


def test_unknown_key_named(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(path)
    with pytest.raises(ConfigError, match="nonsense"):
        parse_overrides({"nonsense": "2"})


def test_type_error_names_key_line_type(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# header\nD = fish\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    msg = str(exc.value)
    assert "D" in msg and ":2" in msg and "int" in msg


def test_malformed_line_reports_position(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ConfigError, match=":1"):
        parse_config(path)


def test_modulation_without_decouple_rejected():
    with pytest.raises(ConfigError):
        parse_overrides({"modulation": "true", "decouple": "false", "lam_P": "0"})


def test_lam_p_needs_decouple():
    with pytest.raises(ConfigError, match="lam_P"):
        parse_overrides({"decouple": "false", "modulation": "false"})


def test_lam_needs_tap():
    with pytest.raises(ConfigError, match="k_I"):
        parse_overrides({"k_I": "none"})
    with pytest.raises(ConfigError, match="k_P"):
        parse_overrides({"k_P": "none"})
    cfg = parse_overrides({"k_I": "none", "lam_I": "0"})
    assert cfg.k_I is None


def test_bool_and_none_parsing():
    cfg = parse_overrides({"easy": "false", "layer": "3",
                           "lam_I": "0", "k_I": "none"})
    assert cfg.easy is False and cfg.layer == 3 and cfg.k_I is None
    with pytest.raises(ConfigError, match="easy"):
        parse_overrides({"easy": "maybe"})


def test_range_validation():
    with pytest.raises(ConfigError, match="batch_size"):
        parse_overrides({"batch_size": "0"})
    with pytest.raises(ConfigError, match="holdout_frac"):
        parse_overrides({"holdout_frac": "1.5"})
    with pytest.raises(ConfigError, match="steps"):
        parse_overrides({"steps": "-1"})


def test_roundtrip_format_parse(tmp_path):
    cfg = parse_overrides({"D": "32", "lam_I": "0.25", "k_I": "1",
                           "easy": "false", "layer": "2"})
    path = tmp_path / "echo.cfg"
    path.write_text(format_config(cfg))
    assert parse_config(path) == cfg


def test_echo_config_writes_file(tmp_path):
    cfg = RunConfig()
    path = echo_config(cfg, tmp_path / "out")
    assert path.read_text() == format_config(cfg)


def test_digest_tracks_content():
    a = config_digest(RunConfig())
    b = config_digest(parse_overrides({"D": "32"}))
    assert a != b and len(a) == 12
    assert a == config_digest(RunConfig())


def test_model_and_loss_slices():
    cfg = parse_overrides({"D": "16", "n_heads": "2", "lam_vgg": "0.1"})
    m = model_config(cfg)
    assert m.D == 16 and m.n_heads == 2 and m.modulation_placement == cfg.placement
    w = loss_weights(cfg)
    assert w.lam_vgg == 0.1 and w.lam_I == 0.5


def test_missing_config_file():
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        parse_config("nope.cfg")
