import pytest

from app.config import Settings, load_run_config, parse_config_text, resolve_seed
from app.exceptions import UsageError
from app.schemas import GraphVariant, RunConfig


def test_cli_import():
    """Test that the command line entry point can be imported."""
    from app.cli import build_parser, main

    assert main is not None
    assert build_parser().prog == "chg"


def test_config_import():
    """Test that config can be imported without errors."""
    from app.config import settings

    assert settings is not None


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("CHG_SEED", "42")
    monkeypatch.setenv("CHG_THREADS", "3")
    settings = Settings()
    assert settings.seed == 42
    assert settings.threads == 3
    assert resolve_seed() == 42


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("CHG_SEED", "42")
    assert resolve_seed(7, RunConfig(seed=3)) == 7
    assert resolve_seed(None, RunConfig(seed=3)) == 3


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nencoder.hidden=32\nablation.graph=atom\nseeds=0,1\n")
    cfg = load_run_config(path, {"encoder.hidden": 16})
    assert cfg.encoder.hidden == 16
    assert cfg.ablation.graph is GraphVariant.ATOM
    assert cfg.seeds == [0, 1]


def test_defaults():
    cfg = RunConfig()
    assert (cfg.encoder.layers, cfg.encoder.hidden, cfg.encoder.dropout) == (5, 300, 0.5)
    assert (cfg.weights.ab, cfg.weights.frag, cfg.weights.tau) == (0.2, 0.4, 0.1)
    assert cfg.fingerprint_bits == 2048


@pytest.mark.parametrize(
    "text",
    ["no equals sign", "=value"],
)
def test_malformed_config_lines(text):
    with pytest.raises(UsageError):
        parse_config_text(text)


def test_invalid_values(tmp_path):
    with pytest.raises(UsageError):
        load_run_config(overrides={"fingerprint_bits": 100})
    with pytest.raises(UsageError):
        load_run_config(tmp_path / "missing.cfg")
