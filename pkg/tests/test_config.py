import pytest

from structprune.config import RunConfig, dump_config, load_config, parse_config
from structprune.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.target == 2.0 and cfg.rounds == 8 and cfg.rho0 == 1e-4 and cfg.epsilon == 0.002
    assert cfg.round_target(1) == 2.0


def test_parse_types_and_comments():
    cfg = parse_config("""
        # a comment
        rounds = 3          # trailing comment
        lr = 5e-4
        purify = no
        scheme = filter
        round_targets = 2, 1.5
    """)
    assert cfg.rounds == 3 and cfg.lr == 5e-4 and cfg.purify is False and cfg.scheme == "filter"
    assert cfg.round_targets == [2.0, 1.5]
    assert cfg.round_target(2) == 1.5 and cfg.round_target(3) == cfg.target


@pytest.mark.parametrize("text, line", [
    ("rounds = 3\nbogus = 1", 2),
    ("rounds = 3\nrounds = 4", 2),
    ("just words", 1),
    ("rounds = three", 1),
    ("purify = maybe", 1),
])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}"):
        parse_config(text)


def test_semantic_validation():
    for text in ("objective = latency", "scheme = channel", "rounds = 0", "target = 1", "round_targets = 2, 0.5",
                 "test_fraction = 1.5"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_dump_roundtrip(tmp_path):
    cfg = RunConfig(rounds=5, round_targets=[2.0, 3.0], purify=False, output_dir="out dir")
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_non_utf8(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_bytes(b"rounds = \xff\n")
    with pytest.raises(ConfigError, match="UTF-8"):
        load_config(path)


def test_base_is_overridden_not_replaced():
    base = RunConfig(epochs=3)
    assert parse_config("rounds = 2", base).epochs == 3
