import pytest

from tvmerge.config import RunConfig, load_config, merge_layers, parse_config
from tvmerge.errors import ParseError, UnknownKey


def test_empty_file_gives_no_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("")
    assert load_config(path) == {}
    assert merge_layers({"lr": 0.001, "seed": 0}, {}, {}) == {"lr": 0.001, "seed": 0}


def test_flags_beat_file_beat_defaults():
    assert merge_layers({"lr": 0.1, "seed": 0}, {"lr": 0.01}, {"lr": 0.001})["lr"] == 0.001
    assert merge_layers({"lr": 0.1, "seed": 0}, {"lr": 0.01}, {})["lr"] == 0.01


def test_parse_comments_dashes_and_spaces():
    text = "# header\n\nbatch-size = 8\nlr=0.01\n"
    assert parse_config(text) == {"batch_size": "8", "lr": "0.01"}


def test_duplicate_key_names_line():
    with pytest.raises(ParseError) as err:
        parse_config("lr=1\nseed=2\nlr=3\n")
    assert err.value.line == 3


def test_missing_equals_and_unknown_key():
    with pytest.raises(ParseError):
        parse_config("lr 0.1")
    with pytest.raises(UnknownKey):
        parse_config("nope=1", allowed={"lr"})


def test_run_config_dump_parses_back(tmp_path):
    cfg = RunConfig("merge", {"lr": 0.001, "tasks": ["a", "b"], "data": None, "seed": 0})
    path = cfg.write(tmp_path / "config.resolved")
    assert load_config(path) == {"data": "", "lr": "0.001", "seed": "0", "tasks": "a,b"}
