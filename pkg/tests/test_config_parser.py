import argparse
import json
import pytest
from hybridode.utils.config_parser import DEFAULT_CONFIG, ConfigParser
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError


def test_defaults_without_a_file():
    config = ConfigParser().get_config()
    assert config == DEFAULT_CONFIG
    assert config is not DEFAULT_CONFIG


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        ConfigParser(str(tmp_path / "missing.yaml"))


@pytest.mark.parametrize("name,content", [
    ("config.yaml", "run:\n  seed: 7\ntraining:\n  pk:\n    hybrid:\n      learning_rate: 0.0005\n"),
    ("config.toml", "[run]\nseed = 7\n[training.pk.hybrid]\nlearning_rate = 0.0005\n"),
    ("config.json", json.dumps({"run": {"seed": 7}, "training": {"pk": {"hybrid": {"learning_rate": 0.0005}}}})),
])
def test_file_formats_merge_over_defaults(tmp_path, name, content):
    path = tmp_path / name
    path.write_text(content)
    config = ConfigParser(str(path)).get_config()
    assert config["run"]["seed"] == 7
    assert config["training"]["pk"]["hybrid"]["learning_rate"] == 0.0005
    assert config["training"]["pk"]["hybrid"]["batch_size"] == DEFAULT_CONFIG["training"]["pk"]["hybrid"]["batch_size"]
    assert config["run"]["case"] == DEFAULT_CONFIG["run"]["case"]


def test_empty_and_malformed_files(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert ConfigParser.load_file(str(empty)) == {}
    listing = tmp_path / "list.yaml"
    listing.write_text("- a\n- b\n")
    with pytest.raises(ConfigurationError):
        ConfigParser.load_file(str(listing))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigurationError):
        ConfigParser.load_file(str(broken))


def test_overrides_parse_yaml_values(tmp_path):
    config = ConfigParser().get_config(["run.seed=11", "eval.models=[hybrid]", "pk.require_target=true", "new.section.key=x"])
    assert config["run"]["seed"] == 11
    assert config["eval"]["models"] == ["hybrid"]
    assert config["pk"]["require_target"] is True
    assert config["new"]["section"]["key"] == "x"


@pytest.mark.parametrize("assignment", ["run.seed", "=3", "run.seed=[unclosed"])
def test_malformed_overrides(assignment):
    with pytest.raises(ConfigurationError):
        ConfigParser.apply_override({}, assignment)


def test_deep_merge_does_not_mutate():
    base = {"a": {"b": 1, "c": 2}}
    update = {"a": {"b": 3}}
    merged = ConfigParser.deep_merge(base, update)
    assert merged == {"a": {"b": 3, "c": 2}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_cli_flags_take_precedence():
    config = ConfigParser().get_config(["run.seed=11"])
    args = argparse.Namespace(seed=5, out=None, threads=3, case="pk", force=True, source="cohort.csv")
    ConfigParser.apply_cli_flags(config, args)
    assert config["run"]["seed"] == 5
    assert config["run"]["threads"] == 3
    assert config["run"]["case"] == "pk"
    assert config["run"]["force"] is True
    assert config["run"]["out"] == DEFAULT_CONFIG["run"]["out"]
    assert config["data"]["source"] == "csv"
    assert config["pk"]["cohort"]["csv_path"] == "cohort.csv"


@pytest.mark.parametrize("key,value", [("run.case", "tank"), ("run.model", "neural"), ("data.format", "parquet"), ("run.threads", 0)])
def test_validate(key, value):
    config = ConfigParser().get_config()
    ConfigParser.validate(config)
    ConfigParser.apply_override(config, f"{key}={value}")
    with pytest.raises(ConfigurationError):
        ConfigParser.validate(config)
