import math

import pytest

from dynafs.config import RunConfig
from dynafs.errors import ConfigError


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig(seed=4, c_max=2.5, task="classification", no_gate=True)
    cfg.dump(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml") == cfg


def test_infinite_c_max_round_trip(tmp_path):
    RunConfig().dump(tmp_path / "c.yaml")
    assert "c_max: inf" in (tmp_path / "c.yaml").read_text()
    assert math.isinf(RunConfig.load(tmp_path / "c.yaml").c_max)


def test_overrides_and_coercion(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: '7'\nno_gate: 'yes'\nc_max: 3\n")
    cfg = RunConfig.load(tmp_path / "c.yaml", seed=9)
    assert cfg.seed == 9 and cfg.no_gate is True and cfg.c_max == 3.0


@pytest.mark.parametrize("text", ["bogus_key: 1\n", "task: ranking\n", "c_max: 0\n", "seed: 1.5\n",
                                  "no_gate: maybe\n", "hidden: [1, 2]\n", "- a\n", "seed: [\n"])
def test_invalid_configs(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "c.yaml")


def test_csv_source_requires_paths():
    with pytest.raises(ConfigError):
        RunConfig(data_source="csv").validate()


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    assert RunConfig.load(tmp_path / "c.yaml") == RunConfig()
