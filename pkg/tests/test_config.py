import pytest
import yaml

from amlab.config import DEFAULT_TAU_GRID, ExperimentConfig, config_from_dict, dump_config, load_config
from amlab.errors import ConfigurationError


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert cfg.sweep.tau == DEFAULT_TAU_GRID


def test_hash_ignores_key_order_and_output_dir():
    data = {"rng_seed": 3, "task": {"num_classes": 4, "input_dim": 8}, "defense": {"kind": "pp", "alpha_pp": 0.2}}
    shuffled = {"defense": {"alpha_pp": 0.2, "kind": "pp"}, "task": {"input_dim": 8, "num_classes": 4}, "rng_seed": 3}
    a, b = config_from_dict(data), config_from_dict(shuffled)
    assert a.config_hash() == b.config_hash()
    assert config_from_dict({**data, "out_dir": "elsewhere"}).config_hash() == a.config_hash()
    assert config_from_dict({**data, "rng_seed": 4}).config_hash() != a.config_hash()
    assert a.run_dir().name == a.config_hash()[:12]


@pytest.mark.parametrize(
    "data, key",
    [
        ({"colour": 1}, "colour"),
        ({"task": {"classes": 3}}, "task.classes"),
        ({"sweep": {"tau": "high"}}, "sweep.tau"),
        ({"defender": {"epochs": 1.5}}, "defender.epochs"),
        ({"task": {"outliers": "none"}}, "outlier"),
        ({"defense": {"kind": "am", "tau": 2.0}}, "tau"),
    ],
)
def test_bad_configs_name_the_key(data, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        config_from_dict(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: [unclosed\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    listy = tmp_path / "list.yaml"
    listy.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ConfigurationError):
        load_config(listy)


def test_outliers_may_be_dropped_when_oe_is_off():
    cfg = config_from_dict({"task": {"outliers": "none"}, "defender": {"oe_weight": 0.0}})
    assert cfg.task.outliers == "none"


def test_with_seed_changes_only_the_seed():
    cfg = ExperimentConfig()
    other = cfg.with_seed(5)
    assert other.rng_seed == 5
    assert {k: v for k, v in other.to_dict().items() if k != "rng_seed"} == {
        k: v for k, v in cfg.to_dict().items() if k != "rng_seed"
    }
