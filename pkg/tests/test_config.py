import json

import pytest

from data.hyperparameters import get_hyperparameter_table, get_search_space, outside_search_space, preset_overrides
from utils.config import ExperimentConfig, dump_config, load_config, parse_override
from utils.errors import ConfigError


def test_defaults_validate_and_mirror_the_tuned_table():
    config = ExperimentConfig().validate()
    assert config.ssl.lambda_e == 0.1
    assert config.selection.alpha_gate == 10.0
    assert config.masking.beta == 0.5
    assert config.run.mode == "gated_dual_pass"


def test_set_coerces_and_rejects():
    config = ExperimentConfig()
    config.set("ssl.lr", 1)
    assert config.ssl.lr == 1.0 and isinstance(config.ssl.lr, float)
    config.set("intervention.layers", 1)
    assert config.intervention.layers == (1,)
    with pytest.raises(ConfigError):
        config.set("ssl.epochs", "many")
    with pytest.raises(ConfigError):
        config.set("ssl.nonsense", 1)
    with pytest.raises(ConfigError):
        config.set("nosection.field", 1)


def test_parse_override_reads_toml_values():
    assert parse_override("ssl.lr=3e-4") == ("ssl.lr", 3e-4)
    assert parse_override("intervention.layers=[1, 2]") == ("intervention.layers", [1, 2])
    assert parse_override("run.out_dir=runs/cora") == ("run.out_dir", "runs/cora")
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_none_clears_the_entropy_threshold():
    config = load_config(overrides=["selection.entropy_threshold=0.4", "selection.entropy_threshold=none"])
    assert config.selection.entropy_threshold is None


def test_precedence_is_preset_then_file_then_overrides(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text('[ssl]\nlr = 0.005\nepochs = 7\n\n[run]\nseeds = [3, 4]\n')
    config = load_config(path=path, preset="cora", overrides=["ssl.epochs=9"])
    assert config.intervention.rank == 8
    assert config.masking.rho == 0.7
    assert config.ssl.lr == 0.005
    assert config.ssl.epochs == 9
    assert config.run.seeds == (3, 4)


def test_missing_or_malformed_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(path=tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("ssl = [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path=bad)


@pytest.mark.parametrize("override", [
    "intervention.layers=[3]",
    "intervention.rank=100",
    "masking.rho=1.5",
    "ssl.gamma=0.5",
    "data.p_out=0.5",
    "selection.mode=greedy",
    "run.seeds=[]",
])
def test_out_of_range_values_fail_validation(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_presets_raise_depth_to_cover_intervened_layers():
    assert load_config(preset="citeseer").backbone.depth == 4
    assert load_config(preset="pubmed").backbone.depth == 3
    with pytest.raises(ConfigError):
        preset_overrides("imagenet")


def test_hyperparameter_table_and_search_space():
    table = get_hyperparameter_table()
    assert list(table["Dataset"]) == ["cora", "pubmed", "citeseer", "wikics", "arxiv"]
    assert (table["Entropy Weight"] == 0.1).all()
    assert get_search_space()["Rank"] == [2, 4, 8, 16, 32]


def test_search_space_flags_untuned_values():
    assert outside_search_space("intervention.rank", [4, 6, 32]) == ("Rank", [6])
    assert outside_search_space("masking.rho", [0.2, 0.9]) == ("Mask Rate", [0.9])
    assert outside_search_space("ssl.lambda_e", [0.0, 0.1]) == ("Entropy Weight", [0.0, 0.1])
    assert outside_search_space("data.n", [10, 10000]) == (None, [])


def test_new_fields_validate():
    config = ExperimentConfig().validate()
    assert config.ssl.diversity == 1.0 and config.data.homophily == 0.8
    config.set("data.homophily", "none")
    assert config.validate().data.homophily is None
    config.set("data.homophily", 1.5)
    with pytest.raises(ConfigError):
        config.validate()
    config = ExperimentConfig()
    config.set("ssl.diversity", -0.1)
    with pytest.raises(ConfigError):
        config.validate()


def test_dump_config_writes_nested_json(tmp_path):
    path = dump_config(load_config(preset="wikics"), tmp_path / "config.json")
    document = json.loads(path.read_text())
    assert document["intervention"]["layers"] == [2]
    assert document["intervention"]["rank"] == 4
