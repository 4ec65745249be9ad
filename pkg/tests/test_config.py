import pytest

from dpfedemb.config import ConfigError, ExperimentConfig, config_from_dict, load_config


def test_defaults_are_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.federated.users_per_vc == 32 and cfg.federated.vcs_per_round == 64
    assert cfg.federated.examples_cap == 2048 and cfg.client.batch_size == 32
    assert cfg.client.head_lr_scale == 100 and cfg.users_per_round == 2048


def test_users_per_round_override():
    cfg = config_from_dict({"federated": {"users_per_round": 7}, "data": {"num_users": 10}})
    assert cfg.users_per_round == 7


@pytest.mark.parametrize("raw,where", [
    ({"mode": "fedsgd"}, "mode"),
    ({"data": {"num_users": 0}}, "data.num_users"),
    ({"dp": {"noise_multiplier": 1.0, "clip_norm": float("inf")}}, "dp.clip_norm"),
    ({"dp": {"delta": 1.0}}, "dp.delta"),
    ({"client": {"momentum": 1.0}}, "client.momentum"),
    ({"eval": {"far": 2.0}}, "eval.far"),
    ({"federated": {"vcs_per_round": 64}, "data": {"num_users": 100}}, "federated.users_per_round"),
    ({"data": {"source": "csv"}}, "data.path"),
])
def test_validation_names_the_field(raw, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        config_from_dict(raw)


def test_type_and_key_errors():
    with pytest.raises(ConfigError, match="client.lr: expected a number"):
        config_from_dict({"client": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="federated.rounds: expected an integer"):
        config_from_dict({"federated": {"rounds": 1.5}})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"client": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError, match="expected a table"):
        config_from_dict({"dp": 3})
    assert config_from_dict({"client": {"lr": 1}}).client.lr == 1.0


def test_digest_ignores_threads_and_output_dir():
    a = config_from_dict({"run": {"threads": 1, "output_dir": "a"}})
    b = config_from_dict({"run": {"threads": 8, "output_dir": "b"}})
    c = config_from_dict({"seed": 1})
    assert a.digest() == b.digest() != c.digest()


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 4\nmode = "fedavg"\n[dp]\nnoise_multiplier = 0.5\n')
    cfg = load_config(p)
    assert (cfg.seed, cfg.mode, cfg.dp.noise_multiplier) == (4, "fedavg", 0.5)
    p.write_text("seed = = 4")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
