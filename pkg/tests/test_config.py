import pytest

from cdnet.config import TrainConfig, apply_overrides, dump_config, load_config, parse_config_text
from cdnet.data import ConfigError


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.d, cfg.k, cfg.n, cfg.H, cfg.N_f) == (32, 16, 5, 2, 5)
        assert cfg.tokens == 22

    @pytest.mark.parametrize("key,value", [("d", 0), ("k", 0), ("n", 0), ("H", -1), ("heads", 3), ("lr", -1.0),
                                           ("batch_size", 0), ("epochs", 0), ("precision", "float16"),
                                           ("variant", "nope"), ("L_max", 0)])
    def test_invalid_values_name_the_key(self, key, value):
        with pytest.raises(ConfigError, match=key):
            TrainConfig(**{key: value}).validate()

    def test_dict_round_trip(self):
        cfg = TrainConfig(k=3, head_hidden=(7, 5), variant="rgid")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestConfigFile:
    def test_parse_comments_and_blank_lines(self):
        text = "# header\nk = 4\n\nlr=0.01  # inline\nhead_hidden = 16 8\n"
        assert parse_config_text(text) == {"k": "4", "lr": "0.01", "head_hidden": "16 8"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("k = 4\nnonsense\n")

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            apply_overrides(TrainConfig(), {"learning_rate": "0.1"})

    def test_bad_value_is_named(self):
        with pytest.raises(ConfigError, match="epochs"):
            apply_overrides(TrainConfig(), {"epochs": "many"})

    def test_every_field_round_trips_through_text(self, tmp_path):
        cfg = TrainConfig(d=12, k=3, n=2, H=1, heads=3, L_max=20, lr=0.005, head_hidden=(9,), variant="rcore",
                          weight_decay=1e-4, lr_decay=0.9, precision="float64", seed=11)
        path = tmp_path / "c.txt"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg
