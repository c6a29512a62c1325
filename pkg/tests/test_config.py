import pytest

from mctloc.config import ModelConfig, TrainConfig, format_kv, from_kv, load_configs, parse_kv
from mctloc.errors import ConfigError


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.num_classes, cfg.grid, cfg.embed_dim, cfg.heads, cfg.layers) == (5, 8, 64, 4, 4)
        assert cfg.patch_size == 8 and cfg.num_patches == 64 and cfg.num_tokens == 69 and cfg.head_dim == 16
        assert cfg.cct_depth == 4

    @pytest.mark.parametrize("kwargs", [
        dict(embed_dim=30, heads=4),
        dict(fuse_layers=5),
        dict(fuse_layers=0),
        dict(gwrp_lambda=1.01),
        dict(gamma=-1.0),
        dict(image_size=60),
        dict(pooling="avg"),
        dict(num_classes=1),
        dict(cam_kernel=2),
        dict(attn_scale="none"),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            ModelConfig().replace(layers=2)  # fuse_layers 3 > 2


class TestKeyValue:
    def test_parse_with_comments_and_blanks(self):
        text = "# header\n\nlayers = 3   # inline\npooling=gap\n"
        assert parse_kv(text) == {"layers": "3", "pooling": "gap"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_kv("layers=3\noops\n")

    def test_round_trip(self):
        cfg = ModelConfig(num_classes=3, pooling="gap", affinity_raw=True, gwrp_lambda=0.96)
        assert from_kv(ModelConfig, parse_kv(format_kv(cfg))) == cfg

    def test_bool_spellings(self):
        assert from_kv(TrainConfig, {"hflip": "yes"}).hflip is True
        assert from_kv(TrainConfig, {"hflip": "0"}).hflip is False
        with pytest.raises(ConfigError):
            from_kv(TrainConfig, {"hflip": "maybe"})

    def test_bad_number(self):
        with pytest.raises(ConfigError, match="layers"):
            from_kv(ModelConfig, {"layers": "four"})

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_kv(ModelConfig, {"depth": "4"})
        assert from_kv(ModelConfig, {"depth": "4"}, strict=False) == ModelConfig()


class TestLoadConfigs:
    def test_split_into_model_and_train(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("layers=3\nfuse_layers=2\nlr=0.01\nepochs=5\n")
        model, train = load_configs(path)
        assert model.layers == 3 and model.fuse_layers == 2
        assert train.lr == 0.01 and train.epochs == 5

    def test_none_gives_defaults(self):
        assert load_configs(None) == (ModelConfig(), TrainConfig())

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("layers=3\ncolour=red\n")
        with pytest.raises(ConfigError, match="colour"):
            load_configs(path)
