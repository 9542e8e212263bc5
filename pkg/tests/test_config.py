import pytest

from grain.config import TrainConfig, env_overrides, load_config_file, resolve_config
from grain.errors import ConfigError


def write_yaml(tmp_path, text, name="train.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestValidation:
    def test_defaults_valid(self):
        TrainConfig().validate()
        TrainConfig.tiny().validate()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"batch_size": 0},
            {"peak_lr": 0.0},
            {"peak_lr": -1e-4},
            {"caption_swap_prob": 1.5},
            {"caption_swap_prob": -0.1},
            {"warmup_steps": -1},
            {"grad_clip": 0.0},
            {"max_steps": 0},
        ],
    )
    def test_rejects_out_of_range(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_tiny_preset(self):
        cfg = TrainConfig.tiny()
        assert (cfg.epochs, cfg.batch_size, cfg.peak_lr) == (25, 8, 1e-3)


class TestPrecedence:
    def test_defaults_when_nothing_given(self):
        cfg = resolve_config(environ={})
        assert cfg == TrainConfig()

    def test_file_overrides_defaults(self, tmp_path):
        path = write_yaml(tmp_path, "epochs: 3\npeak_lr: 0.01\n")
        cfg = resolve_config(file_path=path, environ={})
        assert cfg.epochs == 3 and cfg.peak_lr == 0.01
        assert cfg.batch_size == TrainConfig().batch_size

    def test_env_overrides_file(self, tmp_path):
        path = write_yaml(tmp_path, "epochs: 3\n")
        cfg = resolve_config(file_path=path, environ={"GRAIN_EPOCHS": "7"})
        assert cfg.epochs == 7

    def test_cli_overrides_env_and_file(self, tmp_path):
        path = write_yaml(tmp_path, "epochs: 3\n")
        cfg = resolve_config(
            file_path=path,
            environ={"GRAIN_EPOCHS": "7"},
            cli_overrides={"epochs": 11},
        )
        assert cfg.epochs == 11

    def test_unrelated_env_vars_ignored(self):
        cfg = resolve_config(environ={"PATH": "/bin", "GRAINY": "x"})
        assert cfg == TrainConfig()


class TestUnknownKeys:
    def test_file_unknown_key(self, tmp_path):
        path = write_yaml(tmp_path, "learning_rate: 0.01\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            resolve_config(file_path=path, environ={})

    def test_env_unknown_key(self):
        with pytest.raises(ConfigError, match="GRAIN_LR"):
            env_overrides({"GRAIN_LR": "0.01"})

    def test_cli_unknown_key(self):
        with pytest.raises(ConfigError, match="momentum"):
            resolve_config(environ={}, cli_overrides={"momentum": 0.9})

    def test_non_mapping_file(self, tmp_path):
        path = write_yaml(tmp_path, "- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config_file(path)


class TestCoercion:
    def test_env_strings_parsed(self):
        cfg = resolve_config(
            environ={
                "GRAIN_EPOCHS": "4",
                "GRAIN_PEAK_LR": "2e-3",
                "GRAIN_USE_RD_LOSS": "false",
                "GRAIN_USE_GIOU": "no",
                "GRAIN_GRAD_CLIP": "none",
            }
        )
        assert cfg.epochs == 4
        assert cfg.peak_lr == 2e-3
        assert cfg.use_rd_loss is False
        assert cfg.use_giou is False
        assert cfg.grad_clip is None

    @pytest.mark.parametrize("text,want", [("1", True), ("true", True), ("ON", True), ("0", False), ("off", False)])
    def test_bool_spellings(self, text, want):
        cfg = resolve_config(environ={"GRAIN_USE_BOX_LOSS": text})
        assert cfg.use_box_loss is want

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigError, match="boolean"):
            resolve_config(environ={"GRAIN_USE_BOX_LOSS": "maybe"})

    def test_bad_int_rejected(self):
        with pytest.raises(ConfigError, match="epochs"):
            resolve_config(environ={"GRAIN_EPOCHS": "many"})

    def test_float_field_accepts_int_literal(self, tmp_path):
        path = write_yaml(tmp_path, "peak_lr: 1\n")
        cfg = resolve_config(file_path=path, environ={})
        assert cfg.peak_lr == 1.0 and isinstance(cfg.peak_lr, float)

    def test_int_field_rejects_float(self, tmp_path):
        path = write_yaml(tmp_path, "epochs: 2.5\n")
        with pytest.raises(ConfigError, match="epochs"):
            resolve_config(file_path=path, environ={})

    def test_bool_field_rejects_int(self, tmp_path):
        path = write_yaml(tmp_path, "use_giou: 1\n")
        with pytest.raises(ConfigError, match="use_giou"):
            resolve_config(file_path=path, environ={})

    def test_nullable_in_yaml(self, tmp_path):
        path = write_yaml(tmp_path, "grad_clip: null\nwarmup_steps: 5\n")
        cfg = resolve_config(file_path=path, environ={})
        assert cfg.grad_clip is None and cfg.warmup_steps == 5

    def test_null_rejected_for_required_field(self, tmp_path):
        path = write_yaml(tmp_path, "epochs: null\n")
        with pytest.raises(ConfigError, match="epochs"):
            resolve_config(file_path=path, environ={})

    def test_resolved_config_validated(self):
        with pytest.raises(ConfigError):
            resolve_config(environ={"GRAIN_CAPTION_SWAP_PROB": "2.0"})

    def test_base_config_respected(self):
        cfg = resolve_config(environ={}, base=TrainConfig.tiny())
        assert cfg == TrainConfig.tiny()
