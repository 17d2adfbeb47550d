import json

import pytest
import yaml

from config_manager import ConfigManager, ConfigValidationError
from rectified_flow import LossKind, SamplerMethod, TargetKind

from conftest import small_config_dict, write_config


class TestLoading:
    def test_missing_file_writes_defaults(self, tmp_path):
        path = tmp_path / "fresh.yml"
        manager = ConfigManager(str(path))
        assert path.exists()
        assert manager.get_model_config().num_tokens == 128
        assert manager.get_target_kind() == TargetKind.X
        assert manager.get_loss_kind() == LossKind.V_LOSS

    def test_partial_file_is_merged_with_defaults(self, tmp_path):
        path = tmp_path / "partial.yml"
        path.write_text("sampler:\n  steps: 7\n", encoding="utf-8")
        manager = ConfigManager(str(path))
        sampler = manager.get_sampler_config()
        assert sampler.steps == 7
        assert sampler.method == SamplerMethod.HEUN
        assert manager.get_training_config().batch_size == 16

    def test_json_is_accepted(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(small_config_dict(tmp_path)), encoding="utf-8")
        assert ConfigManager(str(path)).get_model_config().height == 4

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yml"
        path.write_text("model: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigValidationError):
            ConfigManager(str(path))

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigValidationError):
            ConfigManager(str(path))


class TestValidation:
    @pytest.mark.parametrize("sections, fragment", [
        ({'diffusion': {'target': 'score'}}, "diffusion.target"),
        ({'sampler': {'method': 'rk4'}}, "sampler.method"),
        ({'sampler': {'eps_cut': 0.0}}, "sampler.eps_cut"),
        ({'model': {'patch_size': 3}}, "patch_size"),
        ({'model': {'height': 8}}, "数据网格"),
        ({'data': {'grid': [8, 8]}}, "data.grid"),
        ({'training': {'stub_model': 'oracle'}}, "stub_model"),
        ({'evaluation': {'probe': {'row': 99, 'col': None, 'channel': 1}}}, "probe.row"),
        ({'experiments': {'resolution_pair': [
            {'height': 4, 'width': 4, 'patch_size': 2, 'downsample': 4},
            {'height': 16, 'width': 16, 'patch_size': 4, 'downsample': 1}]}}, "token"),
        ({'data': {'simulator': {'dt_solver': 5.0}}}, "稳定性"),
        ({'logging': {'training_progress': 'yes'}}, "logging.training_progress"),
        ({'logging': {'muted_keywords': ['']}}, "logging.muted_keywords"),
    ])
    def test_invalid_values(self, tmp_path, sections, fragment):
        with pytest.raises(ConfigValidationError, match=fragment):
            ConfigManager(write_config(tmp_path, **sections))

    def test_all_errors_reported_together(self, tmp_path):
        path = write_config(tmp_path, sampler={'method': 'rk4', 'steps': 0})
        with pytest.raises(ConfigValidationError) as info:
            ConfigManager(path)
        assert "sampler.method" in str(info.value)
        assert "sampler.steps" in str(info.value)


class TestOverrides:
    def test_overrides_apply(self, config_manager):
        config_manager.apply_overrides(seed=9, sampler='euler', ode_steps=5, target='eps', loss='x', updates=0)
        cfg = config_manager.get_experiment_config()
        assert cfg.training.seed == 9
        assert cfg.sampler.method == SamplerMethod.EULER
        assert cfg.sampler.steps == 5
        assert cfg.target == TargetKind.EPS
        assert cfg.loss == LossKind.X_LOSS
        assert cfg.training.updates == 0

    def test_logging_overrides(self, config_manager):
        assert config_manager.is_training_progress_enabled()
        config_manager.apply_overrides(training_progress=False, muted_keywords=["grad_norm"])
        config_manager.apply_overrides(muted_keywords=["nan"])
        assert not config_manager.is_training_progress_enabled()
        assert config_manager.get_muted_keywords() == ["grad_norm", "nan"]

    def test_grid_override_rescales_model(self, config_manager):
        config_manager.apply_overrides(grid=[32, 16])
        model = config_manager.get_model_config()
        assert config_manager.get_data_grid() == (32, 16)
        assert (model.height, model.width) == (8, 4)

    def test_invalid_override_rolls_back(self, config_manager):
        before = config_manager.to_dict()
        with pytest.raises(ConfigValidationError):
            config_manager.apply_overrides(ode_steps=0, seed=5)
        assert config_manager.to_dict() == before

    def test_none_leaves_config_alone(self, config_manager):
        before = config_manager.to_dict()
        config_manager.apply_overrides()
        assert config_manager.to_dict() == before


class TestHash:
    def test_hash_ignores_key_order(self, tmp_path):
        config = small_config_dict(tmp_path)
        a = tmp_path / "a.yml"
        b = tmp_path / "b.yml"
        a.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
        b.write_text(yaml.safe_dump(dict(reversed(list(config.items()))), sort_keys=False), encoding="utf-8")
        assert ConfigManager(str(a)).get_config_hash() == ConfigManager(str(b)).get_config_hash()

    def test_hash_changes_with_content(self, config_manager):
        before = config_manager.get_config_hash()
        config_manager.apply_overrides(seed=123)
        assert config_manager.get_config_hash() != before
        assert len(before) == 64


class TestResolvedConfig:
    def test_experiment_config(self, config_manager):
        cfg = config_manager.get_experiment_config()
        assert cfg.downsample == 4
        assert cfg.train_thetas == [0.1, 0.3]
        assert [spec.num_tokens for spec in cfg.resolution_pair] == [4, 4]
        assert cfg.bottleneck_dims == [2, 4]
        assert cfg.evaluation.probe_for(4, 4).channel == 1
        assert cfg.config_hash == config_manager.get_config_hash()

    def test_status_text(self, config_manager):
        status = config_manager.get_config_status()
        assert "token 数 N=4" in status
        assert "heun" in status
