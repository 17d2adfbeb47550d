import os
import sys
import copy
import logging

import numpy as np
import pytest
import yaml

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tensor_core import Tensor
from field_data import ReactionDiffusionConfig
from ajit_model import AjitModel, ModelConfig
from config_manager import ConfigManager
from experiment_runner import generate_dataset


SMALL_SIMULATOR = {
    'dt_solver': 0.78125,
    'substeps_per_frame': 2,
    'warmup_substeps': 0
}

SMALL_CONFIG = {
    'data': {
        'grid': [16, 16],
        'frames': 12,
        'train_thetas': [0.1, 0.3],
        'train_seeds': [0],
        'test_interp_thetas': [0.2],
        'test_extrap_thetas': [0.8],
        'test_seeds': [100],
        'downsample': 4,
        'simulator': dict(SMALL_SIMULATOR)
    },
    'model': {
        'channels': 2,
        'height': 4,
        'width': 4,
        'patch_size': 2,
        'hidden_size': 8,
        'depth': 1,
        'n_heads': 2,
        'context_length': 2,
        'mlp_ratio': 2,
        'bottleneck': None,
        'frequency_embedding_size': 8
    },
    'sampler': {'method': 'heun', 'steps': 2, 'eps_cut': 0.001},
    'training': {
        'updates': 2,
        'batch_size': 2,
        'lr': 0.001,
        'warmup_steps': 1,
        'checkpoint_interval': 0,
        'log_interval': 1,
        'seed': 0
    },
    'evaluation': {'horizon': 8, 'samples': 1, 'seed': 7},
    'experiments': {
        'seeds': [0],
        'resolution_pair': [
            {'height': 4, 'width': 4, 'patch_size': 2, 'downsample': 4},
            {'height': 16, 'width': 16, 'patch_size': 8, 'downsample': 1}
        ],
        'bottleneck_dims': [2, 4]
    }
}


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RIFTCAST_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="设置 RIFTCAST_RUN_SLOW=1 以运行慢速测试")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def small_config_dict(tmp_path, **sections):
    """小规模配置: 16x16 数据, 下采样到 4x4, 4 个 token"""
    config = copy.deepcopy(SMALL_CONFIG)
    config['data']['path'] = str(tmp_path / "data" / "small.rdset")
    config['paths'] = {'out': str(tmp_path / "out"), 'log_dir': str(tmp_path / "logs")}
    for section, values in sections.items():
        if isinstance(values, dict) and isinstance(config.get(section), dict):
            config[section].update(values)
        else:
            config[section] = values
    return config


def write_config(tmp_path, name="config.yml", **sections) -> str:
    path = tmp_path / name
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(small_config_dict(tmp_path, **sections), f, sort_keys=False)
    return str(path)


@pytest.fixture
def small_simulator():
    return ReactionDiffusionConfig(**SMALL_SIMULATOR)


@pytest.fixture
def config_manager(tmp_path):
    return ConfigManager(write_config(tmp_path))


@pytest.fixture
def small_dataset(config_manager, small_simulator):
    cm = config_manager
    generate_dataset(cm.get_data_path(), cm.get_data_grid(), cm.get_data_frames(),
                     cm.get_train_thetas(), cm.get_train_seeds(),
                     cm.get_test_thetas(), cm.get_test_seeds(), small_simulator)
    return cm.get_data_path()


@pytest.fixture
def tiny_model_config():
    return ModelConfig(channels=2, height=4, width=4, patch_size=2, hidden_size=8, depth=1,
                       n_heads=2, context_length=2, mlp_ratio=2, frequency_embedding_size=8)


def random_params(config: ModelConfig, seed: int = 0, scale: float = 0.3):
    """所有参数 (包括零初始化的部分) 都取随机值"""
    rng = np.random.default_rng(seed)
    return {name: Tensor(scale * rng.standard_normal(shape), requires_grad=True, name=name)
            for name, shape in AjitModel.param_shapes(config).items()}


@pytest.fixture
def restore_root_logger():
    """LogManager 会替换根 logger 的 handler, 测试结束后恢复"""
    root = logging.getLogger()
    handlers = root.handlers[:]
    level = root.level
    yield root
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        if handler not in handlers:
            handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)
