import os
import copy
import json
import logging
import hashlib
from typing import Any, Dict, List, Optional

import yaml

from field_data import ReactionDiffusionConfig
from ajit_model import ModelConfig
from rectified_flow import LossKind, SamplerConfig, SamplerMethod, TargetKind, TAU_MIN
from experiment_runner import (EvaluationConfig, ExperimentConfig, ResolutionSpec, TrainingConfig,
                               STUB_PERSISTENCE)


TARGET_NAMES = [t.value for t in TargetKind]
LOSS_NAMES = [l.value for l in LossKind]
SAMPLER_NAMES = [m.value for m in SamplerMethod]


class ConfigValidationError(Exception):
    """配置验证错误"""
    pass


def _deep_merge(base: Dict, override: Dict) -> Dict:
    """override 覆盖 base, 嵌套字典逐层合并"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _is_positive_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


class ConfigManager:
    """
    实验配置

    单个 YAML 文档 (JSON 亦是合法 YAML); 缺失的键由默认配置补齐。
    """

    def __init__(self, config_path: str = "config.yml"):
        self.config_path = config_path
        self.config: Dict = {}
        self.logger = logging.getLogger(__name__)
        self.load_config()

        errors = self.validate_config()
        if errors:
            raise ConfigValidationError("配置验证失败:\n" + "\n".join(f"  - {e}" for e in errors))

    def load_config(self):
        """加载配置文件; 文件不存在时写出默认配置"""
        if os.path.exists(self.config_path):
            try:
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    loaded = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigValidationError(f"配置文件YAML格式错误: {e}")
            except Exception as e:
                raise ConfigValidationError(f"读取配置文件失败: {e}")
            if not isinstance(loaded, dict):
                raise ConfigValidationError(f"配置文件顶层必须是映射, 实际为 {type(loaded).__name__}")
            self.config = _deep_merge(self.get_default_config(), loaded)
        else:
            self.config = self.get_default_config()
            self.save_config()

    def save_config(self):
        """保存配置文件"""
        try:
            directory = os.path.dirname(os.path.abspath(self.config_path))
            os.makedirs(directory, exist_ok=True)
            with open(self.config_path, 'w', encoding='utf-8') as f:
                yaml.dump(self.config, f, allow_unicode=True, default_flow_style=False, sort_keys=False)
        except Exception as e:
            raise ConfigValidationError(f"保存配置文件失败: {e}")

    def get_default_config(self) -> Dict:
        """获取默认配置 (桌面规模)"""
        return {
            'data': {
                'path': 'data/riftcast.rdset',
                'grid': [128, 64],
                'frames': 200,
                'train_thetas': [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                'train_seeds': [0, 1],
                'test_interp_thetas': [0.35, 0.55],
                'test_extrap_thetas': [0.8],
                'test_seeds': [100],
                'downsample': 1,
                'simulator': {
                    'diffusivity_u': 0.16,
                    'diffusivity_v': 0.08,
                    'feed_kill_low': [0.030, 0.055],
                    'feed_kill_high': [0.042, 0.062],
                    'grid_spacing': 1.0,
                    'dt_solver': 0.78125,
                    'substeps_per_frame': 40,
                    'warmup_substeps': 1000,
                    'perturbation_amplitude': 1.0,
                    'perturbation_fraction': 0.125
                }
            },
            'model': {
                'channels': 2,
                'height': 128,
                'width': 64,
                'patch_size': 8,
                'hidden_size': 192,
                'depth': 6,
                'n_heads': 6,
                'context_length': 2,
                'mlp_ratio': 4,
                'bottleneck': None,
                'frequency_embedding_size': 256
            },
            'diffusion': {
                'target': 'x',
                'loss': 'v',
                'tau_min': TAU_MIN
            },
            'sampler': {
                'method': 'heun',
                'steps': 20,
                'eps_cut': 1e-3
            },
            'training': {
                'updates': 20000,
                'batch_size': 16,
                'lr': 3e-4,
                'warmup_steps': 500,
                'beta1': 0.9,
                'beta2': 0.999,
                'eps': 1e-8,
                'checkpoint_interval': 1000,
                'log_interval': 1,
                'seed': 0,
                'resume_from': None,
                'stub_model': None
            },
            'evaluation': {
                'horizon': 100,
                'samples': 3,
                'probe': {
                    'row': None,
                    'col': None,
                    'channel': 1
                },
                'clamp_factor': 100.0,
                'seed': 1234,
                'max_trajectories': None,
                'spectrum_method': 'direct'
            },
            'experiments': {
                'seeds': [0, 1, 2],
                'resolution_pair': [
                    {'height': 32, 'width': 16, 'patch_size': 2, 'downsample': 4},
                    {'height': 128, 'width': 64, 'patch_size': 8, 'downsample': 1}
                ],
                'bottleneck_dims': [2, 4, 8, 16, 32, 64]
            },
            'paths': {
                'out': 'out',
                'log_dir': 'logs'
            },
            'logging': {
                'training_progress': True,
                'muted_keywords': []
            },
            'debug': False
        }

    # ============ 验证 ============
    def validate_config(self) -> List[str]:
        """验证配置, 返回全部错误描述"""
        errors: List[str] = []
        errors += self._validate_data()
        errors += self._validate_model()
        errors += self._validate_diffusion()
        errors += self._validate_training()
        errors += self._validate_evaluation()
        errors += self._validate_experiments()
        errors += self._validate_logging()
        return errors

    def _validate_data(self) -> List[str]:
        errors = []
        data = self.config.get('data', {})
        grid = data.get('grid')
        if not (isinstance(grid, list) and len(grid) == 2 and all(_is_positive_int(g) for g in grid)):
            errors.append(f"data.grid 必须是两个正整数 [H, W], 当前值: {grid}")
        elif min(grid) < 16:
            errors.append(f"data.grid 每一维至少为 16, 当前值: {grid}")
        if not _is_positive_int(data.get('frames')):
            errors.append(f"data.frames 必须是正整数, 当前值: {data.get('frames')}")
        if not _is_positive_int(data.get('downsample')):
            errors.append(f"data.downsample 必须是正整数, 当前值: {data.get('downsample')}")
        for key in ('train_thetas', 'test_interp_thetas', 'test_extrap_thetas'):
            values = data.get(key, [])
            if not isinstance(values, list) or any(not isinstance(v, (int, float)) or not 0 <= v <= 1 for v in values):
                errors.append(f"data.{key} 必须是 [0, 1] 内的数值列表, 当前值: {values}")
        if not data.get('train_thetas'):
            errors.append("data.train_thetas 不能为空")

        simulator = data.get('simulator', {})
        try:
            sim = self.get_simulator_config()
            if sim.dt_solver <= 0 or sim.dt_solver > sim.stability_limit:
                errors.append(f"simulator.dt_solver={sim.dt_solver} 违反稳定性条件 (<= {sim.stability_limit})")
            if sim.substeps_per_frame < 1:
                errors.append(f"simulator.substeps_per_frame 必须 >= 1, 当前值: {sim.substeps_per_frame}")
        except (TypeError, ValueError) as e:
            errors.append(f"data.simulator 配置无法解析: {e} ({simulator})")
        return errors

    def _validate_model(self) -> List[str]:
        try:
            model = self.get_model_config()
        except TypeError as e:
            return [f"model 配置包含未知字段: {e}"]
        errors = [f"model.{e}" for e in model.validate()]
        grid = self.config.get('data', {}).get('grid')
        factor = self.config.get('data', {}).get('downsample', 1)
        if isinstance(grid, list) and len(grid) == 2 and _is_positive_int(factor) and not errors:
            if [grid[0] // factor, grid[1] // factor] != [model.height, model.width]:
                errors.append(f"model 分辨率 {model.height}x{model.width} 与数据网格 {grid} / {factor} 不一致")
        return errors

    def _validate_diffusion(self) -> List[str]:
        errors = []
        diffusion = self.config.get('diffusion', {})
        if diffusion.get('target') not in TARGET_NAMES:
            errors.append(f"diffusion.target 必须是 {TARGET_NAMES} 之一, 当前值: {diffusion.get('target')}")
        if diffusion.get('loss') not in LOSS_NAMES:
            errors.append(f"diffusion.loss 必须是 {LOSS_NAMES} 之一, 当前值: {diffusion.get('loss')}")
        tau_min = diffusion.get('tau_min')
        if not isinstance(tau_min, (int, float)) or not 0 < tau_min < 0.5:
            errors.append(f"diffusion.tau_min 必须在 (0, 0.5) 内, 当前值: {tau_min}")

        sampler = self.config.get('sampler', {})
        if sampler.get('method') not in SAMPLER_NAMES:
            errors.append(f"sampler.method 必须是 {SAMPLER_NAMES} 之一, 当前值: {sampler.get('method')}")
        if not _is_positive_int(sampler.get('steps')):
            errors.append(f"sampler.steps 必须是正整数, 当前值: {sampler.get('steps')}")
        eps_cut = sampler.get('eps_cut')
        if not isinstance(eps_cut, (int, float)) or not 0 < eps_cut < 0.5:
            errors.append(f"sampler.eps_cut 必须在 (0, 0.5) 内, 当前值: {eps_cut}")
        return errors

    def _validate_training(self) -> List[str]:
        errors = []
        training = self.config.get('training', {})
        updates = training.get('updates')
        if not isinstance(updates, int) or isinstance(updates, bool) or updates < 0:
            errors.append(f"training.updates 必须是非负整数, 当前值: {updates}")
        for key in ('batch_size', 'log_interval'):
            if not _is_positive_int(training.get(key)):
                errors.append(f"training.{key} 必须是正整数, 当前值: {training.get(key)}")
        interval = training.get('checkpoint_interval')
        if not isinstance(interval, int) or interval < 0:
            errors.append(f"training.checkpoint_interval 必须是非负整数, 当前值: {interval}")
        lr = training.get('lr')
        if not isinstance(lr, (int, float)) or lr <= 0:
            errors.append(f"training.lr 必须为正数, 当前值: {lr}")
        for key in ('beta1', 'beta2'):
            value = training.get(key)
            if not isinstance(value, (int, float)) or not 0 <= value < 1:
                errors.append(f"training.{key} 必须在 [0, 1) 内, 当前值: {value}")
        stub = training.get('stub_model')
        if stub not in (None, STUB_PERSISTENCE):
            errors.append(f"training.stub_model 只支持 {STUB_PERSISTENCE}, 当前值: {stub}")
        resume = training.get('resume_from')
        if resume and not os.path.exists(resume):
            errors.append(f"training.resume_from 指向的检查点不存在: {resume}")
        return errors

    def _validate_evaluation(self) -> List[str]:
        errors = []
        evaluation = self.config.get('evaluation', {})
        for key in ('horizon', 'samples'):
            if not _is_positive_int(evaluation.get(key)):
                errors.append(f"evaluation.{key} 必须是正整数, 当前值: {evaluation.get(key)}")
        if evaluation.get('spectrum_method') not in ('direct', 'fft'):
            errors.append(f"evaluation.spectrum_method 必须是 direct 或 fft, 当前值: {evaluation.get('spectrum_method')}")

        probe = evaluation.get('probe', {})
        model = self.config.get('model', {})
        height, width, channels = model.get('height'), model.get('width'), model.get('channels')
        row, col, channel = probe.get('row'), probe.get('col'), probe.get('channel')
        if isinstance(channels, int) and not (isinstance(channel, int) and 0 <= channel < channels):
            errors.append(f"evaluation.probe.channel={channel} 越界 (通道数 {channels})")
        if row is not None and isinstance(height, int) and not 0 <= row < height:
            errors.append(f"evaluation.probe.row={row} 越界 (H={height})")
        if col is not None and isinstance(width, int) and not 0 <= col < width:
            errors.append(f"evaluation.probe.col={col} 越界 (W={width})")
        return errors

    def _validate_experiments(self) -> List[str]:
        errors = []
        experiments = self.config.get('experiments', {})
        seeds = experiments.get('seeds')
        if not isinstance(seeds, list) or not seeds or any(not isinstance(s, int) or s < 0 for s in seeds):
            errors.append(f"experiments.seeds 必须是非空的非负整数列表, 当前值: {seeds}")

        pair = experiments.get('resolution_pair', [])
        if len(pair) != 2:
            errors.append(f"experiments.resolution_pair 必须恰好包含两档, 当前 {len(pair)} 档")
        else:
            tokens = []
            for index, spec in enumerate(pair):
                h, w, p = spec.get('height'), spec.get('width'), spec.get('patch_size')
                if not all(_is_positive_int(v) for v in (h, w, p)):
                    errors.append(f"experiments.resolution_pair[{index}] 必须包含正整数 height/width/patch_size")
                    continue
                if h % p or w % p:
                    errors.append(f"experiments.resolution_pair[{index}]: P={p} 不能整除 {h}x{w}")
                    continue
                tokens.append((h // p) * (w // p))
            if len(tokens) == 2 and tokens[0] != tokens[1]:
                errors.append(f"experiments.resolution_pair 两档 token 数不一致: {tokens[0]} vs {tokens[1]}")

        dims = experiments.get('bottleneck_dims', [])
        if not isinstance(dims, list) or any(not _is_positive_int(d) for d in dims):
            errors.append(f"experiments.bottleneck_dims 必须是正整数列表, 当前值: {dims}")
        return errors

    def _validate_logging(self) -> List[str]:
        errors = []
        section = self.config.get('logging', {})
        if not isinstance(section.get('training_progress', True), bool):
            errors.append(f"logging.training_progress 必须是布尔值, 当前值: {section.get('training_progress')}")
        keywords = section.get('muted_keywords', [])
        if not isinstance(keywords, list) or any(not isinstance(k, str) or not k for k in keywords):
            errors.append(f"logging.muted_keywords 必须是非空字符串列表, 当前值: {keywords}")
        return errors

    # ============ 覆盖 ============
    def apply_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                        sampler: Optional[str] = None, ode_steps: Optional[int] = None,
                        eps_cut: Optional[float] = None, target: Optional[str] = None,
                        loss: Optional[str] = None, updates: Optional[int] = None,
                        data: Optional[str] = None, grid: Optional[List[int]] = None,
                        frames: Optional[int] = None, train_thetas: Optional[List[float]] = None,
                        train_seeds: Optional[List[int]] = None,
                        training_progress: Optional[bool] = None,
                        muted_keywords: Optional[List[str]] = None):
        """
        合并命令行覆盖项并重新验证; 失败时恢复原配置

        覆盖 grid 时模型分辨率随之改为 grid / downsample。
        """
        old_config = copy.deepcopy(self.config)
        if grid is not None:
            grid = [int(g) for g in grid]
            factor = self.config.get('data', {}).get('downsample', 1)
            model = self.config.setdefault('model', {})
            model['height'], model['width'] = grid[0] // factor, grid[1] // factor
        overrides = {
            ('training', 'seed'): seed,
            ('paths', 'out'): out,
            ('sampler', 'method'): sampler,
            ('sampler', 'steps'): ode_steps,
            ('sampler', 'eps_cut'): eps_cut,
            ('diffusion', 'target'): target,
            ('diffusion', 'loss'): loss,
            ('training', 'updates'): updates,
            ('data', 'path'): data,
            ('data', 'grid'): grid,
            ('data', 'frames'): frames,
            ('data', 'train_thetas'): list(train_thetas) if train_thetas is not None else None,
            ('data', 'train_seeds'): list(train_seeds) if train_seeds is not None else None,
            ('logging', 'training_progress'): training_progress,
            ('logging', 'muted_keywords'): (self.get_muted_keywords() + list(muted_keywords)
                                              if muted_keywords is not None else None)
        }
        for (section, key), value in overrides.items():
            if value is not None:
                self.config.setdefault(section, {})[key] = value
                self.logger.debug(f"配置覆盖: {section}.{key} = {value}")

        errors = self.validate_config()
        if errors:
            self.config = old_config
            raise ConfigValidationError("覆盖后的配置验证失败:\n" + "\n".join(f"  - {e}" for e in errors))

    def get_config_hash(self) -> str:
        """规范化 JSON (键排序) 的 SHA-256"""
        canonical = json.dumps(self.config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # ============ 数据配置 ============
    def get_data_path(self) -> str:
        return self.config.get('data', {}).get('path', 'data/riftcast.rdset')

    def get_data_grid(self) -> tuple:
        return tuple(self.config.get('data', {}).get('grid', [128, 64]))

    def get_data_frames(self) -> int:
        return self.config.get('data', {}).get('frames', 200)

    def get_train_thetas(self) -> List[float]:
        return list(self.config.get('data', {}).get('train_thetas', []))

    def get_test_thetas(self) -> List[float]:
        data = self.config.get('data', {})
        return list(data.get('test_interp_thetas', [])) + list(data.get('test_extrap_thetas', []))

    def get_train_seeds(self) -> List[int]:
        return list(self.config.get('data', {}).get('train_seeds', [0]))

    def get_test_seeds(self) -> List[int]:
        return list(self.config.get('data', {}).get('test_seeds', [100]))

    def get_downsample(self) -> int:
        return self.config.get('data', {}).get('downsample', 1)

    def get_simulator_config(self) -> ReactionDiffusionConfig:
        simulator = dict(self.config.get('data', {}).get('simulator', {}))
        for key in ('feed_kill_low', 'feed_kill_high'):
            if key in simulator:
                simulator[key] = tuple(simulator[key])
        return ReactionDiffusionConfig(**simulator)

    # ============ 模型与扩散配置 ============
    def get_model_config(self) -> ModelConfig:
        return ModelConfig(**self.config.get('model', {}))

    def get_target_kind(self) -> TargetKind:
        return TargetKind(self.config.get('diffusion', {}).get('target', 'x'))

    def get_loss_kind(self) -> LossKind:
        return LossKind(self.config.get('diffusion', {}).get('loss', 'v'))

    def get_tau_min(self) -> float:
        return self.config.get('diffusion', {}).get('tau_min', TAU_MIN)

    def get_sampler_config(self) -> SamplerConfig:
        sampler = self.config.get('sampler', {})
        return SamplerConfig(
            method=SamplerMethod(sampler.get('method', 'heun')),
            steps=sampler.get('steps', 20),
            eps_cut=sampler.get('eps_cut', 1e-3)
        )

    # ============ 训练与评估配置 ============
    def get_training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.config.get('training', {}))

    def get_evaluation_config(self) -> EvaluationConfig:
        evaluation = dict(self.config.get('evaluation', {}))
        probe = evaluation.pop('probe', {}) or {}
        return EvaluationConfig(
            probe_row=probe.get('row'),
            probe_col=probe.get('col'),
            probe_channel=probe.get('channel', 1),
            **evaluation
        )

    # ============ 实验配置 ============
    def get_experiment_seeds(self) -> List[int]:
        return list(self.config.get('experiments', {}).get('seeds', [0]))

    def get_resolution_pair(self) -> List[ResolutionSpec]:
        return [ResolutionSpec(**spec) for spec in self.config.get('experiments', {}).get('resolution_pair', [])]

    def get_bottleneck_dims(self) -> List[int]:
        return list(self.config.get('experiments', {}).get('bottleneck_dims', []))

    def get_out_dir(self) -> str:
        return self.config.get('paths', {}).get('out', 'out')

    def get_log_dir(self) -> str:
        return self.config.get('paths', {}).get('log_dir', 'logs')

    def is_debug_mode(self) -> bool:
        return self.config.get('debug', False)

    def is_training_progress_enabled(self) -> bool:
        return self.config.get('logging', {}).get('training_progress', True)

    def get_muted_keywords(self) -> List[str]:
        return list(self.config.get('logging', {}).get('muted_keywords', []))

    def get_experiment_config(self) -> ExperimentConfig:
        """汇总为 ExperimentRunner 使用的已解析配置"""
        return ExperimentConfig(
            data_path=self.get_data_path(),
            model=self.get_model_config(),
            target=self.get_target_kind(),
            loss=self.get_loss_kind(),
            sampler=self.get_sampler_config(),
            training=self.get_training_config(),
            evaluation=self.get_evaluation_config(),
            out_dir=self.get_out_dir(),
            downsample=self.get_downsample(),
            tau_min=self.get_tau_min(),
            train_thetas=self.get_train_thetas(),
            seeds=self.get_experiment_seeds(),
            resolution_pair=self.get_resolution_pair(),
            bottleneck_dims=self.get_bottleneck_dims(),
            config_hash=self.get_config_hash()
        )

    def to_dict(self) -> Dict:
        return copy.deepcopy(self.config)

    def get_config_status(self) -> str:
        """获取配置状态信息"""
        model = self.get_model_config()
        sampler = self.get_sampler_config()
        training = self.get_training_config()
        evaluation = self.get_evaluation_config()
        lines = ["=" * 60, "配置状态信息", "=" * 60]

        lines.append("\n【数据配置】")
        lines.append(f"  数据集: {self.get_data_path()}")
        grid = self.get_data_grid()
        lines.append(f"  网格: {grid[0]}x{grid[1]}, {self.get_data_frames()} 帧, 下采样 {self.get_downsample()}")
        lines.append(f"  训练 θ: {self.get_train_thetas()}")
        lines.append(f"  测试 θ: {self.get_test_thetas()}")

        lines.append("\n【模型配置】")
        lines.append(f"  分辨率: {model.height}x{model.width}, P={model.patch_size}")
        lines.append(f"  token 数 N={model.num_tokens}, 每 token 维度 C*P^2={model.patch_dim}")
        lines.append(f"  D={model.hidden_size}, L={model.depth}, heads={model.n_heads}, k={model.context_length}")
        lines.append(f"  瓶颈: {model.bottleneck if model.bottleneck is not None else '无'}")

        lines.append("\n【扩散配置】")
        lines.append(f"  目标: {self.get_target_kind().value}, 损失空间: {self.get_loss_kind().value}")
        lines.append(f"  采样器: {sampler.method.value}, M={sampler.steps}, eps_cut={sampler.eps_cut}")

        lines.append("\n【训练配置】")
        lines.append(f"  更新次数: {training.updates}, batch={training.batch_size}")
        lines.append(f"  学习率: {training.lr} (预热 {training.warmup_steps} 步)")
        lines.append(f"  种子: {training.seed}, 实验种子: {self.get_experiment_seeds()}")
        lines.append(f"  桩模型: {training.stub_model or '未启用'}")

        lines.append("\n【评估配置】")
        lines.append(f"  滚动步数 Hr={evaluation.horizon}, 样本数 S={evaluation.samples}")
        lines.append(f"  探针通道: {evaluation.probe_channel}")

        lines.append("\n【输出】")
        lines.append(f"  输出目录: {self.get_out_dir()}")
        lines.append(f"  配置哈希: {self.get_config_hash()[:16]}")
        lines.append(f"  调试模式: {'启用' if self.is_debug_mode() else '禁用'}")
        lines.append("=" * 60)
        return "\n".join(lines)
