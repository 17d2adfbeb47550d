import os
import json
import logging
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tensor_core import (Graph, OptState, Tensor, GradientError, adam_update, backward,
                         global_grad_norm, load_checkpoint, save_checkpoint)
from field_data import (SPLIT_TEST, SPLIT_TRAIN, NormStats, ReactionDiffusionConfig, Trajectory,
                        apply_normalization, dataset_content_hash, downsample_trajectory,
                        fit_normalization, generate_trajectories, make_examples,
                        normalize_trajectory, read_dataset, read_dataset_header, theta_regime,
                        write_dataset)
from ajit_model import ActivationError, AjitModel, ModelConfig
from rectified_flow import (CouplingSample, DiffusionForecaster, LossKind, NonFiniteLossError,
                            PersistenceForecaster, SamplerConfig, TargetKind, TAU_MIN,
                            sample_training_tau, training_loss_node)
from rollout_metrics import (ProbeSpec, RolloutResult, aggregate_envelope, clamp_mse, envelope_rows,
                             masked_mse, masked_mse_per_channel, probe_spectrum, rollout,
                             temporal_change, write_csv)
from system_monitor import SystemMonitor


STUB_PERSISTENCE = "persistence"
TARGET_ORDER = (TargetKind.X, TargetKind.EPS, TargetKind.V)
LOSS_ORDER = (LossKind.X_LOSS, LossKind.EPS_LOSS, LossKind.V_LOSS)


class ExperimentError(Exception):
    """实验流程错误基类"""
    pass


class TrainingDivergedError(ExperimentError):
    """训练损失非有限, 训练中止"""

    def __init__(self, message: str, step: int, config_echo: Optional[Dict] = None):
        super().__init__(message)
        self.step = step
        self.config_echo = config_echo or {}


class ProtocolMismatchError(ExperimentError):
    """配置之间或配置与数据之间不匹配"""
    pass


@dataclass
class TrainingConfig:
    """优化与训练循环参数"""
    updates: int = 20000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_interval: int = 1000
    log_interval: int = 1
    seed: int = 0
    resume_from: Optional[str] = None
    stub_model: Optional[str] = None

    def lr_at(self, step: int) -> float:
        """常数学习率 + 线性预热 (step 从 0 开始)"""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


@dataclass
class EvaluationConfig:
    """滚动评估参数"""
    horizon: int = 100
    samples: int = 3
    probe_row: Optional[int] = None
    probe_col: Optional[int] = None
    probe_channel: int = 1
    clamp_factor: float = 100.0
    seed: int = 1234
    max_trajectories: Optional[int] = None
    spectrum_method: str = "direct"

    def probe_for(self, height: int, width: int) -> ProbeSpec:
        probe = ProbeSpec.default(height, width, self.probe_channel)
        if self.probe_row is not None:
            probe.row = self.probe_row
        if self.probe_col is not None:
            probe.col = self.probe_col
        return probe


@dataclass
class ResolutionSpec:
    """双分辨率协议中的一档: 模型分辨率、补丁大小、相对数据的下采样因子"""
    height: int
    width: int
    patch_size: int
    downsample: int = 1

    @property
    def num_tokens(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    def token_dim(self, channels: int) -> int:
        return channels * self.patch_size ** 2


@dataclass
class ExperimentConfig:
    """一次实验所需的全部已解析配置"""
    data_path: str
    model: ModelConfig
    target: TargetKind
    loss: LossKind
    sampler: SamplerConfig
    training: TrainingConfig
    evaluation: EvaluationConfig
    out_dir: str = "out"
    downsample: int = 1
    tau_min: float = TAU_MIN
    train_thetas: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    resolution_pair: List[ResolutionSpec] = field(default_factory=list)
    bottleneck_dims: List[int] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["target"] = self.target.value
        data["loss"] = self.loss.value
        data["sampler"]["method"] = self.sampler.method.value
        return data

    @property
    def cell_name(self) -> str:
        return f"{self.target.value}_{self.loss.value}"


@dataclass
class TrainResult:
    """训练产物"""
    params: Dict[str, Tensor]
    checkpoint_path: Optional[str]
    loss_rows: List[Dict]
    norm_stats: NormStats
    steps: int


@dataclass
class EvaluationReport:
    """一个预测器在测试集上的全部指标"""
    experiment: str
    aggregate_mse: float
    surviving_mse: float
    channel_mse: np.ndarray
    divergence_count: int
    rollout_count: int
    regime_mse: Dict[str, float]
    files: Dict[str, Tuple[List[str], List[Dict]]] = field(default_factory=dict)


@dataclass
class CellResult:
    """3×3 网格中的一个格子 (多个种子的中位数)"""
    target: TargetKind
    loss: LossKind
    mse: float
    channel_mse: np.ndarray
    divergence_count: int
    per_seed_mse: List[float]
    parameter_count: int


@dataclass
class RunManifest:
    """运行清单, 运行结束时原子写入"""
    run_id: str
    config_hash: str
    dataset_hash: str
    phases: Dict[str, float] = field(default_factory=dict)
    divergence_counts: Dict[str, int] = field(default_factory=dict)
    compute: Dict = field(default_factory=dict)
    host: Dict = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    def write(self, path: str):
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        os.replace(tmp_path, path)


class RunDirectory:
    """out/<run-id>/ 目录与文件清单"""

    def __init__(self, out_dir: str, run_id: str):
        self.run_id = run_id
        self.root = os.path.join(out_dir, run_id)
        self.files: List[str] = []
        for sub in ("checkpoints", "metrics", "tables"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts: str) -> str:
        full = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        rel = os.path.relpath(full, self.root).replace(os.sep, "/")
        if rel not in self.files:
            self.files.append(rel)
        return full

    def write_csv(self, rel_path: str, fieldnames: Sequence[str], rows: Sequence[Dict]) -> str:
        full = self.path(*rel_path.split("/"))
        write_csv(full, fieldnames, rows)
        return full


# ============ 数据 ============
def generate_dataset(path: str, grid: Tuple[int, int], frames: int,
                     train_thetas: Sequence[float], train_seeds: Sequence[int],
                     test_thetas: Sequence[float], test_seeds: Sequence[int],
                     simulator: Optional[ReactionDiffusionConfig] = None,
                     logger: Optional[logging.Logger] = None) -> List[Trajectory]:
    """按 θ 划分生成训练/测试轨迹并写入一个数据集文件"""
    log = logger or logging.getLogger(__name__)
    log.info(f"生成数据集: 网格 {grid[0]}x{grid[1]}, {frames} 帧, "
             f"训练 θ={list(train_thetas)}, 测试 θ={list(test_thetas)}")
    trajectories = generate_trajectories(train_thetas, train_seeds, grid, frames, SPLIT_TRAIN, simulator)
    trajectories += generate_trajectories(test_thetas, test_seeds, grid, frames, SPLIT_TEST, simulator)
    write_dataset(trajectories, path)
    return trajectories


def load_split(path: str, split: str, factor: int = 1) -> List[Trajectory]:
    """按 split 标签读取, 可选块均值下采样"""
    trajectories = read_dataset(path, splits=[split])
    if not trajectories:
        raise ProtocolMismatchError(f"数据集 {path} 中没有 split={split} 的轨迹")
    if factor > 1:
        trajectories = [downsample_trajectory(t, factor) for t in trajectories]
    return trajectories


def check_data_shape(trajectories: Sequence[Trajectory], model: ModelConfig):
    expected = (model.channels, model.height, model.width)
    for trajectory in trajectories:
        if trajectory.field_shape != expected:
            raise ProtocolMismatchError(
                f"dataset/config shape mismatch: 数据 {trajectory.field_shape}, 模型配置 {expected}")
        if trajectory.length < model.context_length + 1:
            raise ProtocolMismatchError(
                f"轨迹长度 {trajectory.length} 小于 context_length+1={model.context_length + 1}")


def check_dataset_header(path: str, model: ModelConfig, factor: int = 1):
    """只读头部, 检查下采样后的网格与轨迹长度是否匹配模型配置"""
    header, _ = read_dataset_header(path)
    height, width = header["H"], header["W"]
    if height % factor or width % factor:
        raise ProtocolMismatchError(f"dataset/config shape mismatch: 网格 {height}x{width} 不能被下采样因子 {factor} 整除")
    shape = (header["C"], height // factor, width // factor)
    expected = (model.channels, model.height, model.width)
    if shape != expected:
        raise ProtocolMismatchError(
            f"dataset/config shape mismatch: 数据 (下采样 {factor}) {shape}, 模型配置 {expected}")
    shortest = min(entry["T"] for entry in header["trajectories"])
    if shortest < model.context_length + 1:
        raise ProtocolMismatchError(f"轨迹长度 {shortest} 小于 context_length+1={model.context_length + 1}")


class ExperimentRunner:
    """
    训练、评估与三个实验协议

    所有随机性由配置中的种子决定; 输出写入 out/<run-id>/。
    """

    def __init__(self, config: ExperimentConfig, logger: Optional[logging.Logger] = None,
                 monitor: Optional[SystemMonitor] = None):
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.monitor = monitor or SystemMonitor(self.logger)
        self.divergence_counts: Dict[str, int] = {}
        self.compute: Dict = {}

    # ============ 训练 ============
    def _batch_indices(self, step: int, count: int, seed: int, batch: int) -> List[int]:
        """第 step 步的样本下标; 每个 epoch 使用由 (seed, epoch) 决定的排列"""
        indices = []
        permutations: Dict[int, np.ndarray] = {}
        for j in range(batch):
            position = step * batch + j
            epoch = position // count
            if epoch not in permutations:
                permutations[epoch] = np.random.default_rng([seed, epoch]).permutation(count)
            indices.append(int(permutations[epoch][position % count]))
        return indices

    def train(self, config: Optional[ExperimentConfig] = None,
              train_trajectories: Optional[List[Trajectory]] = None,
              run_dir: Optional[RunDirectory] = None, tag: str = "") -> TrainResult:
        """
        训练一个模型

        Args:
            config: 覆盖 self.config
            train_trajectories: 已加载的训练集 (未归一化); None 时从数据集读取
            run_dir: 输出目录; None 时不写文件
            tag: 子目录名, 用于网格与扫描中的多次训练

        Returns:
            TrainResult
        """
        cfg = config or self.config
        tcfg = cfg.training
        if train_trajectories is None:
            train_trajectories = load_split(cfg.data_path, SPLIT_TRAIN, cfg.downsample)
        check_data_shape(train_trajectories, cfg.model)
        stats = fit_normalization(train_trajectories)
        normalized = [normalize_trajectory(stats, t) for t in train_trajectories]
        examples = [ex for t in normalized for ex in make_examples(t, cfg.model.context_length)]

        model = AjitModel(cfg.model, seed=tcfg.seed, logger=self.logger)
        opt_state = OptState.zeros_like(model.params)
        rng = np.random.default_rng(tcfg.seed)
        start_step = 0

        if tcfg.resume_from:
            checkpoint = load_checkpoint(tcfg.resume_from)
            model.params = checkpoint.params
            model._check_param_shapes()
            if checkpoint.opt_state is not None:
                opt_state = checkpoint.opt_state
                start_step = opt_state.step
            if checkpoint.rng_state is not None:
                rng.bit_generator.state = checkpoint.rng_state
            self.logger.info(f"从检查点恢复训练: {tcfg.resume_from} (step {start_step})")

        sub = f"{tag}/" if tag else ""
        extra = {
            "model_config": cfg.model.to_dict(),
            "target": cfg.target.value,
            "loss": cfg.loss.value,
            "norm_stats": stats.to_dict(),
            "training": asdict(tcfg),
            "config_hash": cfg.config_hash
        }

        def checkpoint_to(name: str) -> Optional[str]:
            if run_dir is None:
                return None
            path = run_dir.path("checkpoints", *(sub + name).split("/"))
            save_checkpoint(path, model.params, opt_state, rng.bit_generator.state,
                            dict(extra, step=opt_state.step))
            return path

        self.logger.info("=" * 60)
        self.logger.info(f"开始训练 {cfg.cell_name}{' [' + tag + ']' if tag else ''}: "
                         f"{len(examples)} 个样本, {tcfg.updates} 次更新, batch={tcfg.batch_size}, "
                         f"参数量 {model.parameter_count()}")
        self.logger.info("=" * 60)

        loss_rows: List[Dict] = []
        batch_weight = 1.0 / tcfg.batch_size
        for step in range(start_step, tcfg.updates):
            lr = tcfg.lr_at(step)
            total_grads: Dict[str, np.ndarray] = {}
            total_loss = 0.0
            try:
                for index in self._batch_indices(step, len(examples), tcfg.seed, tcfg.batch_size):
                    example = examples[index]
                    tau = sample_training_tau(rng, cfg.target, cfg.loss, cfg.tau_min)
                    sample = CouplingSample.draw(example.target, tau, rng)
                    graph = Graph()
                    y = model.build_forward(graph, sample.z, tau, example.context, example.theta)
                    loss = training_loss_node(graph, y, cfg.target, cfg.loss, sample, cfg.tau_min)
                    root = graph.scale(loss, batch_weight)
                    total_loss += float(graph.value(root))
                    for name, grad in backward(graph, root).items():
                        if name in total_grads:
                            total_grads[name] = total_grads[name] + grad.data
                        else:
                            total_grads[name] = grad.data
            except (NonFiniteLossError, GradientError, ActivationError) as e:
                self.logger.error(f"训练在第 {step} 步发散: {e}", exc_info=True)
                raise TrainingDivergedError(f"non-finite loss at step {step}: {e}",
                                            step=step, config_echo=cfg.to_dict())

            grads = {name: Tensor(g, name=name) for name, g in total_grads.items()}
            grad_norm = global_grad_norm(grads)
            model.params, opt_state = adam_update(model.params, grads, opt_state, lr,
                                                  tcfg.beta1, tcfg.beta2, tcfg.eps)

            if (step + 1) % tcfg.log_interval == 0 or step + 1 == tcfg.updates:
                loss_rows.append({"step": step + 1, "loss": total_loss, "grad_norm": grad_norm, "lr": lr})
                self.logger.debug(f"step {step + 1}/{tcfg.updates} loss={total_loss:.6f} "
                                  f"grad_norm={grad_norm:.4f} lr={lr:.2e}")
            if tcfg.checkpoint_interval > 0 and (step + 1) % tcfg.checkpoint_interval == 0:
                path = checkpoint_to(f"step_{step + 1:07d}.ckpt")
                self.logger.info(f"step {step + 1}: loss={total_loss:.6f}, 检查点 {path}")

        final_path = checkpoint_to("final.ckpt")
        if run_dir is not None:
            run_dir.write_csv(f"metrics/{sub}train_loss.csv", ["step", "loss", "grad_norm", "lr"], loss_rows)
        self.logger.info(f"训练完成 {cfg.cell_name}: {opt_state.step} 步")
        return TrainResult(params=model.params, checkpoint_path=final_path, loss_rows=loss_rows,
                           norm_stats=stats, steps=opt_state.step)

    # ============ 评估 ============
    def build_forecaster(self, cfg: ExperimentConfig, params: Optional[Dict[str, Tensor]]):
        if cfg.training.stub_model == STUB_PERSISTENCE:
            return PersistenceForecaster()
        model = AjitModel(cfg.model, params=params, logger=self.logger)
        return DiffusionForecaster(model, cfg.target, cfg.sampler, cfg.tau_min)

    def evaluate_forecaster(self, forecaster, test_trajectories: Sequence[Trajectory],
                            cfg: Optional[ExperimentConfig] = None,
                            experiment: Optional[str] = None) -> EvaluationReport:
        """
        对已归一化的测试轨迹做滚动评估

        每条测试轨迹取前 k 帧作为初始上下文, 生成 Hr 帧, 共 S 个样本。
        参考曲线用同一套代码在真值帧上计算。
        """
        cfg = cfg or self.config
        ecfg = cfg.evaluation
        name = experiment or cfg.cell_name
        k = cfg.model.context_length
        trajectories = list(test_trajectories)
        if ecfg.max_trajectories is not None:
            trajectories = trajectories[:ecfg.max_trajectories]
        if not trajectories:
            raise ExperimentError("没有可评估的测试轨迹")

        mse_rows, channel_rows, change_rows, spectrum_rows = [], [], [], []
        ref_change_rows, ref_spectrum_rows = [], []
        change_series, spectrum_series, ref_change_series, ref_spectrum_series = [], [], [], []
        rollout_values: List[float] = []
        surviving_values: List[float] = []
        channel_values: List[np.ndarray] = []
        regime_values: Dict[str, List[float]] = {}
        spectrum_freqs = ref_freqs = None
        divergences = 0

        for q, trajectory in enumerate(trajectories):
            horizon = min(ecfg.horizon, trajectory.length - k)
            reference = trajectory.frames[k:k + horizon]
            cap = ecfg.clamp_factor * float(np.var(reference))
            regime = theta_regime(trajectory.theta, cfg.train_thetas)
            probe = ecfg.probe_for(trajectory.frames.shape[-2], trajectory.frames.shape[-1])

            if horizon >= 2:
                ref_change = temporal_change(reference, trajectory.dt)
                ref_change_series.append(ref_change)
                ref_change_rows += [{"experiment": name, "q": q, "s": "ref", "t": t + 1, "value": v}
                                    for t, v in enumerate(ref_change)]
            if horizon >= 8:
                ref_spec = probe_spectrum(reference, probe, trajectory.dt, trajectory.mask, ecfg.spectrum_method)
                ref_spectrum_series.append(ref_spec.weighted)
                ref_freqs = ref_spec.frequencies
                ref_spectrum_rows += [{"experiment": name, "q": q, "s": "ref", "f_m": f, "value": v}
                                      for f, v in zip(ref_spec.frequencies, ref_spec.weighted)]

            for s in range(ecfg.samples):
                result = rollout(forecaster, trajectory.frames[:k], trajectory.theta, horizon,
                                 ecfg.seed, trajectory.dt, q, s, logger=self.logger)
                steps = result.length
                if steps > 0:
                    report = masked_mse(result.frames, reference[:steps], trajectory.mask)
                    per_channel = masked_mse_per_channel(result.frames, reference[:steps], trajectory.mask)
                    mse_rows += [{"experiment": name, "q": q, "s": s, "t": t + 1, "value": v}
                                 for t, v in enumerate(report.per_step)]
                    channel_rows += [{"experiment": name, "q": q, "s": s, "t": t + 1, "channel": c, "value": v}
                                     for t in range(steps) for c, v in enumerate(per_channel[t])]
                    surviving_values.append(report.aggregate)
                    aggregate = report.aggregate
                else:
                    per_channel = None
                    aggregate = float("nan")

                if result.diverged:
                    divergences += 1
                    value = clamp_mse(aggregate, True, cap)
                    channel_values.append(np.full(trajectory.frames.shape[1], cap))
                else:
                    value = clamp_mse(aggregate, False, cap)
                    channel_values.append(np.minimum(per_channel.mean(axis=0), cap))
                    if steps >= 2:
                        change = temporal_change(result)
                        change_series.append(change)
                        change_rows += [{"experiment": name, "q": q, "s": s, "t": t + 1, "value": v}
                                        for t, v in enumerate(change)]
                    if steps >= 8:
                        spec = probe_spectrum(result, probe, mask=trajectory.mask, method=ecfg.spectrum_method)
                        spectrum_series.append(spec.weighted)
                        spectrum_freqs = spec.frequencies
                        spectrum_rows += [{"experiment": name, "q": q, "s": s, "f_m": f, "value": v}
                                          for f, v in zip(spec.frequencies, spec.weighted)]
                rollout_values.append(value)
                regime_values.setdefault(regime, []).append(value)

        aggregate_mse = float(np.mean(rollout_values))
        surviving_mse = float(np.mean(surviving_values)) if surviving_values else float("nan")
        self.logger.info(f"评估 {name}: 滚动 MSE={aggregate_mse:.6g}, 发散 {divergences}/{len(rollout_values)}")
        if divergences:
            self.logger.warning(f"{name}: {divergences} 次滚动发散, 其 MSE 已截断到 {ecfg.clamp_factor}x 真值方差")

        series_fields = ["experiment", "q", "s", "t", "value"]
        spectrum_fields = ["experiment", "q", "s", "f_m", "value"]
        envelope_fields = ["experiment", "t", "mean", "min", "max", "count"]
        spectrum_envelope_fields = ["experiment", "f_m", "mean", "min", "max", "count"]
        files: Dict[str, Tuple[List[str], List[Dict]]] = {
            "mse.csv": (series_fields, mse_rows),
            "mse_per_channel.csv": (["experiment", "q", "s", "t", "channel", "value"], channel_rows),
            "temporal_change.csv": (series_fields, change_rows),
            "temporal_change_reference.csv": (series_fields, ref_change_rows),
            "spectrum.csv": (spectrum_fields, spectrum_rows),
            "spectrum_reference.csv": (spectrum_fields, ref_spectrum_rows),
        }
        for filename, series, abscissa, fields, axis in (
                ("temporal_change_envelope.csv", change_series, None, envelope_fields, "t"),
                ("temporal_change_reference_envelope.csv", ref_change_series, None, envelope_fields, "t"),
                ("spectrum_envelope.csv", spectrum_series, spectrum_freqs, spectrum_envelope_fields, "f_m"),
                ("spectrum_reference_envelope.csv", ref_spectrum_series, ref_freqs, spectrum_envelope_fields, "f_m")):
            rows = []
            if series and len({len(s) for s in series}) == 1:
                rows = envelope_rows(name, aggregate_envelope(series, abscissa), axis)
            files[filename] = (fields, rows)

        regime_mse = {regime: float(np.mean(values)) for regime, values in sorted(regime_values.items())}
        files["summary.csv"] = (
            ["experiment", "regime", "mse", "rollouts"],
            [{"experiment": name, "regime": "all", "mse": aggregate_mse, "rollouts": len(rollout_values)}]
            + [{"experiment": name, "regime": r, "mse": v, "rollouts": len(regime_values[r])}
               for r, v in regime_mse.items()]
        )
        return EvaluationReport(
            experiment=name,
            aggregate_mse=aggregate_mse,
            surviving_mse=surviving_mse,
            channel_mse=np.mean(np.stack(channel_values), axis=0),
            divergence_count=divergences,
            rollout_count=len(rollout_values),
            regime_mse=regime_mse,
            files=files
        )

    @staticmethod
    def write_report(report: EvaluationReport, run_dir: RunDirectory, tag: str = ""):
        prefix = f"metrics/{tag}/" if tag else "metrics/"
        for filename, (fields, rows) in report.files.items():
            run_dir.write_csv(prefix + filename, fields, rows)

    def evaluate(self, checkpoint_path: Optional[str], dataset_path: Optional[str] = None,
                 config: Optional[ExperimentConfig] = None,
                 run_dir: Optional[RunDirectory] = None, tag: str = "") -> EvaluationReport:
        """
        从检查点评估; 归一化统计量取自检查点, 评估阶段从不重新拟合

        Args:
            checkpoint_path: 检查点路径 (桩模型时可为 None)
            dataset_path: 数据集路径, 默认取配置
            config: 覆盖 self.config
            run_dir: 输出目录
            tag: 指标子目录名
        """
        cfg = config or self.config
        dataset_path = dataset_path or cfg.data_path
        test = load_split(dataset_path, SPLIT_TEST, cfg.downsample)
        check_data_shape(test, cfg.model)

        params = None
        if cfg.training.stub_model == STUB_PERSISTENCE:
            stats = fit_normalization(load_split(dataset_path, SPLIT_TRAIN, cfg.downsample))
        else:
            if checkpoint_path is None:
                raise ExperimentError("评估需要检查点")
            checkpoint = load_checkpoint(checkpoint_path)
            stored = ModelConfig.from_dict(checkpoint.extra.get("model_config", {}))
            if stored != cfg.model:
                raise ProtocolMismatchError(f"检查点的模型配置与当前配置不一致: {stored} vs {cfg.model}")
            stats = NormStats.from_dict(checkpoint.extra["norm_stats"])
            params = checkpoint.params

        normalized = [normalize_trajectory(stats, t) for t in test]
        forecaster = self.build_forecaster(cfg, params)
        report = self.evaluate_forecaster(forecaster, normalized, cfg)
        if run_dir is not None:
            self.write_report(report, run_dir, tag)
        return report

    # ============ 实验协议 ============
    def _train_and_evaluate(self, cfg: ExperimentConfig, train: List[Trajectory], test: List[Trajectory],
                            run_dir: Optional[RunDirectory], tag: str) -> Tuple[EvaluationReport, int]:
        if cfg.training.stub_model == STUB_PERSISTENCE:
            stats = fit_normalization(train)
            forecaster = PersistenceForecaster()
            parameter_count = 0
        else:
            with self.monitor.phase(f"train:{tag}"):
                result = self.train(cfg, train, run_dir, tag)
            stats = result.norm_stats
            forecaster = self.build_forecaster(cfg, result.params)
            parameter_count = forecaster.model.parameter_count()
        normalized = [normalize_trajectory(stats, t) for t in test]
        with self.monitor.phase(f"evaluate:{tag}"):
            report = self.evaluate_forecaster(forecaster, normalized, cfg, experiment=tag)
        if run_dir is not None:
            self.write_report(report, run_dir, tag)
        return report, parameter_count

    def _load_train_test(self, cfg: ExperimentConfig) -> Tuple[List[Trajectory], List[Trajectory]]:
        train = load_split(cfg.data_path, SPLIT_TRAIN, cfg.downsample)
        test = load_split(cfg.data_path, SPLIT_TEST, cfg.downsample)
        check_data_shape(train + test, cfg.model)
        return train, test

    def run_target_loss_grid(self, config: Optional[ExperimentConfig] = None,
                             run_dir: Optional[RunDirectory] = None,
                             data: Optional[Tuple[List[Trajectory], List[Trajectory]]] = None,
                             prefix: str = "") -> Dict[Tuple[TargetKind, LossKind], CellResult]:
        """
        3×3 目标/损失网格: 九个配置只在 (target, loss) 上不同

        表格行为损失空间, 列为目标参数化; 每格取各种子的中位数。
        """
        template = config or self.config
        train, test = data if data is not None else self._load_train_test(template)
        cells: Dict[Tuple[TargetKind, LossKind], CellResult] = {}
        long_rows: List[Dict] = []

        for loss_kind in LOSS_ORDER:
            for target_kind in TARGET_ORDER:
                per_seed, channel_mse, divergences, counts = [], [], 0, set()
                for seed in template.seeds:
                    cfg = replace(template, target=target_kind, loss=loss_kind,
                                  training=replace(template.training, seed=seed))
                    tag = f"{prefix}{cfg.cell_name}/seed{seed}"
                    report, parameter_count = self._train_and_evaluate(cfg, train, test, run_dir, tag)
                    per_seed.append(report.aggregate_mse)
                    channel_mse.append(report.channel_mse)
                    divergences += report.divergence_count
                    counts.add(parameter_count)
                    long_rows.append({"target": target_kind.value, "loss": loss_kind.value, "seed": seed,
                                      "mse": report.aggregate_mse, "divergence_count": report.divergence_count,
                                      "parameter_count": parameter_count})
                if len(counts) != 1:
                    raise ExperimentError(f"同一格子内参数量不一致: {sorted(counts)}")
                cell = CellResult(target=target_kind, loss=loss_kind,
                                  mse=float(np.median(per_seed)),
                                  channel_mse=np.median(np.stack(channel_mse), axis=0),
                                  divergence_count=divergences, per_seed_mse=per_seed,
                                  parameter_count=counts.pop())
                cells[(target_kind, loss_kind)] = cell
                self.divergence_counts[f"{prefix}{target_kind.value}_{loss_kind.value}"] = divergences
                self.logger.info(f"格子 target={target_kind.value} loss={loss_kind.value}: "
                                 f"中位 MSE={cell.mse:.6g}, 发散 {divergences}")

        parameter_counts = {cell.parameter_count for cell in cells.values()}
        if len(parameter_counts) != 1:
            raise ExperimentError(f"网格格子之间参数量不一致: {sorted(parameter_counts)}")
        self.compute[f"{prefix}grid"] = {
            "updates": template.training.updates,
            "batch_size": template.training.batch_size,
            "parameter_count": parameter_counts.pop(),
            "sampler": {"method": template.sampler.method.value, "steps": template.sampler.steps,
                        "eps_cut": template.sampler.eps_cut},
            "seeds": list(template.seeds)
        }

        if run_dir is not None:
            table_rows = []
            for loss_kind in LOSS_ORDER:
                row = {"loss": loss_kind.value}
                for target_kind in TARGET_ORDER:
                    cell = cells[(target_kind, loss_kind)]
                    row[target_kind.value] = cell.mse
                    row[f"{target_kind.value}_diverged"] = cell.divergence_count
                table_rows.append(row)
            fields = ["loss"] + [t.value for t in TARGET_ORDER] + [f"{t.value}_diverged" for t in TARGET_ORDER]
            run_dir.write_csv(f"tables/{prefix}grid.csv", fields, table_rows)
            run_dir.write_csv(f"tables/{prefix}grid_cells.csv",
                              ["target", "loss", "seed", "mse", "divergence_count", "parameter_count"], long_rows)
        return cells

    def check_resolution_pair(self, template: ExperimentConfig) -> List[ExperimentConfig]:
        """在任何训练之前检查两档配置的 token 数与主干是否一致"""
        if len(template.resolution_pair) != 2:
            raise ProtocolMismatchError(f"分辨率协议需要恰好两档配置, 当前 {len(template.resolution_pair)} 档")
        configs = []
        for spec in template.resolution_pair:
            if spec.height % spec.patch_size or spec.width % spec.patch_size:
                raise ProtocolMismatchError(f"patch_size={spec.patch_size} 不能整除 {spec.height}x{spec.width}")
            model = replace(template.model, height=spec.height, width=spec.width, patch_size=spec.patch_size)
            configs.append(replace(template, model=model, downsample=spec.downsample))
        small, large = template.resolution_pair
        if small.num_tokens != large.num_tokens:
            raise ProtocolMismatchError(
                f"N mismatch: {small.height}x{small.width}/P={small.patch_size} 得到 N={small.num_tokens}, "
                f"{large.height}x{large.width}/P={large.patch_size} 得到 N={large.num_tokens}")
        return configs

    def run_resolution_protocol(self, config: Optional[ExperimentConfig] = None,
                                run_dir: Optional[RunDirectory] = None) -> Dict[str, Dict]:
        """在 token 数相同的两档分辨率上各跑一次网格, 输出逐格比值"""
        template = config or self.config
        configs = self.check_resolution_pair(template)
        for cfg in configs:
            check_dataset_header(cfg.data_path, cfg.model, cfg.downsample)
        names = ("small_patch", "large_patch")
        grids = {}
        for name, cfg in zip(names, configs):
            self.logger.info("=" * 60)
            self.logger.info(f"分辨率档 {name}: {cfg.model.height}x{cfg.model.width}, P={cfg.model.patch_size}, "
                             f"N={cfg.model.num_tokens}, C*P^2={cfg.model.patch_dim}")
            self.logger.info("=" * 60)
            grids[name] = self.run_target_loss_grid(cfg, run_dir, prefix=f"{name}/")

        small_cfg, large_cfg = configs
        rows = []
        for loss_kind in LOSS_ORDER:
            for target_kind in TARGET_ORDER:
                small = grids["small_patch"][(target_kind, loss_kind)]
                large = grids["large_patch"][(target_kind, loss_kind)]
                rows.append({
                    "target": target_kind.value,
                    "loss": loss_kind.value,
                    "mse_small_patch": small.mse,
                    "mse_large_patch": large.mse,
                    "ratio": large.mse / small.mse if small.mse > 0 else float("inf"),
                    "num_tokens": small_cfg.model.num_tokens,
                    "token_dim_small_patch": small_cfg.model.patch_dim,
                    "token_dim_large_patch": large_cfg.model.patch_dim
                })
        if run_dir is not None:
            run_dir.write_csv("tables/resolution_comparison.csv", list(rows[0].keys()), rows)
        return {"grids": grids, "rows": rows}

    def run_bottleneck_sweep(self, config: Optional[ExperimentConfig] = None,
                             dims: Optional[Sequence[int]] = None,
                             run_dir: Optional[RunDirectory] = None) -> List[Dict]:
        """瓶颈维度扫描, 第一行为无瓶颈基线; total_mse 为各通道 MSE 之和"""
        template = config or self.config
        dims = list(dims if dims is not None else template.bottleneck_dims)
        variants = [("baseline", None)] + [(f"d{d}", d) for d in dims]
        for _, d in variants:
            replace(template.model, bottleneck=d).check()

        train, test = self._load_train_test(template)
        rows = []
        for label, d in variants:
            per_seed, divergences = [], 0
            for seed in template.seeds:
                cfg = replace(template, model=replace(template.model, bottleneck=d),
                              training=replace(template.training, seed=seed))
                report, _ = self._train_and_evaluate(cfg, train, test, run_dir, f"bottleneck/{label}/seed{seed}")
                per_seed.append(float(np.sum(report.channel_mse)))
                divergences += report.divergence_count
            self.divergence_counts[f"bottleneck_{label}"] = divergences
            rows.append({"bottleneck": "none" if d is None else d, "label": label,
                         "total_mse": float(np.median(per_seed)), "divergence_count": divergences})
            self.logger.info(f"瓶颈 {label}: 总 MSE={rows[-1]['total_mse']:.6g}, 发散 {divergences}")
        if run_dir is not None:
            run_dir.write_csv("tables/bottleneck_sweep.csv", ["bottleneck", "label", "total_mse", "divergence_count"], rows)
        return rows

    # ============ 运行清单 ============
    def open_run(self, experiment: str) -> RunDirectory:
        run_id = f"{experiment}-{self.config.config_hash[:12]}" if self.config.config_hash else experiment
        return RunDirectory(self.config.out_dir, run_id)

    def finish_run(self, run_dir: RunDirectory, dataset_path: Optional[str] = None) -> RunManifest:
        dataset_path = dataset_path or self.config.data_path
        dataset_hash = dataset_content_hash(dataset_path) if os.path.exists(dataset_path) else ""
        stats = self.monitor.snapshot()
        manifest = RunManifest(
            run_id=run_dir.run_id,
            config_hash=self.config.config_hash,
            dataset_hash=dataset_hash,
            phases=stats.phases,
            divergence_counts=dict(self.divergence_counts),
            compute=dict(self.compute),
            host=stats.host,
            files=sorted(run_dir.files)
        )
        manifest.write(os.path.join(run_dir.root, "manifest.json"))
        self.logger.info(f"运行清单已写入: {os.path.join(run_dir.root, 'manifest.json')} ({len(manifest.files)} 个文件)")
        return manifest
