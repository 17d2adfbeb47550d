import os
import json
import struct
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


logger = logging.getLogger(__name__)

DATASET_MAGIC = b"RDSET1"
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"


class FieldDataError(Exception):
    """数据生成/加载错误基类"""
    pass


class SimulationError(FieldDataError):
    """求解器发散或稳定性条件不满足"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class DatasetFormatError(FieldDataError):
    """数据集文件格式错误"""
    pass


class NormalizationError(FieldDataError):
    """归一化统计量非法"""
    pass


class SplitLeakageError(FieldDataError):
    """试图用非训练集拟合归一化统计量"""
    pass


@dataclass
class ReactionDiffusionConfig:
    """Gray-Scott 合成数据的全部常数"""
    diffusivity_u: float = 0.16
    diffusivity_v: float = 0.08
    feed_kill_low: Tuple[float, float] = (0.030, 0.055)
    feed_kill_high: Tuple[float, float] = (0.042, 0.062)
    grid_spacing: float = 1.0
    dt_solver: float = 0.78125
    substeps_per_frame: int = 40
    warmup_substeps: int = 0
    perturbation_amplitude: float = 1.0
    perturbation_fraction: float = 0.125
    reaction_enabled: bool = True
    record_float32: bool = True

    @property
    def stability_limit(self) -> float:
        return self.grid_spacing ** 2 / (4.0 * max(self.diffusivity_u, self.diffusivity_v))

    @property
    def frame_dt(self) -> float:
        return self.dt_solver * self.substeps_per_frame


@dataclass
class Trajectory:
    """
    一条轨迹

    frames 形状为 (T, C, H, W); mask 为 (H, W) 布尔网格, True 表示被排除的格点。
    control 为保留字段, 目前不支持。
    """
    frames: np.ndarray
    dt: float
    theta: float
    mask: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None
    split: str = SPLIT_TRAIN
    seed: int = 0

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def field_shape(self) -> Tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass
class TrainingExample:
    """一个下一步预测样本: k 帧上下文, 目标帧, θ"""
    context: np.ndarray
    target: np.ndarray
    theta: float


@dataclass
class NormStats:
    """逐通道均值与标准差 (仅在训练集上计算)"""
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> 'NormStats':
        return cls(mean=np.array(data["mean"], dtype=np.float64),
                   std=np.array(data["std"], dtype=np.float64))


# ============ 合成数据生成 ============
def theta_to_feed_kill(theta: float, config: ReactionDiffusionConfig) -> Tuple[float, float]:
    """θ 在两个端点之间线性插值 (F, k)"""
    f0, k0 = config.feed_kill_low
    f1, k1 = config.feed_kill_high
    return f0 + theta * (f1 - f0), k0 + theta * (k1 - k0)


def _laplacian(a: np.ndarray, h: float) -> np.ndarray:
    """周期边界的五点拉普拉斯算子"""
    return (np.roll(a, 1, axis=0) + np.roll(a, -1, axis=0)
            + np.roll(a, 1, axis=1) + np.roll(a, -1, axis=1) - 4.0 * a) / (h * h)


def _initial_state(grid: Tuple[int, int], seed: int,
                   config: ReactionDiffusionConfig) -> Tuple[np.ndarray, np.ndarray]:
    """均匀稳态 (u=1, v=0) 加上一个随机位置的方形扰动"""
    height, width = grid
    u = np.ones((height, width))
    v = np.zeros((height, width))
    amplitude = config.perturbation_amplitude
    if amplitude == 0:
        return u, v

    rng = np.random.default_rng(seed)
    size = max(2, int(round(min(height, width) * config.perturbation_fraction)))
    top = int(rng.integers(0, height))
    left = int(rng.integers(0, width))
    rows = (top + np.arange(size)) % height
    cols = (left + np.arange(size)) % width
    block = np.ix_(rows, cols)
    noise = rng.random((size, size))
    u[block] = 1.0 - amplitude * (0.5 + 0.02 * noise)
    v[block] = amplitude * (0.25 + 0.02 * noise)
    return u, v


def simulate_reaction_diffusion(grid: Tuple[int, int], steps: int, theta: float, seed: int,
                                dt_solver: Optional[float] = None,
                                config: Optional[ReactionDiffusionConfig] = None) -> Trajectory:
    """
    生成一条 Gray-Scott 双组分轨迹 (显式欧拉, 周期网格)

    Args:
        grid: (H, W)
        steps: 记录的帧数 T
        theta: [0, 1] 内的条件参数
        seed: 初始扰动的随机种子
        dt_solver: 求解器步长, 为 None 时使用配置值
        config: 物理常数

    Returns:
        C=2 的 Trajectory
    """
    config = config or ReactionDiffusionConfig()
    if dt_solver is not None:
        config = replace(config, dt_solver=dt_solver)
    height, width = grid
    if height < 16 or width < 16:
        raise SimulationError(f"网格过小: {height}x{width}, 至少需要 16x16")
    if steps < 1:
        raise SimulationError(f"帧数必须 >= 1, 当前值: {steps}")
    if not 0.0 <= theta <= 1.0:
        raise SimulationError(f"theta 必须在 [0, 1] 内, 当前值: {theta}")
    if config.dt_solver <= 0 or config.dt_solver > config.stability_limit:
        raise SimulationError(
            f"stability condition violated: dt_solver={config.dt_solver} > h^2/(4*maxD)={config.stability_limit}")

    feed, kill = theta_to_feed_kill(theta, config)
    du, dv, h, dt = config.diffusivity_u, config.diffusivity_v, config.grid_spacing, config.dt_solver
    u, v = _initial_state(grid, seed, config)

    def advance(u, v):
        lap_u = _laplacian(u, h)
        lap_v = _laplacian(v, h)
        if config.reaction_enabled:
            uvv = u * v * v
            u_next = u + dt * (du * lap_u - uvv + feed * (1.0 - u))
            v_next = v + dt * (dv * lap_v + uvv - (feed + kill) * v)
        else:
            u_next = u + dt * du * lap_u
            v_next = v + dt * dv * lap_v
        return u_next, v_next

    substep = 0
    for _ in range(config.warmup_substeps):
        u, v = advance(u, v)
        substep += 1
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise SimulationError(f"预热阶段出现非有限状态 (substep {substep})", step=substep)

    frames = np.empty((steps, 2, height, width))
    for t in range(steps):
        if t > 0:
            for _ in range(config.substeps_per_frame):
                u, v = advance(u, v)
                substep += 1
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SimulationError(f"求解器发散: 第 {t} 帧 (substep {substep}) 出现 NaN/Inf", step=substep)
        frames[t, 0] = u
        frames[t, 1] = v

    if config.record_float32:
        frames = frames.astype(np.float32).astype(np.float64)

    return Trajectory(frames=frames, dt=config.frame_dt, theta=float(theta), seed=int(seed))


def generate_trajectories(thetas: Sequence[float], seeds: Sequence[int], grid: Tuple[int, int],
                          frames: int, split: str = SPLIT_TRAIN,
                          config: Optional[ReactionDiffusionConfig] = None) -> List[Trajectory]:
    """对 (θ, seed) 的笛卡尔积逐个生成轨迹, 顺序固定为 θ 外层、seed 内层"""
    trajectories = []
    for theta in thetas:
        for seed in seeds:
            trajectory = simulate_reaction_diffusion(grid, frames, theta, seed, config=config)
            trajectory.split = split
            trajectories.append(trajectory)
            logger.debug(f"已生成轨迹: theta={theta}, seed={seed}, split={split}")
    return trajectories


def theta_regime(theta: float, train_thetas: Sequence[float]) -> str:
    """测试 θ 落在训练区间内为 interpolation, 否则为 extrapolation"""
    if not train_thetas:
        return "extrapolation"
    if min(train_thetas) <= theta <= max(train_thetas):
        return "interpolation"
    return "extrapolation"


# ============ 数据集文件 ============
def _storage_dtype(trajectories: Sequence[Trajectory]) -> str:
    """所有帧都可无损表示为 float32 时使用 float32 存储"""
    for trajectory in trajectories:
        if not np.array_equal(trajectory.frames.astype(np.float32).astype(np.float64), trajectory.frames):
            return "float64"
    return "float32"


def write_dataset(trajectories: Sequence[Trajectory], path: str):
    """
    写入数据集: 魔数 + 头长度(uint32 LE) + JSON 头 + 各轨迹帧数据 (+ 掩码字节)

    Args:
        trajectories: 非空且 (C, H, W) 一致的轨迹列表
        path: 输出路径 (*.rdset)
    """
    if not trajectories:
        raise DatasetFormatError("empty dataset")
    channels, height, width = trajectories[0].field_shape
    for index, trajectory in enumerate(trajectories):
        if trajectory.field_shape != (channels, height, width):
            raise DatasetFormatError(
                f"shape inconsistency: 轨迹 {index} 为 {trajectory.field_shape}, 期望 {(channels, height, width)}")
        if trajectory.control is not None:
            raise DatasetFormatError(f"轨迹 {index} 带有控制输入, 当前不支持")
        if trajectory.mask is not None and trajectory.mask.shape != (height, width):
            raise DatasetFormatError(f"轨迹 {index} 的掩码形状 {trajectory.mask.shape} 与网格不一致")

    dtype = _storage_dtype(trajectories)
    header = {
        "format": 1,
        "count": len(trajectories),
        "C": channels,
        "H": height,
        "W": width,
        "dtype": dtype,
        "thetas": [float(t.theta) for t in trajectories],
        "trajectories": [
            {
                "T": t.length,
                "dt": float(t.dt),
                "theta": float(t.theta),
                "seed": int(t.seed),
                "split": t.split,
                "has_mask": t.mask is not None
            }
            for t in trajectories
        ]
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    storage = "<f4" if dtype == "float32" else "<f8"

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for trajectory in trajectories:
            f.write(np.ascontiguousarray(trajectory.frames, dtype=storage).tobytes())
            if trajectory.mask is not None:
                f.write(np.ascontiguousarray(trajectory.mask, dtype=np.uint8).tobytes())
    os.replace(tmp_path, path)
    logger.info(f"数据集已写入: {path} ({len(trajectories)} 条轨迹, {channels}x{height}x{width}, {dtype})")


def read_dataset_header(path: str) -> Tuple[Dict, int]:
    """读取并校验数据集头部, 返回 (header, 数据起始偏移)"""
    with open(path, "rb") as f:
        prefix = f.read(len(DATASET_MAGIC) + 4)
        if prefix[:len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic: {path} 不是数据集文件")
        if len(prefix) < len(DATASET_MAGIC) + 4:
            raise DatasetFormatError(f"truncated header: {path}")
        (header_len,) = struct.unpack("<I", prefix[len(DATASET_MAGIC):])
        raw = f.read(header_len)
    if len(raw) != header_len:
        raise DatasetFormatError(f"truncated header: {path}")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"头部无法解析: {e}")
    for key in ("count", "C", "H", "W", "dtype", "trajectories"):
        if key not in header:
            raise DatasetFormatError(f"头部缺少字段: {key}")
    if header["count"] != len(header["trajectories"]):
        raise DatasetFormatError(f"头部 count={header['count']} 与轨迹条目数 {len(header['trajectories'])} 不一致")
    return header, len(DATASET_MAGIC) + 4 + header_len


def read_dataset(path: str, splits: Optional[Sequence[str]] = None) -> List[Trajectory]:
    """
    读取数据集, 帧数据提升为 float64

    Args:
        path: 数据集路径
        splits: 只返回这些 split 的轨迹; None 表示全部
    """
    header, offset = read_dataset_header(path)
    with open(path, "rb") as f:
        blob = f.read()

    channels, height, width = header["C"], header["H"], header["W"]
    storage = "<f4" if header["dtype"] == "float32" else "<f8"
    itemsize = 4 if header["dtype"] == "float32" else 8
    trajectories = []
    for entry in header["trajectories"]:
        count = entry["T"] * channels * height * width
        nbytes = count * itemsize
        if offset + nbytes > len(blob):
            raise DatasetFormatError(f"truncated payload: theta={entry['theta']}")
        frames = np.frombuffer(blob[offset:offset + nbytes], dtype=storage).astype(np.float64)
        frames = frames.reshape(entry["T"], channels, height, width)
        offset += nbytes

        mask = None
        if entry["has_mask"]:
            mask_bytes = height * width
            if offset + mask_bytes > len(blob):
                raise DatasetFormatError(f"truncated payload: 掩码 theta={entry['theta']}")
            mask = np.frombuffer(blob[offset:offset + mask_bytes], dtype=np.uint8).astype(bool).reshape(height, width)
            offset += mask_bytes

        if splits is None or entry["split"] in splits:
            trajectories.append(Trajectory(
                frames=frames,
                dt=entry["dt"],
                theta=entry["theta"],
                mask=mask,
                split=entry["split"],
                seed=entry["seed"]
            ))
    if offset != len(blob):
        raise DatasetFormatError(f"文件末尾存在多余的 {len(blob) - offset} 字节")
    return trajectories


def dataset_content_hash(path: str) -> str:
    """git 风格的内容哈希: sha1(b'blob <size>\\0' + 内容)"""
    with open(path, "rb") as f:
        content = f.read()
    digest = hashlib.sha1()
    digest.update(f"blob {len(content)}\0".encode("utf-8"))
    digest.update(content)
    return digest.hexdigest()


# ============ 归一化 ============
def fit_normalization(trajectories: Sequence[Trajectory]) -> NormStats:
    """
    在训练集上计算逐通道均值与总体标准差

    Raises:
        SplitLeakageError: 传入了非训练集轨迹
        NormalizationError: 无帧或某通道方差为零
    """
    if not trajectories:
        raise NormalizationError("至少需要一帧数据")
    for trajectory in trajectories:
        if trajectory.split != SPLIT_TRAIN:
            raise SplitLeakageError(f"归一化只能在训练集上拟合, 收到 split={trajectory.split} (theta={trajectory.theta})")

    stacked = np.concatenate([t.frames for t in trajectories], axis=0)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    for channel, s in enumerate(std):
        if not s > 0:
            raise NormalizationError(f"zero variance in channel {channel}")
    return NormStats(mean=mean, std=std)


def apply_normalization(stats: NormStats, fields: np.ndarray) -> np.ndarray:
    """(..., C, H, W) 逐通道标准化"""
    return (fields - stats.mean[:, None, None]) / stats.std[:, None, None]


def invert_normalization(stats: NormStats, fields: np.ndarray) -> np.ndarray:
    return fields * stats.std[:, None, None] + stats.mean[:, None, None]


def normalize_trajectory(stats: NormStats, trajectory: Trajectory) -> Trajectory:
    return replace(trajectory, frames=apply_normalization(stats, trajectory.frames))


# ============ 样本与重采样 ============
def make_examples(trajectory: Trajectory, k: int) -> List[TrainingExample]:
    """滑动窗口切分: 样本 i 的上下文为帧 [i, i+k), 目标为帧 i+k"""
    if k < 1:
        raise FieldDataError(f"context length must be >= 1, 当前值: {k}")
    if trajectory.length < k + 1:
        raise FieldDataError(f"轨迹长度 {trajectory.length} 不足以构造 k={k} 的样本 (需要 >= {k + 1})")
    return [
        TrainingExample(
            context=trajectory.frames[i:i + k],
            target=trajectory.frames[i + k],
            theta=trajectory.theta
        )
        for i in range(trajectory.length - k)
    ]


def _block_mean(values: np.ndarray, factor: int, axis: int) -> np.ndarray:
    """沿某一轴做块均值; 2 的幂因子逐级两两平均, 复制块的均值因此精确"""
    axis = axis % values.ndim
    if factor & (factor - 1) == 0:
        while factor > 1:
            even = np.take(values, np.arange(0, values.shape[axis], 2), axis=axis)
            odd = np.take(values, np.arange(1, values.shape[axis], 2), axis=axis)
            values = (even + odd) * 0.5
            factor //= 2
        return values
    shape = values.shape[:axis] + (values.shape[axis] // factor, factor) + values.shape[axis + 1:]
    return values.reshape(shape).mean(axis=axis + 1)


def downsample(field_values: np.ndarray, factor: int) -> np.ndarray:
    """(..., H, W) 块均值池化"""
    if factor < 1:
        raise FieldDataError(f"下采样因子必须 >= 1, 当前值: {factor}")
    height, width = field_values.shape[-2:]
    if height % factor or width % factor:
        raise FieldDataError(f"下采样因子 {factor} 不能整除 {height}x{width}")
    pooled = _block_mean(np.asarray(field_values, dtype=np.float64), factor, axis=-2)
    return _block_mean(pooled, factor, axis=-1)


def upsample(field_values: np.ndarray, factor: int) -> np.ndarray:
    """(..., H, W) 复制式上采样"""
    if factor < 1:
        raise FieldDataError(f"上采样因子必须 >= 1, 当前值: {factor}")
    return np.repeat(np.repeat(field_values, factor, axis=-2), factor, axis=-1)


def downsample_trajectory(trajectory: Trajectory, factor: int) -> Trajectory:
    mask = None
    if trajectory.mask is not None:
        mask = downsample(trajectory.mask.astype(np.float64), factor) > 0
    return replace(trajectory, frames=downsample(trajectory.frames, factor), mask=mask)
