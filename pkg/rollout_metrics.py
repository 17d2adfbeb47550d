import os
import csv
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from ajit_model import ModelError
from rectified_flow import FlowError


logger = logging.getLogger(__name__)

FrameSource = Union["RolloutResult", np.ndarray]


class MetricsError(Exception):
    """评估指标错误"""
    pass


@dataclass
class RolloutResult:
    """
    一次自由滚动的结果

    frames 只包含生成的帧, 形状 (T_roll, C, H, W); diverged 为 True 时
    frames 是出现非有限值之前的部分。
    """
    q: int
    s: int
    frames: np.ndarray
    dt: float
    theta: float
    diverged: bool = False
    diverged_at: Optional[int] = None

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class SeriesEnvelope:
    """逐点均值与最小/最大包络"""
    abscissa: np.ndarray
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray
    count: int


@dataclass
class ProbeSpec:
    """探针位置 (row, col) 与通道"""
    row: int
    col: int
    channel: int = 1

    @classmethod
    def default(cls, height: int, width: int, channel: int = 1) -> 'ProbeSpec':
        return cls(row=height // 2, col=(3 * width) // 4, channel=channel)

    def validate(self, field_shape: Sequence[int], mask: Optional[np.ndarray] = None):
        channels, height, width = field_shape
        if not (0 <= self.channel < channels and 0 <= self.row < height and 0 <= self.col < width):
            raise MetricsError(f"探针越界: ({self.channel}, {self.row}, {self.col}) 不在 {tuple(field_shape)} 内")
        if mask is not None and mask[self.row, self.col]:
            raise MetricsError(f"探针 ({self.row}, {self.col}) 位于被掩盖的格点上")


@dataclass
class Spectrum:
    """单边功率谱 (不含直流与奈奎斯特)"""
    frequencies: np.ndarray
    power: np.ndarray

    @property
    def weighted(self) -> np.ndarray:
        return self.frequencies ** 2 * self.power


@dataclass
class MSEReport:
    per_step: np.ndarray
    aggregate: float


# ============ 滚动 ============
def rollout(forecaster, init_context: np.ndarray, theta: float, horizon: int, seed: int,
            dt: float = 1.0, q: int = 0, s: int = 0,
            logger: Optional[logging.Logger] = None) -> RolloutResult:
    """
    自回归自由滚动: 每一步的生成帧滑入上下文窗口

    Args:
        forecaster: 提供 sample_next(context, theta, seed) 的预测器
        init_context: (k, C, H, W) 真值上下文
        theta: 条件参数
        horizon: 生成的帧数 Hr
        seed: 基础种子, 每步使用流 (seed, q, s, step)
        dt: 帧间隔
        q: 测试轨迹编号
        s: 随机样本编号

    Returns:
        RolloutResult; 出现非有限帧时截断并标记 diverged
    """
    log = logger or logging.getLogger(__name__)
    if horizon < 1:
        raise MetricsError(f"滚动步数必须 >= 1, 当前值: {horizon}")
    context = np.array(init_context, dtype=np.float64)
    frames: List[np.ndarray] = []
    diverged_at = None

    for step in range(horizon):
        try:
            frame = forecaster.sample_next(context, theta, [seed, q, s, step])
        except (FlowError, ModelError) as e:
            log.warning(f"滚动发散 (q={q}, s={s}, step={step}): {e}")
            diverged_at = step
            break
        if not np.all(np.isfinite(frame)):
            log.warning(f"滚动发散 (q={q}, s={s}, step={step}): 生成帧包含 NaN/Inf")
            diverged_at = step
            break
        frames.append(frame)
        context = np.concatenate([context[1:], frame[None]], axis=0)

    shape = (0,) + tuple(init_context.shape[1:])
    stacked = np.stack(frames) if frames else np.empty(shape)
    return RolloutResult(q=q, s=s, frames=stacked, dt=dt, theta=theta,
                         diverged=diverged_at is not None, diverged_at=diverged_at)


# ============ 逐点误差 ============
def _check_pair(pred: np.ndarray, ref: np.ndarray):
    if pred.shape[0] != ref.shape[0]:
        raise MetricsError(f"length mismatch: 预测 {pred.shape[0]} 帧, 参考 {ref.shape[0]} 帧")
    if pred.shape != ref.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {ref.shape}")


def _keep_mask(mask: Optional[np.ndarray], height: int, width: int) -> np.ndarray:
    if mask is None:
        return np.ones((height, width), dtype=bool)
    keep = ~np.asarray(mask, dtype=bool)
    if not keep.any():
        raise MetricsError("all-masked grid: 没有可评估的格点")
    return keep


def masked_mse_per_channel(pred: np.ndarray, ref: np.ndarray,
                           mask: Optional[np.ndarray] = None) -> np.ndarray:
    """(T, C) 逐步逐通道 MSE, 只统计未被掩盖的格点"""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(pred, ref)
    keep = _keep_mask(mask, pred.shape[-2], pred.shape[-1])
    sq = (pred - ref) ** 2
    return sq[..., keep].mean(axis=-1)


def masked_mse(pred: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> MSEReport:
    """逐步 MSE 与其时间平均"""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(pred, ref)
    keep = _keep_mask(mask, pred.shape[-2], pred.shape[-1])
    sq = (pred - ref) ** 2
    per_step = sq[..., keep].mean(axis=(1, 2))
    aggregate = float(per_step.mean()) if per_step.size else float("nan")
    return MSEReport(per_step=per_step, aggregate=aggregate)


def clamp_mse(value: float, diverged: bool, cap: float) -> float:
    """发散或非有限的 MSE 截断到上限, 用于表格对齐"""
    if diverged or not np.isfinite(value):
        return float(cap)
    return float(min(value, cap))


# ============ 时间稳定性 ============
def _frames_and_dt(source: FrameSource, dt: Optional[float]):
    if isinstance(source, RolloutResult):
        return source.frames, source.dt if dt is None else dt
    if dt is None:
        raise MetricsError("直接传入帧数组时必须给出 dt")
    return np.asarray(source, dtype=np.float64), dt


def temporal_change(source: FrameSource, dt: Optional[float] = None, absolute: bool = True) -> np.ndarray:
    """
    d_t = mean_{c,i,j} |x_t - x_{t-1}| / Δt, t = 1..T-1

    absolute=False 时返回带符号的均值
    """
    frames, dt = _frames_and_dt(source, dt)
    if dt <= 0:
        raise MetricsError(f"dt 必须为正数, 当前值: {dt}")
    if frames.shape[0] < 2:
        raise MetricsError(f"至少需要 2 帧, 当前 {frames.shape[0]} 帧")
    diffs = np.diff(frames, axis=0) / dt
    if absolute:
        diffs = np.abs(diffs)
    return diffs.reshape(diffs.shape[0], -1).mean(axis=1)


def aggregate_envelope(series: Sequence[np.ndarray], abscissa: Optional[np.ndarray] = None) -> SeriesEnvelope:
    """逐点均值/最小/最大; 求和前按值排序, 结果与输入顺序无关"""
    if len(series) == 0:
        raise MetricsError("empty input: 至少需要一条序列")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise MetricsError(f"序列长度不一致: {sorted(lengths)}")
    stacked = np.sort(np.stack([np.asarray(s, dtype=np.float64) for s in series]), axis=0)
    low = stacked[0]
    high = stacked[-1]
    mean = np.clip(stacked.sum(axis=0) / stacked.shape[0], low, high)
    if abscissa is None:
        abscissa = np.arange(1, stacked.shape[1] + 1, dtype=np.float64)
    return SeriesEnvelope(abscissa=np.asarray(abscissa, dtype=np.float64),
                          mean=mean, min=low, max=high, count=stacked.shape[0])


# ============ 频谱 ============
def dft(signal: np.ndarray, method: str = "direct") -> np.ndarray:
    """
    完整离散傅里叶变换 ŝ_m = Σ_t s_t·exp(-i2π m t / T)

    direct 为 O(T²) 直接求和 (相位按 m·t mod T 计算); fft 调用 numpy.fft
    """
    s = np.asarray(signal, dtype=np.float64)
    n = s.shape[0]
    if method == "fft":
        return np.fft.fft(s)
    if method != "direct":
        raise MetricsError(f"未知的 DFT 方法: {method}")
    index = np.arange(n)
    phase = np.outer(index, index) % n
    kernel = np.exp(-2j * np.pi * phase / n)
    return kernel @ s.astype(np.complex128)


def full_power_spectrum(signal: np.ndarray, method: str = "direct") -> np.ndarray:
    """所有频点的 |ŝ|² (含直流与奈奎斯特)"""
    return np.abs(dft(signal, method)) ** 2


def signal_spectrum(signal: np.ndarray, dt: float, method: str = "direct") -> Spectrum:
    """m = 1..⌊T/2⌋-1, f_m = m/(T·Δt), P = |ŝ(f_m)|²"""
    s = np.asarray(signal, dtype=np.float64)
    n = s.shape[0]
    if n < 8:
        raise MetricsError(f"频谱至少需要 8 个采样, 当前 {n} 个")
    if dt <= 0:
        raise MetricsError(f"dt 必须为正数, 当前值: {dt}")
    power = full_power_spectrum(s, method)
    bins = np.arange(1, n // 2)
    return Spectrum(frequencies=bins / (n * dt), power=power[bins])


def probe_signal(source: FrameSource, probe: ProbeSpec, mask: Optional[np.ndarray] = None) -> np.ndarray:
    frames = source.frames if isinstance(source, RolloutResult) else np.asarray(source, dtype=np.float64)
    probe.validate(frames.shape[1:], mask)
    return frames[:, probe.channel, probe.row, probe.col]


def probe_spectrum(source: FrameSource, probe: ProbeSpec, dt: Optional[float] = None,
                   mask: Optional[np.ndarray] = None, method: str = "direct") -> Spectrum:
    """探针时间序列的单边功率谱; 绘图量为 Spectrum.weighted = f²·P"""
    frames, dt = _frames_and_dt(source, dt)
    return signal_spectrum(probe_signal(frames, probe, mask), dt, method)


# ============ CSV 输出 ============
def format_value(value) -> str:
    """浮点数用 17 位有效数字, 保证逐字节可复现"""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Dict]):
    """写 CSV (固定列顺序, '\\n' 换行)"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: format_value(value) for key, value in row.items()})


def envelope_rows(experiment: str, envelope: SeriesEnvelope, abscissa_name: str = "t") -> List[Dict]:
    return [
        {
            "experiment": experiment,
            abscissa_name: envelope.abscissa[i],
            "mean": envelope.mean[i],
            "min": envelope.min[i],
            "max": envelope.max[i],
            "count": envelope.count
        }
        for i in range(len(envelope.mean))
    ]
