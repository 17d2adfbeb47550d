import logging
from enum import Enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core import Graph


logger = logging.getLogger(__name__)

TAU_MIN = 1e-3

SeedLike = Union[int, Sequence[int]]
VelocityOracle = Callable[[np.ndarray, float], np.ndarray]


class FlowError(Exception):
    """扩散数学相关错误基类"""
    pass


class GuardBandError(FlowError):
    """τ 落在需要除法的换算的保护带之外"""
    pass


class NonFiniteStateError(FlowError):
    """ODE 积分中途出现非有限状态"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class NonFiniteLossError(FlowError):
    """训练损失非有限"""
    pass


class TargetKind(Enum):
    """网络输出的量"""
    X = "x"
    V = "v"
    EPS = "eps"


class LossKind(Enum):
    """回归残差所在的空间"""
    X_LOSS = "x"
    V_LOSS = "v"
    EPS_LOSS = "eps"

    @property
    def space(self) -> TargetKind:
        return TargetKind(self.value)


class SamplerMethod(Enum):
    EULER = "euler"
    HEUN = "heun"


@dataclass
class SamplerConfig:
    """
    固定步长 ODE 采样器配置: 从 τ=0 积分到 τ=1-eps_cut

    HEUN 的最后一步是欧拉步, 所以 steps=1 时 HEUN 与 EULER 结果相同。
    """
    method: SamplerMethod = SamplerMethod.HEUN
    steps: int = 20
    eps_cut: float = 1e-3

    def validate(self):
        if self.steps < 1:
            raise FlowError(f"ODE 步数必须 >= 1, 当前值: {self.steps}")
        if not 0.0 < self.eps_cut < 0.5:
            raise FlowError(f"eps_cut 必须在 (0, 0.5) 内, 当前值: {self.eps_cut}")


@dataclass
class CouplingSample:
    """(x, ε, τ, z) 四元组, z = τx + (1-τ)ε"""
    x: np.ndarray
    eps: np.ndarray
    tau: float
    z: np.ndarray

    @classmethod
    def draw(cls, x: np.ndarray, tau: float, rng: np.random.Generator) -> 'CouplingSample':
        eps = rng.standard_normal(x.shape)
        return cls(x=x, eps=eps, tau=float(tau), z=couple(x, eps, tau))


# ============ 耦合与目标速度 ============
def couple(x: np.ndarray, eps: np.ndarray, tau: float) -> np.ndarray:
    """z = τ·x + (1-τ)·ε"""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise FlowError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    if not 0.0 <= tau <= 1.0:
        raise FlowError(f"tau 必须在 [0, 1] 内, 当前值: {tau}")
    return tau * x + (1.0 - tau) * eps


def target_velocity(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """v⋆ = x - ε"""
    return np.asarray(x, dtype=np.float64) - np.asarray(eps, dtype=np.float64)


def target_velocity_from_state(x: np.ndarray, z: np.ndarray, tau: float) -> np.ndarray:
    """v⋆ = (x - z)/(1 - τ)"""
    if tau >= 1.0:
        raise FlowError(f"tau={tau} 时 (x - z)/(1 - tau) 无定义")
    return (np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)) / (1.0 - tau)


# ============ 参数化换算 ============
def needs_division(source: TargetKind, target: TargetKind) -> bool:
    """换算是否需要除以 τ 或 1-τ"""
    if source == target:
        return False
    return source in (TargetKind.X, TargetKind.EPS)


def conversion_coefficients(source: TargetKind, target: TargetKind, tau: float) -> Tuple[float, float]:
    """
    所有换算都是 α·pred + β·z 的形式

    Returns:
        (α, β)
    """
    if source == target:
        return 1.0, 0.0
    if source == TargetKind.X:
        if target == TargetKind.V:
            return 1.0 / (1.0 - tau), -1.0 / (1.0 - tau)
        return -tau / (1.0 - tau), 1.0 / (1.0 - tau)
    if source == TargetKind.V:
        if target == TargetKind.X:
            return 1.0 - tau, 1.0
        return -tau, 1.0
    if target == TargetKind.X:
        return -(1.0 - tau) / tau, 1.0 / tau
    return -1.0 / tau, 1.0 / tau


def check_guard_band(source: TargetKind, target: TargetKind, tau: float, tau_min: float = TAU_MIN):
    if needs_division(source, target) and not tau_min <= tau <= 1.0 - tau_min:
        raise GuardBandError(
            f"{source.value}->{target.value} 需要 tau 在 [{tau_min}, {1.0 - tau_min}] 内, 当前值: {tau}")


def convert(prediction: np.ndarray, source: TargetKind, target: TargetKind, z: np.ndarray,
            tau: float, tau_min: float = TAU_MIN) -> np.ndarray:
    """
    在 x / v / ε 参数化之间换算

    Args:
        prediction: 以 source 解释的网络输出
        source: 输出的参数化
        target: 目标参数化
        z: 当前带噪状态
        tau: 扩散时间
        tau_min: 保护带宽度

    Raises:
        GuardBandError: 需要除法的换算且 tau 在保护带之外
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if source == target:
        return prediction
    check_guard_band(source, target, tau, tau_min)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != prediction.shape:
        raise FlowError(f"shape mismatch: prediction {prediction.shape} vs z {z.shape}")
    alpha, beta = conversion_coefficients(source, target, tau)
    return alpha * prediction + beta * z


def ground_truth(kind: TargetKind, sample: CouplingSample) -> np.ndarray:
    """耦合样本在某参数化下的真值"""
    if kind == TargetKind.X:
        return sample.x
    if kind == TargetKind.EPS:
        return sample.eps
    return target_velocity(sample.x, sample.eps)


# ============ 训练损失 ============
def sample_training_tau(rng: np.random.Generator, target_kind: TargetKind, loss_kind: LossKind,
                        tau_min: float = TAU_MIN) -> float:
    """τ ~ U[0, 1); 需要除法换算的格子再截断到保护带内"""
    tau = float(rng.random())
    if needs_division(target_kind, loss_kind.space):
        tau = min(max(tau, tau_min), 1.0 - tau_min)
    return tau


def training_loss(target_kind: TargetKind, loss_kind: LossKind, y: np.ndarray,
                  sample: CouplingSample, tau_min: float = TAU_MIN) -> float:
    """把 y 换算到 loss_kind 所在空间, 与该空间的真值求均方误差"""
    prediction = convert(y, target_kind, loss_kind.space, sample.z, sample.tau, tau_min)
    truth = ground_truth(loss_kind.space, sample)
    loss = float(np.mean((prediction - truth) ** 2))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"损失非有限: {loss} (target={target_kind.value}, loss={loss_kind.value}, tau={sample.tau})")
    return loss


def training_loss_node(graph: Graph, y_node: int, target_kind: TargetKind, loss_kind: LossKind,
                       sample: CouplingSample, tau_min: float = TAU_MIN) -> int:
    """training_loss 的计算图版本, 返回标量节点id"""
    space = loss_kind.space
    check_guard_band(target_kind, space, sample.tau, tau_min)
    alpha, beta = conversion_coefficients(target_kind, space, sample.tau)
    offset = beta * sample.z - ground_truth(space, sample)
    residual = graph.add_const(graph.scale(y_node, alpha), offset)
    loss = graph.mean(graph.mul(residual, residual))
    value = float(graph.value(loss))
    if not np.isfinite(value):
        raise NonFiniteLossError(f"损失非有限: {value} (target={target_kind.value}, loss={loss_kind.value}, tau={sample.tau})")
    return loss


# ============ ODE 采样 ============
def tau_grid(cfg: SamplerConfig) -> np.ndarray:
    return np.linspace(0.0, 1.0 - cfg.eps_cut, cfg.steps + 1)


def sample_ode(velocity_oracle: VelocityOracle, z0: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """
    固定步长显式积分 dz/dτ = v(z, τ), τ: 0 -> 1-ε

    Heun 在除最后一步外的每一步做预测-校正; 最后一步退化为欧拉步,
    因此预言机永远不会在 τ >= 1-ε 处被调用。
    """
    if cfg.steps < 1:
        raise FlowError(f"ODE 步数必须 >= 1, 当前值: {cfg.steps}")
    if not 0.0 <= cfg.eps_cut < 0.5:
        raise FlowError(f"eps_cut 必须在 [0, 0.5) 内, 当前值: {cfg.eps_cut}")

    taus = tau_grid(cfg)
    z = np.array(z0, dtype=np.float64)
    last = cfg.steps - 1
    for i in range(cfg.steps):
        h = taus[i + 1] - taus[i]
        k1 = velocity_oracle(z, float(taus[i]))
        if cfg.method == SamplerMethod.HEUN and i < last:
            z_pred = z + h * k1
            k2 = velocity_oracle(z_pred, float(taus[i + 1]))
            z = z + 0.5 * h * (k1 + k2)
        else:
            z = z + h * k1
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(f"ODE 第 {i} 步出现 NaN/Inf (tau={taus[i]:.4f})", step=i)
    return z


def generate_next(model, target_kind: TargetKind, context: np.ndarray, theta: float,
                  cfg: SamplerConfig, rng_seed: SeedLike, tau_min: float = TAU_MIN) -> np.ndarray:
    """
    生成下一帧 (归一化空间)

    z0 由种子确定的标准正态抽样; 预言机为 model.forward 的输出换算到速度。
    换算用的 τ 截断到保护带内, 网络本身看到的仍是原始 τ。
    """
    context = np.asarray(context, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    z0 = rng.standard_normal(context.shape[1:])

    def oracle(z: np.ndarray, tau: float) -> np.ndarray:
        y = model.forward(z, tau, context, theta)
        clamped = min(max(tau, tau_min), 1.0 - tau_min)
        return convert(y, target_kind, TargetKind.V, z, clamped, tau_min)

    return sample_ode(oracle, z0, cfg)


# ============ 预测器 ============
class DiffusionForecaster:
    """扩散模型 + 参数化 + 采样配置"""

    def __init__(self, model, target_kind: TargetKind, sampler: SamplerConfig,
                 tau_min: float = TAU_MIN):
        self.model = model
        self.target_kind = target_kind
        self.sampler = sampler
        self.tau_min = tau_min

    def sample_next(self, context: np.ndarray, theta: float, seed: SeedLike) -> np.ndarray:
        return generate_next(self.model, self.target_kind, context, theta,
                             self.sampler, seed, self.tau_min)


class PersistenceForecaster:
    """桩模型: 总是返回最后一帧上下文"""

    def sample_next(self, context: np.ndarray, theta: float, seed: SeedLike) -> np.ndarray:
        return np.array(context[-1], dtype=np.float64)
