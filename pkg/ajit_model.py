import math
import logging
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from tensor_core import Graph, Tensor


logger = logging.getLogger(__name__)

TAU_SCALE = 1000.0
MAX_PERIOD = 10000.0


class ModelError(Exception):
    """模型错误基类"""
    pass


class ModelConfigError(ModelError):
    """模型超参数非法"""
    pass


class ActivationError(ModelError):
    """前向过程中出现非有限激活值"""

    def __init__(self, message: str, block_index: Optional[int] = None):
        super().__init__(message)
        self.block_index = block_index


@dataclass
class ModelConfig:
    """补丁 Transformer 的超参数"""
    channels: int = 2
    height: int = 32
    width: int = 16
    patch_size: int = 2
    hidden_size: int = 192
    depth: int = 6
    n_heads: int = 6
    context_length: int = 2
    mlp_ratio: int = 4
    bottleneck: Optional[int] = None
    frequency_embedding_size: int = 256
    init_std: float = 0.02

    @property
    def grid_h(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.width // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        """每个 token 的环境维度 C·P²"""
        return self.channels * self.patch_size ** 2

    def validate(self) -> List[str]:
        """返回所有违反约束的描述, 空列表表示合法"""
        errors = []
        for key in ("channels", "height", "width", "patch_size", "hidden_size", "depth",
                    "n_heads", "context_length", "mlp_ratio", "frequency_embedding_size"):
            value = getattr(self, key)
            if not isinstance(value, int) or value < 1:
                errors.append(f"{key} 必须是正整数, 当前值: {value}")
        if errors:
            return errors
        if self.height % self.patch_size or self.width % self.patch_size:
            errors.append(f"patch_size={self.patch_size} 必须整除 H={self.height} 和 W={self.width}")
        if self.hidden_size % self.n_heads:
            errors.append(f"hidden_size={self.hidden_size} 必须能被 n_heads={self.n_heads} 整除")
        if self.hidden_size % 4:
            errors.append(f"hidden_size={self.hidden_size} 必须能被 4 整除 (二维正余弦位置编码)")
        if self.frequency_embedding_size % 2:
            errors.append(f"frequency_embedding_size={self.frequency_embedding_size} 必须为偶数")
        if self.bottleneck is not None:
            limit = min(self.patch_dim, self.hidden_size)
            if not isinstance(self.bottleneck, int) or not 1 <= self.bottleneck < limit:
                errors.append(f"bottleneck d'={self.bottleneck} 必须满足 1 <= d' < min(C*P^2, D) = {limit}")
        return errors

    def check(self):
        errors = self.validate()
        if errors:
            raise ModelConfigError("模型配置非法:\n" + "\n".join(f"  - {e}" for e in errors))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ============ 补丁化 ============
def patchify(field_values: np.ndarray, patch_size: int) -> np.ndarray:
    """
    (C, H, W) -> (N, C·P²)

    补丁按补丁网格行优先编号; 补丁内部先通道, 再按空间行优先展开。
    """
    channels, height, width = field_values.shape
    p = patch_size
    if height % p or width % p:
        raise ModelConfigError(f"patch_size={p} 不能整除 {height}x{width}")
    gh, gw = height // p, width // p
    patches = field_values.reshape(channels, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return patches.reshape(gh * gw, channels * p * p)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    """patchify 的精确逆变换: (N, C·P²) -> (C, H, W)"""
    p = patch_size
    if height % p or width % p:
        raise ModelConfigError(f"patch_size={p} 不能整除 {height}x{width}")
    gh, gw = height // p, width // p
    n, dim = patches.shape
    if n != gh * gw or dim % (p * p):
        raise ModelConfigError(f"补丁矩阵形状 {patches.shape} 与 {height}x{width}, P={p} 不一致")
    channels = dim // (p * p)
    field_values = patches.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return field_values.reshape(channels, height, width)


# ============ 位置编码与时间特征 ============
def get_1d_sincos_pos_embed_from_grid(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(embed_dim // 2, dtype=np.float64)
    omega /= embed_dim / 2.0
    omega = 1.0 / MAX_PERIOD ** omega
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def get_2d_sincos_pos_embed(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """
    固定的二维正余弦位置编码

    Returns:
        (grid_h*grid_w, embed_dim), 行顺序与 patchify 的补丁编号一致
    """
    if embed_dim % 4:
        raise ModelConfigError(f"embed_dim={embed_dim} 必须能被 4 整除")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb_h = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, rows)
    emb_w = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, cols)
    return np.concatenate([emb_h, emb_w], axis=1)


def timestep_frequencies(dim: int) -> np.ndarray:
    half = dim // 2
    return np.exp(-math.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)


def timestep_features(tau: float, dim: int) -> np.ndarray:
    """τ 的正余弦特征 (τ 先放大到 [0, 1000])"""
    args = TAU_SCALE * float(tau) * timestep_frequencies(dim)
    return np.concatenate([np.cos(args), np.sin(args)])


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """2σ 截断的正态分布, 越界样本重新抽取"""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while np.any(outside):
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


class AjitModel:
    """
    DiT 风格的补丁 Transformer 主干

    参数以 名称 -> Tensor 的有序字典保存, 线性层权重为 (in, out) 矩阵。
    """

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, Tensor]] = None,
                 seed: int = 0, logger: Optional[logging.Logger] = None):
        config.check()
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.params = params if params is not None else self.init_params(config, seed)
        self.pos_embed = get_2d_sincos_pos_embed(config.hidden_size, config.grid_h, config.grid_w)
        self._check_param_shapes()

    # ============ 参数 ============
    @staticmethod
    def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        """参数名 -> 形状, 顺序即检查点中的存储顺序"""
        d = config.hidden_size
        shapes: Dict[str, Tuple[int, ...]] = {}

        def linear(prefix: str, fan_in: int, fan_out: int):
            shapes[f"{prefix}.w"] = (fan_in, fan_out)
            shapes[f"{prefix}.b"] = (fan_out,)

        def patch_embed(prefix: str, fan_in: int):
            if config.bottleneck is None:
                linear(prefix, fan_in, d)
            else:
                linear(f"{prefix}.down", fan_in, config.bottleneck)
                linear(f"{prefix}.up", config.bottleneck, d)

        patch_embed("z_embed", config.patch_dim)
        patch_embed("hist_embed", config.context_length * config.patch_dim)
        linear("t_embed.fc1", config.frequency_embedding_size, d)
        linear("t_embed.fc2", d, d)
        linear("theta_embed.fc1", 1, d)
        linear("theta_embed.fc2", d, d)
        for i in range(config.depth):
            linear(f"blocks.{i}.adaln", d, 6 * d)
            linear(f"blocks.{i}.attn.qkv", d, 3 * d)
            linear(f"blocks.{i}.attn.proj", d, d)
            linear(f"blocks.{i}.mlp.fc1", d, config.mlp_ratio * d)
            linear(f"blocks.{i}.mlp.fc2", config.mlp_ratio * d, d)
        linear("final.adaln", d, 2 * d)
        linear("final.linear", d, config.patch_dim)
        return shapes

    @classmethod
    def init_params(cls, config: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
        """
        权重截断正态 (std=init_std), 偏置为零;
        AdaLN 投影与输出头零初始化
        """
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = {}
        for name, shape in cls.param_shapes(config).items():
            zero_init = name.endswith(".b") or ".adaln." in name or name.startswith("final.")
            if zero_init:
                value = np.zeros(shape)
            else:
                value = _truncated_normal(rng, shape, config.init_std)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return params

    def _check_param_shapes(self):
        expected = self.param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            unexpected = sorted(set(self.params) - set(expected))
            raise ModelConfigError(f"参数集合与配置不一致: 缺少 {missing}, 多余 {unexpected}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ModelConfigError(f"参数 {name} 形状 {self.params[name].shape} 与期望 {shape} 不一致")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_params(self, params: Dict[str, Tensor]) -> 'AjitModel':
        model = AjitModel(self.config, params=params, logger=self.logger)
        model.pos_embed = self.pos_embed
        return model

    # ============ 前向 (计算图) ============
    def _leaf_factory(self, graph: Graph, params: Dict[str, Tensor],
                      trainable: bool) -> Callable[[str], int]:
        cache: Dict[str, int] = {}

        def leaf(name: str) -> int:
            if name not in cache:
                cache[name] = graph.param(name, params[name]) if trainable else graph.constant(params[name])
            return cache[name]

        return leaf

    @staticmethod
    def _linear(graph: Graph, leaf: Callable[[str], int], x: int, prefix: str) -> int:
        return graph.add_row(graph.matmul(x, leaf(f"{prefix}.w")), leaf(f"{prefix}.b"))

    def _patch_embed(self, graph: Graph, leaf: Callable[[str], int], patches: int, prefix: str) -> int:
        if self.config.bottleneck is None:
            return self._linear(graph, leaf, patches, prefix)
        hidden = self._linear(graph, leaf, patches, f"{prefix}.down")
        return self._linear(graph, leaf, hidden, f"{prefix}.up")

    def _check_inputs(self, z_field: np.ndarray, history: np.ndarray):
        cfg = self.config
        field_shape = (cfg.channels, cfg.height, cfg.width)
        if tuple(z_field.shape) != field_shape:
            raise ModelError(f"shape mismatch: z 形状 {z_field.shape}, 期望 {field_shape}")
        history_shape = (cfg.context_length * cfg.channels, cfg.height, cfg.width)
        if tuple(history.shape) != history_shape:
            raise ModelError(f"shape mismatch: 历史堆叠形状 {history.shape}, 期望 {history_shape}")

    def stack_context(self, context_fields: np.ndarray) -> np.ndarray:
        """(k, C, H, W) -> (k·C, H, W), 按通道维拼接"""
        cfg = self.config
        context_fields = np.asarray(context_fields, dtype=np.float64)
        expected = (cfg.context_length, cfg.channels, cfg.height, cfg.width)
        if tuple(context_fields.shape) != expected:
            raise ModelError(f"shape mismatch: 上下文形状 {context_fields.shape}, 期望 {expected}")
        return context_fields.reshape(cfg.context_length * cfg.channels, cfg.height, cfg.width)

    def build_tokens(self, graph: Graph, leaf: Callable[[str], int], z_field: np.ndarray,
                     history: np.ndarray, pos: np.ndarray) -> int:
        """T0 = Tok_z(z) + Tok_hist(history) + E_pos"""
        self._check_inputs(z_field, history)
        p = self.config.patch_size
        z_tokens = self._patch_embed(graph, leaf, graph.constant(patchify(z_field, p)), "z_embed")
        hist_tokens = self._patch_embed(graph, leaf, graph.constant(patchify(history, p)), "hist_embed")
        return graph.add_const(graph.add(z_tokens, hist_tokens), pos)

    def build_condition(self, graph: Graph, leaf: Callable[[str], int], tau: float, theta: float) -> int:
        """g(τ, θ) = g_τ(τ) + g_θ(θ), 形状 (1, D)"""
        if not 0.0 <= tau <= 1.0:
            raise ModelError(f"tau 必须在 [0, 1] 内, 当前值: {tau}")
        features = timestep_features(tau, self.config.frequency_embedding_size)[None, :]
        g_tau = self._linear(graph, leaf, graph.constant(features), "t_embed.fc1")
        g_tau = self._linear(graph, leaf, graph.silu(g_tau), "t_embed.fc2")
        g_theta = self._linear(graph, leaf, graph.constant(np.array([[float(theta)]])), "theta_embed.fc1")
        g_theta = self._linear(graph, leaf, graph.silu(g_theta), "theta_embed.fc2")
        return graph.add(g_tau, g_theta)

    def _modulate(self, graph: Graph, x: int, shift: int, scale: int) -> int:
        ones = np.ones(self.config.hidden_size)
        return graph.add_row(graph.mul_row(x, graph.add_const(scale, ones)), shift)

    def _gated_residual(self, graph: Graph, x: int, branch: int, gate: int) -> int:
        ones = np.ones(self.config.hidden_size)
        return graph.add(x, graph.mul_row(branch, graph.add_const(gate, ones)))

    def _attention(self, graph: Graph, leaf: Callable[[str], int], x: int, prefix: str) -> int:
        cfg = self.config
        n, d, heads = cfg.num_tokens, cfg.hidden_size, cfg.n_heads
        head_dim = d // heads
        qkv = self._linear(graph, leaf, x, f"{prefix}.qkv")

        def split_heads(start: int) -> int:
            part = graph.reshape(graph.gather(qkv, start, start + d), (n, heads, head_dim))
            return graph.transpose(part, (1, 0, 2))

        q, k, v = split_heads(0), split_heads(d), split_heads(2 * d)
        scores = graph.scale(graph.matmul(q, graph.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
        out = graph.matmul(graph.softmax(scores), v)
        out = graph.reshape(graph.transpose(out, (1, 0, 2)), (n, d))
        return self._linear(graph, leaf, out, f"{prefix}.proj")

    def _block(self, graph: Graph, leaf: Callable[[str], int], x: int, cond: int, index: int) -> int:
        d = self.config.hidden_size
        prefix = f"blocks.{index}"
        mod = graph.reshape(self._linear(graph, leaf, cond, f"{prefix}.adaln"), (6 * d,))
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = (
            graph.gather(mod, i * d, (i + 1) * d) for i in range(6))

        h = self._modulate(graph, graph.layer_norm(x), shift_msa, scale_msa)
        x = self._gated_residual(graph, x, self._attention(graph, leaf, h, f"{prefix}.attn"), gate_msa)

        h = self._modulate(graph, graph.layer_norm(x), shift_mlp, scale_mlp)
        h = graph.gelu(self._linear(graph, leaf, h, f"{prefix}.mlp.fc1"))
        h = self._linear(graph, leaf, h, f"{prefix}.mlp.fc2")
        return self._gated_residual(graph, x, h, gate_mlp)

    def build_forward(self, graph: Graph, z_field: np.ndarray, tau: float, context_fields: np.ndarray,
                      theta: float, trainable: bool = True,
                      params: Optional[Dict[str, Tensor]] = None) -> int:
        """
        在计算图上构建 y_φ(z_τ, τ, c)

        Args:
            graph: 目标计算图
            z_field: (C, H, W) 带噪状态
            tau: 扩散时间
            context_fields: (k, C, H, W) 历史帧
            theta: 条件参数
            trainable: True 时参数注册为可求导叶子
            params: 覆盖 self.params

        Returns:
            形状为 (C, H, W) 的输出节点id
        """
        cfg = self.config
        leaf = self._leaf_factory(graph, params or self.params, trainable)
        history = self.stack_context(context_fields)

        x = self.build_tokens(graph, leaf, np.asarray(z_field, dtype=np.float64), history, self.pos_embed)
        cond = graph.silu(self.build_condition(graph, leaf, tau, theta))

        for index in range(cfg.depth):
            x = self._block(graph, leaf, x, cond, index)
            if not np.all(np.isfinite(graph.value(x))):
                raise ActivationError(f"第 {index} 个 block 输出出现 NaN/Inf", block_index=index)

        d = cfg.hidden_size
        mod = graph.reshape(self._linear(graph, leaf, cond, "final.adaln"), (2 * d,))
        shift, scale = graph.gather(mod, 0, d), graph.gather(mod, d, 2 * d)
        x = self._modulate(graph, graph.layer_norm(x), shift, scale)
        patches = self._linear(graph, leaf, x, "final.linear")

        p = cfg.patch_size
        out = graph.reshape(patches, (cfg.grid_h, cfg.grid_w, cfg.channels, p, p))
        out = graph.transpose(out, (2, 0, 3, 1, 4))
        out = graph.reshape(out, (cfg.channels, cfg.height, cfg.width))
        if not np.all(np.isfinite(graph.value(out))):
            raise ActivationError("输出头出现 NaN/Inf", block_index=cfg.depth)
        return out

    def forward(self, z_field: np.ndarray, tau: float, context_fields: np.ndarray, theta: float) -> np.ndarray:
        """推理用前向, 不保留反向闭包"""
        graph = Graph()
        out = self.build_forward(graph, z_field, tau, context_fields, theta, trainable=False)
        return np.array(graph.value(out))


# ============ 函数式接口 ============
def embed_tokens(z_field: np.ndarray, history_stack: np.ndarray, params: Dict[str, Tensor],
                 pos: np.ndarray, config: ModelConfig) -> np.ndarray:
    """返回 N×D 的初始 token 矩阵 T0"""
    model = AjitModel(config, params=params)
    graph = Graph()
    leaf = model._leaf_factory(graph, params, trainable=False)
    node = model.build_tokens(graph, leaf, np.asarray(z_field, dtype=np.float64),
                              np.asarray(history_stack, dtype=np.float64), np.asarray(pos, dtype=np.float64))
    return np.array(graph.value(node))


def global_condition(tau: float, theta: float, params: Dict[str, Tensor], config: ModelConfig) -> np.ndarray:
    """返回 D 维全局条件向量 g(τ, θ)"""
    model = AjitModel(config, params=params)
    graph = Graph()
    leaf = model._leaf_factory(graph, params, trainable=False)
    node = model.build_condition(graph, leaf, tau, theta)
    return np.array(graph.value(node)).reshape(-1)


def model_forward(z_field: np.ndarray, tau: float, context_fields: np.ndarray, theta: float,
                  params: Dict[str, Tensor], config: ModelConfig) -> np.ndarray:
    return AjitModel(config, params=params).forward(z_field, tau, context_fields, theta)
