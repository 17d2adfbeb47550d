import os
import json
import math
import struct
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RCKPT1"
ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."


class TensorError(Exception):
    """张量引擎错误基类"""
    pass


class ShapeError(TensorError):
    """形状不匹配"""
    pass


class GradientError(TensorError):
    """反向传播中出现非法梯度"""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(message)
        self.node_id = node_id


class CheckpointFormatError(TensorError):
    """检查点文件格式错误"""
    pass


class Tensor:
    """
    不可变的64位实数稠密数组

    构造时复制数据并设为只读, 因此可以在线程间只读共享。
    """

    __slots__ = ("_data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """返回可写副本"""
        return np.array(self._data, copy=True)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class GraphNode:
    """计算图节点: 算子类型、输入节点id、缓存的输出值"""
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
    requires_grad: bool = False
    param_name: Optional[str] = None


class Graph:
    """
    只追加的计算图 (tape)

    节点按创建顺序存放, 输入总是先于输出出现, 因此天然无环。
    原语集合固定为模型所需的算子, 不提供通用广播。
    """

    def __init__(self):
        self.nodes: List[GraphNode] = []

    def reset(self):
        """清空图, 以便进行新一轮前向"""
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def _push(self, op: str, inputs: Tuple[int, ...], value: np.ndarray,
              backward_fn: Optional[Callable] = None) -> int:
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(GraphNode(
            op=op,
            inputs=inputs,
            value=value,
            backward_fn=backward_fn if requires_grad else None,
            requires_grad=requires_grad
        ))
        return len(self.nodes) - 1

    def _same_shape(self, op: str, a: int, b: int):
        sa, sb = self.nodes[a].value.shape, self.nodes[b].value.shape
        if sa != sb:
            raise ShapeError(f"{op}: 形状不一致 {sa} vs {sb}")

    # ============ 叶子节点 ============
    def param(self, name: str, tensor: Tensor) -> int:
        """注册可训练参数 (requires_grad 叶子)"""
        self.nodes.append(GraphNode(
            op="param",
            inputs=(),
            value=tensor.data,
            requires_grad=True,
            param_name=name
        ))
        return len(self.nodes) - 1

    def constant(self, data) -> int:
        """注册常量叶子 (不求梯度)"""
        if isinstance(data, Tensor):
            value = data.data
        else:
            value = np.asarray(data, dtype=np.float64)
        self.nodes.append(GraphNode(op="const", inputs=(), value=value))
        return len(self.nodes) - 1

    # ============ 逐元素算子 ============
    def add(self, a: int, b: int) -> int:
        self._same_shape("add", a, b)
        return self._push("add", (a, b), self.value(a) + self.value(b),
                          lambda g: (g, g))

    def sub(self, a: int, b: int) -> int:
        self._same_shape("sub", a, b)
        return self._push("sub", (a, b), self.value(a) - self.value(b),
                          lambda g: (g, -g))

    def mul(self, a: int, b: int) -> int:
        self._same_shape("mul", a, b)
        va, vb = self.value(a), self.value(b)
        return self._push("mul", (a, b), va * vb,
                          lambda g: (g * vb, g * va))

    def scale(self, a: int, factor: float) -> int:
        factor = float(factor)
        return self._push("scale", (a,), self.value(a) * factor,
                          lambda g: (g * factor,))

    def add_const(self, a: int, data) -> int:
        """a + 常量数组 (同形状)"""
        const = np.asarray(data, dtype=np.float64)
        if const.shape != self.value(a).shape:
            raise ShapeError(f"add_const: 形状不一致 {self.value(a).shape} vs {const.shape}")
        return self._push("add_const", (a,), self.value(a) + const,
                          lambda g: (g,))

    def add_row(self, a: int, row: int) -> int:
        """a[..., :] + row, row 形状为 (a.shape[-1],)"""
        va, vr = self.value(a), self.value(row)
        if vr.ndim != 1 or vr.shape[0] != va.shape[-1]:
            raise ShapeError(f"add_row: 行向量形状 {vr.shape} 与 {va.shape} 不匹配")
        lead = tuple(range(va.ndim - 1))
        return self._push("add_row", (a, row), va + vr,
                          lambda g: (g, g.sum(axis=lead)))

    def mul_row(self, a: int, row: int) -> int:
        """a[..., :] * row, row 形状为 (a.shape[-1],)"""
        va, vr = self.value(a), self.value(row)
        if vr.ndim != 1 or vr.shape[0] != va.shape[-1]:
            raise ShapeError(f"mul_row: 行向量形状 {vr.shape} 与 {va.shape} 不匹配")
        lead = tuple(range(va.ndim - 1))
        return self._push("mul_row", (a, row), va * vr,
                          lambda g: (g * vr, (g * va).sum(axis=lead)))

    # ============ 线性代数 ============
    def matmul(self, a: int, b: int) -> int:
        """二维或带相同批维的三维矩阵乘"""
        va, vb = self.value(a), self.value(b)
        if va.ndim != vb.ndim or va.ndim not in (2, 3):
            raise ShapeError(f"matmul: 仅支持同维数的2D/3D输入, 得到 {va.shape} @ {vb.shape}")
        if va.shape[-1] != vb.shape[-2] or va.shape[:-2] != vb.shape[:-2]:
            raise ShapeError(f"matmul: 形状不兼容 {va.shape} @ {vb.shape}")

        def backward_fn(g):
            return (np.matmul(g, np.swapaxes(vb, -1, -2)),
                    np.matmul(np.swapaxes(va, -1, -2), g))

        return self._push("matmul", (a, b), np.matmul(va, vb), backward_fn)

    def reshape(self, a: int, shape: Tuple[int, ...]) -> int:
        old_shape = self.value(a).shape
        try:
            out = self.value(a).reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: {old_shape} -> {shape} 失败: {e}")
        return self._push("reshape", (a,), out, lambda g: (g.reshape(old_shape),))

    def transpose(self, a: int, axes: Tuple[int, ...]) -> int:
        inverse = tuple(np.argsort(axes))
        return self._push("transpose", (a,), np.transpose(self.value(a), axes),
                          lambda g: (np.transpose(g, inverse),))

    def gather(self, a: int, start: int, stop: int) -> int:
        """沿最后一维取 [start, stop) 切片"""
        va = self.value(a)
        if not (0 <= start < stop <= va.shape[-1]):
            raise ShapeError(f"gather: 区间 [{start}, {stop}) 越界 (最后一维 {va.shape[-1]})")

        def backward_fn(g):
            full = np.zeros_like(va)
            full[..., start:stop] = g
            return (full,)

        return self._push("gather", (a,), va[..., start:stop], backward_fn)

    # ============ 非线性 ============
    def layer_norm(self, a: int, eps: float = 1e-6) -> int:
        """最后一维上的无仿射 LayerNorm"""
        x = self.value(a)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def backward_fn(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gym),)

        return self._push("layer_norm", (a,), y, backward_fn)

    def softmax(self, a: int) -> int:
        x = self.value(a)
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=-1, keepdims=True)

        def backward_fn(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return self._push("softmax", (a,), s, backward_fn)

    def gelu(self, a: int) -> int:
        """tanh 近似的 GELU"""
        x = self.value(a)
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)

        def backward_fn(g):
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
            return (g * d,)

        return self._push("gelu", (a,), y, backward_fn)

    def silu(self, a: int) -> int:
        x = self.value(a)
        sig = 1.0 / (1.0 + np.exp(-x))
        y = x * sig

        def backward_fn(g):
            return (g * (sig * (1.0 + x * (1.0 - sig))),)

        return self._push("silu", (a,), y, backward_fn)

    # ============ 归约 ============
    def sum(self, a: int) -> int:
        x = self.value(a)
        return self._push("sum", (a,), np.array(x.sum()),
                          lambda g: (np.full(x.shape, float(g)),))

    def mean(self, a: int) -> int:
        x = self.value(a)
        n = x.size
        return self._push("mean", (a,), np.array(x.mean()),
                          lambda g: (np.full(x.shape, float(g) / n),))

    def mse(self, a: int, target) -> int:
        """mean((a - target)^2), target 为常量数组"""
        target = np.asarray(target, dtype=np.float64)
        diff = self.add_const(a, -target)
        return self.mean(self.mul(diff, diff))


def backward(graph: Graph, root: int) -> Dict[str, Tensor]:
    """
    从标量根节点执行反向模式自动微分

    Args:
        graph: 已完成前向的计算图
        root: 标量损失节点id

    Returns:
        参数名 -> 梯度张量 (同名参数多次注册时梯度相加)
    """
    root_value = graph.value(root)
    if root_value.size != 1 or root_value.ndim != 0:
        raise GradientError(f"根节点必须是标量, 实际形状 {root_value.shape}", node_id=root)
    if not np.isfinite(root_value):
        raise GradientError(f"根节点取值非有限: {float(root_value)}", node_id=root)

    adjoints: List[Optional[np.ndarray]] = [None] * (root + 1)
    adjoints[root] = np.ones_like(root_value)
    grads: Dict[str, np.ndarray] = {}

    for node_id in range(root, -1, -1):
        adj = adjoints[node_id]
        if adj is None:
            continue
        node = graph.nodes[node_id]
        if not node.requires_grad:
            continue
        if not np.all(np.isfinite(adj)):
            raise GradientError(f"节点 {node_id} ({node.op}) 的伴随值出现 NaN/Inf", node_id=node_id)

        if node.op == "param":
            if node.param_name in grads:
                grads[node.param_name] = grads[node.param_name] + adj
            else:
                grads[node.param_name] = adj
            continue

        input_grads = node.backward_fn(adj)
        for input_id, g in zip(node.inputs, input_grads):
            if g is None or not graph.nodes[input_id].requires_grad:
                continue
            if adjoints[input_id] is None:
                adjoints[input_id] = g
            else:
                adjoints[input_id] = adjoints[input_id] + g

    return {name: Tensor(g, name=name) for name, g in grads.items()}


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> Tensor:
    """
    中心差分梯度估计 (逐元素)

    Args:
        f: 标量函数, 输入为与 x 同形状的数组
        x: 求导位置
        h: 差分步长, 必须 > 0
    """
    if h <= 0:
        raise TensorError(f"差分步长必须为正数, 当前值: {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(f(base))
        flat[i] = original - h
        f_minus = float(f(base))
        flat[i] = original
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


# ============ 优化器 ============
@dataclass
class AdamConfig:
    """Adam 超参数"""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptState:
    """Adam 状态: 步数与一阶/二阶矩累积量"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> 'OptState':
        return cls(
            step=0,
            m={name: np.zeros(p.shape) for name, p in params.items()},
            v={name: np.zeros(p.shape) for name, p in params.items()}
        )


def adam_update(params: Dict[str, Tensor], grads: Dict[str, Tensor], state: OptState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps_opt: float = 1e-8) -> Tuple[Dict[str, Tensor], OptState]:
    """
    带偏差校正的 Adam 更新 (纯函数, 返回新参数与新状态)

    缺失梯度的参数视为零梯度。
    """
    step = state.step + 1
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step

    for name, p in params.items():
        if name not in state.m or name not in state.v:
            raise ShapeError(f"优化器状态缺少参数 {name}")
        g = grads[name].data if name in grads else np.zeros(p.shape)
        if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise ShapeError(f"参数 {name} 的形状不一致: param={p.shape}, grad={g.shape}, "
                             f"m={state.m[name].shape}, v={state.v[name].shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"参数 {name} 的梯度包含 NaN/Inf")

        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        updated = p.data - lr * m_hat / (np.sqrt(v_hat) + eps_opt)

        new_params[name] = Tensor(updated, requires_grad=p.requires_grad, name=name)
        new_m[name] = m
        new_v[name] = v

    return new_params, OptState(step=step, m=new_m, v=new_v)


def global_grad_norm(grads: Dict[str, Tensor]) -> float:
    """所有梯度拼接后的 L2 范数"""
    return math.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values()))


# ============ 检查点 ============
@dataclass
class Checkpoint:
    """检查点内容"""
    params: Dict[str, Tensor]
    opt_state: Optional[OptState] = None
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str, params: Dict[str, Tensor], opt_state: Optional[OptState] = None,
                    rng_state: Optional[Dict[str, Any]] = None,
                    extra: Optional[Dict[str, Any]] = None):
    """
    写入检查点: 魔数 + 头长度(uint32 LE) + JSON 头 + 小端 float64 原始数据

    先写临时文件再原子替换。
    """
    entries = [(name, p.data) for name, p in params.items()]
    if opt_state is not None:
        entries += [(ADAM_M_PREFIX + name, opt_state.m[name]) for name in params]
        entries += [(ADAM_V_PREFIX + name, opt_state.v[name]) for name in params]

    header = {
        "format": 1,
        "entries": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
        "step": opt_state.step if opt_state is not None else 0,
        "has_opt_state": opt_state is not None,
        "rng_state": rng_state,
        "extra": extra or {}
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp_path, path)
    logger.debug(f"检查点已写入: {path} ({len(entries)} 个张量)")


def load_checkpoint(path: str) -> Checkpoint:
    """读取 save_checkpoint 写出的检查点"""
    with open(path, "rb") as f:
        blob = f.read()

    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic: {path} 不是检查点文件")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise CheckpointFormatError(f"检查点头部被截断: {path}")
    (header_len,) = struct.unpack("<I", blob[offset:offset + 4])
    offset += 4
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"检查点头部无法解析: {e}")
    offset += header_len

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"检查点数据被截断: 张量 {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"检查点末尾存在多余的 {len(blob) - offset} 字节")

    params = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()
              if not name.startswith(ADAM_M_PREFIX) and not name.startswith(ADAM_V_PREFIX)}
    opt_state = None
    if header.get("has_opt_state"):
        opt_state = OptState(
            step=int(header["step"]),
            m={name: arrays[ADAM_M_PREFIX + name] for name in params},
            v={name: arrays[ADAM_V_PREFIX + name] for name in params}
        )
    return Checkpoint(params=params, opt_state=opt_state,
                      rng_state=header.get("rng_state"), extra=header.get("extra", {}))
