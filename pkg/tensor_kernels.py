#!/usr/bin/env python3
"""
最小稠密张量库与反向模式自动微分

Tensor 持有一个 numpy 数组；在 Tape 上下文中执行的运算会记录
(输出, 输入, 反向闭包)，tape.backward(root) 逆序回放得到叶子梯度。
没有激活的 Tape 时运算不记录任何东西。
"""

import hashlib
import logging
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import erf, expit

from errors import ConfigError, DataError, NumericError, ShapeError, UsageError, VersionError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """稠密张量（最多 4 维）"""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None, _leaf: bool = True):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        if array.ndim > 4:
            raise ShapeError("张量最多支持 4 维", array.shape)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"只有单元素张量可以转为标量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """运算记录带

    用作上下文管理器，同一线程内可嵌套；不同线程各自独立。
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: List[Tuple[Tensor, Tuple[Tensor, ...], BackwardFn]] = []
        self.leaves: Dict[int, Tensor] = {}

    @classmethod
    def active(cls) -> Optional["Tape"]:
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        if not hasattr(Tape._local, "stack"):
            Tape._local.stack = []
        Tape._local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._local.stack.pop()
        return False

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        for parent in parents:
            if parent.requires_grad and parent.is_leaf:
                self.leaves[id(parent)] = parent
        self.nodes.append((out, parents, backward))

    def backward(self, root: Tensor) -> Dict[int, np.ndarray]:
        """从标量根反传；每个记录过的叶子的 .grad 被覆盖为其梯度"""
        if root.data.size != 1:
            raise UsageError(f"反向传播的根必须是标量，当前形状 {root.shape}")
        grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}

        for out, parents, backward in reversed(self.nodes):
            upstream = grads.pop(id(out), None)
            if upstream is None:
                continue
            parent_grads = backward(upstream)
            for parent, grad in zip(parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                if grad.shape != parent.shape:
                    raise ShapeError("反向梯度形状与输入不一致", grad.shape, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + grad if key in grads else grad

        for key, leaf in self.leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        if id(root) in self.leaves:
            root.grad = np.ones_like(root.data)
        return grads


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"运算 {op} 产生了 NaN/Inf")


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """创建运算输出并在需要时登记到活动 Tape

    backward 接收输出梯度，按 parents 顺序返回各输入的梯度（不需要时可为 None）。
    """
    _check_finite(data, op)
    tape = Tape.active()
    parents = tuple(parents)
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad, _leaf=False)
    if needs_grad:
        tape.record(out, parents, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data * b.data, (a, b),
                     lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def linear(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W + b，作用于最后一维"""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear 输入与权重维度不匹配", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear 偏置维度不匹配", bias.shape, (weight.shape[1],))

    d_in, d_out = weight.shape
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        flat_g = g.reshape(-1, d_out)
        grads = [g @ weight.data.T, x.data.reshape(-1, d_in).T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, parents, backward, "linear")


def gelu(x: ArrayLike) -> Tensor:
    """精确 GELU: x Φ(x)"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return record_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return record_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: ArrayLike, kind: str) -> Tensor:
    """按名称选择逐点非线性"""
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "identity":
        return as_tensor(x)
    raise ConfigError(f"不支持的激活函数: {kind}")


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """减去最大值后的归一化指数"""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax 的归一化轴为空", x.shape)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (x,), backward, "softmax")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def reduce_sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x: ArrayLike, axis: int) -> Tensor:
    """沿某轴取最大值；并列时梯度只流向第一个最大位置"""
    x = as_tensor(x)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, arg, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return record_op(out, (x,), backward, "max")


def index_rows(x: ArrayLike, index: np.ndarray, allow_missing: bool = False) -> Tensor:
    """按行索引取值；allow_missing 时索引 -1 得到全零行"""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    valid = index >= 0
    if not allow_missing and not valid.all():
        raise DataError("行索引包含负值")
    if valid.any() and index[valid].max() >= len(x):
        raise DataError(f"行索引越界: {int(index[valid].max())} >= {len(x)}")

    out = np.zeros((len(index),) + x.shape[1:], dtype=x.dtype)
    out[valid] = x.data[index[valid]]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index[valid], g[valid])
        return (grad,)

    return record_op(out, (x,), backward, "index_rows")


def mean_operator(segment_ids: np.ndarray, num_segments: int) -> sparse.csr_matrix:
    """(S, N) 稀疏平均矩阵；段号 -1 的行不参与"""
    segment_ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    member = np.flatnonzero(segment_ids >= 0)
    seg = segment_ids[member]
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    weights = 1.0 / counts[seg]
    return sparse.csr_matrix((weights, (seg, member)), shape=(num_segments, len(segment_ids)))


def segment_mean(x: ArrayLike, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """按段求行均值，空段为零"""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    if len(segment_ids) != len(x):
        raise ShapeError("segment_mean 段号长度与行数不一致", segment_ids.shape, x.shape)
    if len(segment_ids) and segment_ids.max() >= num_segments:
        raise DataError(f"段号越界: {int(segment_ids.max())} >= {num_segments}")
    op = mean_operator(segment_ids, num_segments)
    out = np.asarray(op @ x.data.reshape(len(x), -1)).reshape((num_segments,) + x.shape[1:])
    return record_op(out, (x,), lambda g: (np.asarray(op.T @ g.reshape(num_segments, -1)).reshape(x.shape),),
                     "segment_mean")


def flat_cells(cell_index: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """(N, 2) 网格坐标 → 行优先展平编号，越界抛出 DataError"""
    cell_index = np.asarray(cell_index, dtype=np.int64).reshape(-1, 2)
    height, width = grid
    bad = (cell_index[:, 0] < 0) | (cell_index[:, 0] >= height) | (cell_index[:, 1] < 0) | (cell_index[:, 1] >= width)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise DataError(f"网格索引越界: 点 {first} -> {tuple(cell_index[first])}，网格 {grid}")
    return cell_index[:, 0] * width + cell_index[:, 1]


def scatter_mean(points: ArrayLike, cell_index: np.ndarray, grid: Tuple[int, int]) -> Tensor:
    """把点特征平均到 (H, W, D) 网格，空格为零"""
    points = as_tensor(points)
    if points.ndim != 2:
        raise ShapeError("scatter_mean 需要 (N, D) 输入", points.shape)
    flat = flat_cells(cell_index, grid)
    if len(flat) != len(points):
        raise ShapeError("scatter_mean 索引数与点数不一致", (len(flat),), points.shape)
    height, width = grid
    dim = points.shape[1]
    op = mean_operator(flat, height * width)
    out = np.asarray(op @ points.data).reshape(height, width, dim)
    return record_op(out, (points,), lambda g: (np.asarray(op.T @ g.reshape(-1, dim)),), "scatter_mean")


def gather(grid: ArrayLike, cell_index: np.ndarray) -> Tensor:
    """逐点读取所在格子的特征向量"""
    grid = as_tensor(grid)
    if grid.ndim != 3:
        raise ShapeError("gather 需要 (H, W, D) 网格", grid.shape)
    height, width, dim = grid.shape
    flat = flat_cells(cell_index, (height, width))
    op = sparse.csr_matrix((np.ones(len(flat)), (np.arange(len(flat)), flat)),
                           shape=(len(flat), height * width))
    out = np.asarray(op @ grid.data.reshape(-1, dim))
    return record_op(out, (grid,), lambda g: (np.asarray(op.T @ g).reshape(grid.shape),), "gather")


def conv2d(grid: ArrayLike, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """步长 1、零填充的二维互相关；kernel 形状 (k, k, Cin, Cout)，k ∈ {1, 3}"""
    grid = as_tensor(grid)
    k = kernel.shape[0]
    if kernel.ndim != 4 or k not in (1, 3) or kernel.shape[1] != k:
        raise ConfigError(f"conv2d 只支持 1x1 或 3x3 卷积核，实际形状 {kernel.shape}")
    if grid.ndim != 3 or grid.shape[2] != kernel.shape[2]:
        raise ShapeError("conv2d 输入通道与卷积核不匹配", grid.shape, kernel.shape)
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError("conv2d 偏置维度不匹配", bias.shape, (kernel.shape[3],))

    height, width, c_in = grid.shape
    c_out = kernel.shape[3]
    pad = k // 2
    padded = np.pad(grid.data, ((pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((height, width, c_out), dtype=np.result_type(grid.data, kernel.data))
    for a in range(k):
        for b in range(k):
            out += padded[a:a + height, b:b + width] @ kernel.data[a, b]
    if bias is not None:
        out += bias.data

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        flat_g = g.reshape(-1, c_out)
        for a in range(k):
            for b in range(k):
                grad_padded[a:a + height, b:b + width] += g @ kernel.data[a, b].T
                grad_kernel[a, b] = padded[a:a + height, b:b + width].reshape(-1, c_in).T @ flat_g
        grads = [grad_padded[pad:pad + height, pad:pad + width], grad_kernel]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    parents = (grid, kernel) if bias is None else (grid, kernel, bias)
    return record_op(out, parents, backward, "conv2d")


def detach(x: ArrayLike) -> Tensor:
    return as_tensor(x).detach()


@dataclass
class GradCheckReport:
    """梯度检查结果"""

    max_rel_error: float
    passed: bool
    checked: int
    tol: float
    worst: Optional[Tuple[int, int, float, float]] = None  # (输入序号, 展平位置, 解析值, 数值)
    per_input: List[float] = field(default_factory=list)


def _scalar(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise UsageError(f"梯度检查的函数必须返回标量，当前形状 {out.shape}")
    return float(out.data.reshape(-1)[0])


def _central_difference(f, inputs, tensor: Tensor, flat_index: int, step: float) -> float:
    original = tensor.data.flat[flat_index]
    tensor.data.flat[flat_index] = original + step
    plus = _scalar(f, inputs)
    tensor.data.flat[flat_index] = original - step
    minus = _scalar(f, inputs)
    tensor.data.flat[flat_index] = original
    return (plus - minus) / (2.0 * step)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
               step: float = 1e-5, samples: Optional[int] = None, seed: int = 0,
               floor: float = 1e-4) -> GradCheckReport:
    """比较 Tape 梯度与中心差分

    相对误差 |a - n| / max(|a|, |n|, floor)。超差的分量再用 step/10、step/100
    重算一次（绕开分段函数的折点），取最小误差。samples 限制每个输入抽查的分量数。
    """
    inputs = list(inputs)
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise UsageError("梯度检查需要 64 位浮点输入")
        tensor.requires_grad = True

    with Tape() as tape:
        root = f(*inputs)
    if root.data.size != 1:
        raise UsageError(f"梯度检查的函数必须返回标量，当前形状 {root.shape}")
    tape.backward(root)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst_error, worst, checked, per_input = 0.0, None, 0, []
    for i, tensor in enumerate(inputs):
        size = tensor.data.size
        entries = np.arange(size) if samples is None or samples >= size else rng.choice(size, samples, replace=False)
        input_error = 0.0
        for flat_index in entries:
            a = float(analytic[i].flat[flat_index])
            error, numeric = np.inf, 0.0
            for attempt_step in (step, step / 10.0, step / 100.0):
                n = _central_difference(f, inputs, tensor, int(flat_index), attempt_step)
                e = abs(a - n) / max(abs(a), abs(n), floor)
                if e < error:
                    error, numeric = e, n
                if error <= tol:
                    break
            checked += 1
            input_error = error if error > input_error else input_error
            if error > worst_error or worst is None:
                worst_error, worst = error, (i, int(flat_index), a, numeric)
        per_input.append(input_error)

    report = GradCheckReport(worst_error, worst_error <= tol, checked, tol, worst, per_input)
    if not report.passed:
        logger.warning(f"梯度检查未通过: 最大相对误差 {worst_error:.3e} > {tol:.1e}, 位置 {worst}")
    return report


_MAGIC = b"C4DS"
_VERSION = 1


def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


class ParamStore:
    """具名可训练参数与优化器状态

    每个参数的初始化随机数由 (seed, 名称的 crc32) 派生，与创建顺序无关。
    """

    def __init__(self, seed: int = 0, dtype: str = "float64"):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.state: Dict[str, np.ndarray] = {}
        self.meta: Dict[str, float] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ConfigError(f"参数不存在: {name}") from None

    def __len__(self) -> int:
        return len(self.params)

    def create(self, name: str, shape: Tuple[int, ...], init: str = "xavier") -> Tensor:
        if name in self.params:
            raise ConfigError(f"参数名重复: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        elif init == "xavier":
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8"))]))
            values = rng.uniform(-bound, bound, size=shape)
        else:
            raise ConfigError(f"未知的初始化方式: {init}")
        tensor = Tensor(values.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self.params if name.startswith(prefix)]

    def select(self, prefixes: Iterable[str]) -> List[Tuple[str, Tensor]]:
        prefixes = tuple(prefixes)
        return [(name, t) for name, t in self.params.items() if name.startswith(prefixes)]

    def set_trainable(self, prefixes: Iterable[str]) -> None:
        """只有名称以给定前缀开头的参数参与求导"""
        prefixes = tuple(prefixes)
        for name, tensor in self.params.items():
            tensor.requires_grad = name.startswith(prefixes)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def checksum(self, prefix: str = "") -> str:
        digest = hashlib.sha256()
        for name in sorted(self.names(prefix)):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        """写出 C4DS 检查点"""
        records = [(f"param/{n}", t.data) for n, t in self.params.items()]
        records += [(f"state/{n}", v) for n, v in self.state.items()]
        records += [(f"meta/{n}", np.asarray(v, dtype=np.float64)) for n, v in self.meta.items()]

        chunks = [_MAGIC, struct.pack("<II", _VERSION, len(records))]
        for name, array in records:
            encoded = name.encode("utf-8")
            array = np.asarray(array)
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", array.ndim))
            chunks.append(np.asarray(array.shape, dtype="<u8").tobytes())
            chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))
        logger.debug(f"检查点已保存: {path} ({len(records)} 条记录)")

    def load(self, path: Union[str, Path]) -> "ParamStore":
        """读取检查点，参数按名称写回；名称或形状不符抛出 VersionError"""
        records = read_checkpoint(path)
        params = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}

        missing = sorted(set(self.params) - set(params))
        unknown = sorted(set(params) - set(self.params))
        if missing or unknown:
            raise VersionError(f"检查点参数不兼容: 缺少 {missing[:5]}，多余 {unknown[:5]}")
        for name, values in params.items():
            if values.shape != self.params[name].shape:
                raise VersionError(f"检查点参数 {name} 形状不兼容")
            self.params[name].data = values.astype(self.dtype)

        self.state = {k[len("state/"):]: v for k, v in records.items() if k.startswith("state/")}
        self.meta = {k[len("meta/"):]: float(v) for k, v in records.items() if k.startswith("meta/")}
        logger.debug(f"检查点已加载: {path}")
        return self


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """解析 C4DS 检查点为 {记录名: 数组}"""
    raw = Path(path).read_bytes()
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(raw):
            raise DataError(f"检查点 {path} 在偏移 {offset} 处被截断")
        chunk = raw[offset:offset + size]
        offset += size
        return chunk

    if take(4) != _MAGIC:
        raise VersionError(f"{path} 不是 C4DS 检查点")
    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise VersionError(f"检查点版本 {version} 不受支持（期望 {_VERSION}）")

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(int(d) for d in np.frombuffer(take(8 * rank), dtype="<u8"))
        size = int(np.prod(shape)) if shape else 1
        records[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise DataError(f"检查点 {path} 在偏移 {offset} 之后有多余数据")
    return records
