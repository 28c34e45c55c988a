# core/autograd.py
# MIT License - See LICENSE for details
import threading
import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_local = threading.local()


def resolve_dtype(dtype):
    """'f32' / 'f64' / numpy dtype -> numpy dtype"""
    if dtype is None:
        return None
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"不支持的 dtype: {dtype} (仅支持 f32/f64)")
        return np.dtype(DTYPES[dtype])
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"不支持的 dtype: {dtype} (仅支持 f32/f64)")
    return dtype


class Tensor:
    """稠密张量：行主序 numpy 缓冲区 + 梯度元数据。前向结果视为不可变。"""

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        dtype = resolve_dtype(dtype)
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float32)
        arr = arr.astype(dtype, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ValueError(f"Tensor 维度不能为空或含 0: {arr.shape}")
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        # 叶子节点的累积梯度槽，初始为 0
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() 需要标量张量，当前维度 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype}{tag} requires_grad={self.requires_grad}>"

    # 运算符转发到 core.ops，避免循环导入
    def __add__(self, other):
        from core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from core import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from core import ops
        return ops.sub(ops.constant(other, like=self), self)

    def __mul__(self, other):
        from core import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from core import ops
        return ops.mul(self, other)

    def __neg__(self):
        from core import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from core import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        from core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        from core import ops
        return ops.exp(self)


class Parameter(Tensor):
    """可学习参数：始终是叶子，数据只在优化器 step 中原地更新"""

    def __init__(self, data, dtype=None, name=None):
        super().__init__(np.array(data, copy=True), dtype=dtype, requires_grad=True, name=name)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        # backward_fn 闭包持有反向规则需要的前向值
        self.backward_fn = backward_fn


class Tape:
    """
    反向模式自动微分磁带（单线程）。
    用法:
        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []
        self._outputs = set()
        self._consumed = False

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, node: TapeNode):
        if self._consumed:
            raise RuntimeError("磁带已执行过 backward，请重新录制")
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict:
        """返回 {叶子张量: 梯度}；accumulate=True 时同时累加到叶子的 grad 槽"""
        if self._consumed:
            raise RuntimeError("同一磁带不能执行两次 backward，请重新录制前向")
        if loss.size != 1:
            raise ValueError(f"backward 需要标量损失，当前维度 {loss.shape}")
        if id(loss) not in self._outputs:
            raise RuntimeError("损失不在当前磁带上 (录制时未开启 Tape 或与参数无关)")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._outputs:
                    leaves[key] = inp

        result = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False).reshape(leaf.shape)
            result[leaf] = g
            if accumulate:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                leaf.grad += g

        # 释放中间结果
        self.nodes = []
        self._outputs = set()
        self._consumed = True
        return result


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor, accumulate: bool = True) -> dict:
    return tape.backward(loss, accumulate=accumulate)
