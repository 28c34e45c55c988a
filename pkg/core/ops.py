# core/ops.py
# MIT License - See LICENSE for details
import math
import numpy as np
from core.autograd import Tensor, TapeNode, current_tape

GELU_C = math.sqrt(2.0 / math.pi)


def constant(value, like: Tensor) -> Tensor:
    """不参与求导的常量，dtype 跟随 like"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def record(op: str, inputs, out_data, backward_fn, dtype=None) -> Tensor:
    """
    所有原语的统一出口：检查有限性，在录制开启时把节点写入当前磁带。
    backward_fn(g) 返回与 inputs 一一对应的梯度 (不需要的位置返回 None)。
    """
    out_data = np.asarray(out_data)
    if dtype is not None:
        out_data = out_data.astype(dtype, copy=False)
    if not np.isfinite(out_data).all():
        raise FloatingPointError(f"{op}: 前向结果出现 NaN/Inf (输出维度 {out_data.shape})")
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: 维度无法广播 {a.shape} vs {b.shape}") from None


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------- 逐元素 ----------------

def add(a: Tensor, b) -> Tensor:
    b = constant(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", (a, b), a.data + b.data, backward, dtype=a.dtype)


def sub(a: Tensor, b) -> Tensor:
    b = constant(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record("sub", (a, b), a.data - b.data, backward, dtype=a.dtype)


def mul(a: Tensor, b) -> Tensor:
    b = constant(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", (a, b), ad * bd, backward, dtype=a.dtype)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record("exp", (a,), out, backward)


def gelu(a: Tensor) -> Tensor:
    # tanh 近似
    x = a.data
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return record("gelu", (a,), out, backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = x * s

    def backward(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return record("silu", (a,), out, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return record("relu", (a,), a.data * mask, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (a,), y, backward)


# ---------------- 形状 ----------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: 无法把 {a.shape} 变为 {shape}") from None
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return record("reshape", (a,), out, backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: 轴序 {axes} 与维度 {a.shape} 不符")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return record("permute", (a,), a.data.transpose(axes), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: 无法把 {a.shape} 广播到 {shape}") from None
    src = a.shape

    def backward(g):
        return (_unbroadcast(g, src),)

    return record("broadcast", (a,), out, backward)


# ---------------- 归约 ----------------

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    raw_shape = np.shape(out)
    src = a.shape

    def backward(g):
        g = g.reshape(raw_shape)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", (a,), out, backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    raw_shape = np.shape(out)
    src = a.shape

    def backward(g):
        g = g.reshape(raw_shape)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return record("mean", (a,), out, backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]"""
    if a.ndim != 4:
        raise ValueError(f"global_avg_pool: 需要 4 维输入，当前 {a.shape}")
    B, C, H, W = a.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),)

    return record("global_avg_pool", (a,), a.data.mean(axis=(2, 3)), backward)


# ---------------- 矩阵乘 ----------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., k) @ (k, n)，前导维度按行展开成一次 GEMM"""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: 维度不匹配 {a.shape} @ {b.shape}")
    k, n = b.shape
    ad, bd = a.data, b.data
    out = (ad.reshape(-1, k) @ bd).reshape(*a.shape[:-1], n)

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ bd.T).reshape(ad.shape)
        gb = ad.reshape(-1, k).T @ g2
        return ga, gb

    return record("matmul", (a, b), out, backward, dtype=a.dtype)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n)，前导维度必须一致"""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"batched-matmul: 维度不匹配 {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("batched-matmul", (a, b), ad @ bd, backward, dtype=a.dtype)


def linear(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------- 卷积 (零填充) ----------------

def depthwise_conv3x3(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """逐通道 3x3 卷积，stride 1，padding 1。x:[B,C,H,W] w:[C,3,3] b:[C]"""
    if x.ndim != 4 or w.shape != (x.shape[1], 3, 3):
        raise ValueError(f"depthwise-conv-3x3: 维度不匹配 x{x.shape} w{w.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = w.data
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += wd[:, i, j][None, :, None, None] * xp[:, :, i:i + H, j:j + W]
    inputs = (x, w)
    if b is not None:
        out += b.data[None, :, None, None]
        inputs = (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + H, j:j + W] += wd[:, i, j][None, :, None, None] * g
                gw[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
        grads = (gxp[:, :, 1:H + 1, 1:W + 1], gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return record("depthwise-conv-3x3", inputs, out, backward, dtype=x.dtype)


def strided_conv3x3(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """稠密 3x3 卷积，stride 2，padding 1。x:[B,Cin,H,W] w:[Cout,Cin,3,3]"""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ValueError(f"strided-conv-3x3: 维度不匹配 x{x.shape} w{w.shape}")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    OH, OW = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, Cin, 3, 3, OH, OW), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + 2 * OH:2, j:j + 2 * OW:2]
    cols2 = cols.reshape(B, Cin * 9, OH * OW)
    wm = w.data.reshape(Cout, Cin * 9)
    out = np.tensordot(wm, cols2, axes=([1], [1])).transpose(1, 0, 2).reshape(B, Cout, OH, OW)
    inputs = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def backward(g):
        g2 = g.reshape(B, Cout, OH * OW)
        gw = np.tensordot(g2, cols2, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.tensordot(wm, g2, axes=([0], [1])).transpose(1, 0, 2).reshape(B, Cin, 3, 3, OH, OW)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + 2 * OH:2, j:j + 2 * OW:2] += gcols[:, :, i, j]
        grads = (gxp[:, :, 1:H + 1, 1:W + 1], gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return record("strided-conv-3x3", inputs, out, backward, dtype=x.dtype)


# ---------------- 归一化 / 损失 ----------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-6) -> Tensor:
    """沿 axis (通道) 归一化，每个空间位置独立，带可学习缩放/平移"""
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"layer-norm: 通道数 {C} 与参数 {gamma.shape}/{beta.shape} 不符")
    bshape = [1] * x.ndim
    bshape[axis] = C
    gd = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer-norm", (x, gamma, beta), out, backward, dtype=x.dtype)


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """带标签平滑的交叉熵，批内取均值"""
    if logits.ndim != 2:
        raise ValueError(f"cross-entropy: 需要 [B,K] logits，当前 {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise ValueError(f"cross-entropy: 标签数 {labels.shape[0]} 与批大小 {B} 不符")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"cross-entropy: 标签超出 [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((B, K), smoothing / K, dtype=logits.dtype)
    q[np.arange(B), labels] += 1.0 - smoothing
    loss = -(q * logp).sum() / B

    def backward(g):
        return (g.reshape(()) * (np.exp(logp) - q) / B,)

    return record("cross-entropy", (logits,), loss, backward, dtype=logits.dtype)


PRIMITIVES = {
    "matmul": matmul,
    "batched-matmul": batched_matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "reshape": reshape,
    "permute": permute,
    "broadcast": broadcast_to,
    "depthwise-conv-3x3": depthwise_conv3x3,
    "strided-conv-3x3": strided_conv3x3,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "silu": silu,
    "relu": relu,
    "softmax": softmax,
    "global-average-pool": global_avg_pool,
    "cross-entropy": cross_entropy,
    "sum": sum,
    "mean": mean,
}


def primitive_forward(op: str, inputs, **attrs) -> Tensor:
    handler = PRIMITIVES.get(op)
    if handler is None:
        raise ValueError(f"未知原语: {op}")
    return handler(*inputs, **attrs)
