# core/gradcheck.py
# MIT License - See LICENSE for details
import numpy as np
from core.autograd import Tape


def _scalar(fn, inputs) -> float:
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check: 函数必须返回标量，当前维度 {out.shape}")
    return out.item()


def grad_check(fn, inputs, h: float = 1e-5, samples: int = None, seed: int = 0) -> float:
    """
    中心差分校验解析梯度。
    返回所有被检元素上 |解析 - 差分| / max(1, |差分|) 的最大值。
    samples 为 None 时逐元素全检，否则随机抽取 samples 个 (输入, 下标)。
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise ValueError(f"grad_check: 输入必须为 f64，当前 {x.dtype} ({x.name or x.shape})")
        if not x.requires_grad:
            raise ValueError(f"grad_check: 输入需要 requires_grad ({x.name or x.shape})")
        if not x.data.flags.c_contiguous:
            x.data = np.ascontiguousarray(x.data)

    with Tape() as tape:
        loss = fn(*inputs)
    base = loss.item()
    grads = tape.backward(loss, accumulate=False)

    # 两次前向不一致说明函数含随机性
    again = _scalar(fn, inputs)
    if again != base:
        raise RuntimeError(f"grad_check: 函数非确定性 (两次前向 {base!r} != {again!r})")

    if samples is None:
        picks = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([x.size for x in inputs], dtype=np.float64)
        owners = rng.choice(len(inputs), size=samples, p=sizes / sizes.sum())
        picks = [(int(i), int(rng.integers(inputs[i].size))) for i in owners]

    worst = 0.0
    for i, j in picks:
        x = inputs[i]
        flat = x.data.reshape(-1)
        analytic = grads.get(x)
        a = 0.0 if analytic is None else float(analytic.reshape(-1)[j])
        orig = flat[j]
        flat[j] = orig + h
        fp = _scalar(fn, inputs)
        flat[j] = orig - h
        fm = _scalar(fn, inputs)
        flat[j] = orig
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
    return worst
