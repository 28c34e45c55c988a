# core/dct2d.py
# MIT License - See LICENSE for details
import math
from dataclasses import dataclass
from threading import Lock

import numpy as np

from core.autograd import Tensor, resolve_dtype
from core.ops import record


def dct_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """正交 DCT-II 矩阵，行为频率: C[p, m] = α_p cos((2m+1)pπ/2n)"""
    if n < 1:
        raise ValueError(f"DCT 尺寸必须 >= 1，当前 {n}")
    m = np.arange(n, dtype=np.float64)
    p = np.arange(n, dtype=np.float64)[:, None]
    mat = np.cos((2 * m + 1) * p * math.pi / (2 * n))
    # 正交缩放: α_0 = √(1/n)，α_p = √(2/n)
    mat *= math.sqrt(2.0 / n)
    mat[0] = math.sqrt(1.0 / n)
    return mat.astype(dtype)


def _sandwich(left: np.ndarray, x: np.ndarray, right: np.ndarray) -> np.ndarray:
    """对末两维逐片计算 left @ x @ right，两次各合并成一次 GEMM"""
    *lead, M, N = x.shape
    s = x.reshape(-1, M, N)
    S = s.shape[0]
    y = (s.reshape(S * M, N) @ right).reshape(S, M, right.shape[1])
    z = np.tensordot(left, y, axes=([1], [1]))
    return np.ascontiguousarray(z.transpose(1, 0, 2)).reshape(*lead, left.shape[0], right.shape[1])


@dataclass(frozen=True, eq=False)
class DctPlan:
    M: int
    N: int
    C: np.ndarray
    D: np.ndarray

    @property
    def dtype(self):
        return self.C.dtype

    def _check(self, x: np.ndarray, op: str):
        if x.ndim < 2 or x.shape[-2:] != (self.M, self.N):
            raise ValueError(f"{op}: 输入空间维度 {x.shape[-2:]} 与 plan ({self.M}, {self.N}) 不符")

    def forward(self, a: np.ndarray) -> np.ndarray:
        """B = C A Dᵀ (numpy 层面，不录制)"""
        self._check(a, "dct2d")
        return _sandwich(self.C, a, self.D.T)

    def inverse(self, b: np.ndarray) -> np.ndarray:
        """A = Cᵀ B D"""
        self._check(b, "idct2d")
        return _sandwich(self.C.T, b, self.D)


_plans = {}
_plans_lock = Lock()


def build_plan(M: int, N: int, dtype="f64") -> DctPlan:
    """构建 (M, N) 的 DCT plan；按 (M, N, dtype) 进程内缓存"""
    if M < 1 or N < 1:
        raise ValueError(f"build_plan: M, N 必须 >= 1，当前 ({M}, {N})")
    dtype = resolve_dtype(dtype)
    key = (int(M), int(N), dtype.str)
    with _plans_lock:
        plan = _plans.get(key)
        if plan is None:
            C = dct_matrix(M, dtype)
            D = dct_matrix(N, dtype)
            C.flags.writeable = False
            D.flags.writeable = False
            plan = DctPlan(int(M), int(N), C, D)
            _plans[key] = plan
    return plan


def dct2d(plan: DctPlan, a: Tensor) -> Tensor:
    out = plan.forward(a.data)

    def backward(g):
        # 线性映射，VJP 为转置: Cᵀ g D
        return (plan.inverse(g),)

    return record("dct2d", (a,), out, backward, dtype=a.dtype)


def idct2d(plan: DctPlan, b: Tensor) -> Tensor:
    out = plan.inverse(b.data)

    def backward(g):
        return (plan.forward(g),)

    return record("idct2d", (b,), out, backward, dtype=b.dtype)


def dct2d_naive(a) -> np.ndarray:
    """直接双重求和 O(M²N²)，仅作测试基准；不依赖 plan 的矩阵"""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"dct2d_naive: 需要单个二维切片，当前 {a.shape}")
    M, N = a.shape
    m = np.arange(M)
    n = np.arange(N)
    out = np.zeros((M, N))
    for p in range(M):
        ap = math.sqrt((1.0 if p == 0 else 2.0) / M)
        cm = np.cos(math.pi * (2 * m + 1) * p / (2 * M))
        for q in range(N):
            aq = math.sqrt((1.0 if q == 0 else 2.0) / N)
            cn = np.cos(math.pi * (2 * n + 1) * q / (2 * N))
            out[p, q] = ap * aq * np.sum(a * np.outer(cm, cn))
    return out
