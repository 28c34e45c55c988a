# core/hco.py
# MIT License - See LICENSE for details
import math
from dataclasses import dataclass
from threading import Lock

import numpy as np

from core.autograd import Tensor, Parameter, resolve_dtype
from core.dct2d import DctPlan, dct2d, idct2d
from core.ops import constant, record, linear, matmul, mul, permute, reshape

DEFAULT_T = 1.0         # 导热时间固定，k·t 只以乘积出现
FVE_INIT_STD = 0.02
MAX_EXPONENT = 60.0     # e^60 在 f32 下仍有限
RESIZE_STRATEGIES = ("pad_interpolate", "interpolate", "pad")


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    M: int
    N: int
    omega2: np.ndarray


_grids = {}
_grids_lock = Lock()


def frequency_grid(M: int, N: int, dtype="f64") -> FrequencyGrid:
    """omega2[p][q] = (πp/M)² + (πq/N)²"""
    if M < 1 or N < 1:
        raise ValueError(f"frequency_grid: M, N 必须 >= 1，当前 ({M}, {N})")
    dtype = resolve_dtype(dtype)
    key = (int(M), int(N), dtype.str)
    with _grids_lock:
        grid = _grids.get(key)
        if grid is None:
            wx = (math.pi * np.arange(M) / M) ** 2
            wy = (math.pi * np.arange(N) / N) ** 2
            omega2 = (wx[:, None] + wy[None, :]).astype(dtype)
            omega2.flags.writeable = False
            grid = FrequencyGrid(int(M), int(N), omega2)
            _grids[key] = grid
    return grid


class FveTable:
    """频率值嵌入 (M×N×D)，同一 stage 的所有层共享一张"""

    def __init__(self, embeddings: Parameter, stage: int = 0):
        if embeddings.ndim != 3:
            raise ValueError(f"FVE 必须是 M×N×D，当前 {embeddings.shape}")
        self.embeddings = embeddings
        self.stage = stage

    @classmethod
    def create(cls, M, N, D, stage=0, rng=None, dtype="f32", name=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        data = rng.normal(0.0, FVE_INIT_STD, size=(M, N, D))
        return cls(Parameter(data, dtype=dtype, name=name or f"stages.{stage}.fve"), stage)

    @property
    def extent(self):
        return self.embeddings.shape[:2]

    @property
    def width(self):
        return self.embeddings.shape[2]


@dataclass(frozen=True, eq=False)
class ThermalField:
    k: Tensor                       # M×N×C，不限符号
    t: float = DEFAULT_T
    coeff: Tensor = None            # 缓存 e^(−k·ω²·t)

    def conduct(self, grid: FrequencyGrid) -> "ThermalField":
        return ThermalField(self.k, self.t, decay_coefficients(self.k, grid, self.t))


def predict_k(fve: FveTable, W: Tensor, b: Tensor, extent=None) -> ThermalField:
    """k[p][q][c] = Σ_d fve[p][q][d]·W[d][c] + b[c]"""
    if extent is not None and tuple(fve.extent) != tuple(extent):
        raise ValueError(f"predict_k: FVE 尺寸 {tuple(fve.extent)} 与特征尺寸 {tuple(extent)} 不符，"
                         f"请先调用 resize_fve")
    if W.ndim != 2 or W.shape[0] != fve.width or b.shape != (W.shape[1],):
        raise ValueError(f"predict_k: 线性层维度 W{W.shape} b{b.shape} 与 FVE 宽度 {fve.width} 不符")
    return ThermalField(k=linear(fve.embeddings, W, b))


def decay_coefficients(k, grid: FrequencyGrid, t: float = DEFAULT_T) -> Tensor:
    """coeff = exp(−k ∘ ω² · t)，对 k 可微；DC 位置恒为 1"""
    if isinstance(k, ThermalField):
        k = k.k
    if not np.isfinite(k.data).all():
        raise ValueError("decay_coefficients: k 含非有限值")
    if k.ndim == 2:
        k = reshape(k, (*k.shape, 1))
    if k.ndim != 3 or k.shape[:2] != (grid.M, grid.N):
        raise ValueError(f"decay_coefficients: k 维度 {k.shape} 与频率网格 ({grid.M}, {grid.N}) 不符")
    w2t = grid.omega2.astype(k.dtype)[:, :, None] * t
    expo = -k.data * w2t
    clipped = expo > MAX_EXPONENT
    coeff = np.exp(np.minimum(expo, MAX_EXPONENT))

    def backward(g):
        gk = -g * coeff * w2t
        gk[clipped] = 0
        return (gk,)

    return record("decay", (k,), coeff, backward, dtype=k.dtype)


def uniform_coefficients(k: float, grid: FrequencyGrid, channels: int = 1, t: float = DEFAULT_T,
                         dtype="f64") -> Tensor:
    field = Tensor(np.full((grid.M, grid.N, channels), k), dtype=dtype)
    return decay_coefficients(field, grid, t)


def hco_forward(plan: DctPlan, coeff, u0: Tensor) -> Tensor:
    """U^t = IDCT(DCT(U⁰) ∘ coeff)，coeff 为 M×N×C (或 M×N×1)"""
    if isinstance(coeff, ThermalField):
        coeff = coeff.coeff
    if coeff.ndim == 2:
        coeff = reshape(coeff, (*coeff.shape, 1))
    if u0.ndim != 4 or u0.shape[2:] != (plan.M, plan.N):
        raise ValueError(f"hco_forward: 输入 {u0.shape} 与 plan ({plan.M}, {plan.N}) 不符")
    if coeff.shape[:2] != (plan.M, plan.N) or coeff.shape[2] not in (1, u0.shape[1]):
        raise ValueError(f"hco_forward: 系数 {coeff.shape} 与输入 {u0.shape} 不符")
    spectrum = dct2d(plan, u0)
    filtered = mul(spectrum, permute(coeff, (2, 0, 1)))
    return idct2d(plan, filtered)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # 角点对齐的一维线性插值权重，两端样本保持不变
    R = np.zeros((n_out, n_in))
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for i in range(n_out):
        x = i * scale
        i0 = min(int(math.floor(x)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = x - i0
        R[i, i0] += 1.0 - w
        R[i, i1] += w
    return R


def _bilinear(table: np.ndarray, M: int, N: int) -> np.ndarray:
    if table.shape[:2] == (M, N):
        return table.copy()
    RM = _interp_matrix(table.shape[0], M)
    RN = _interp_matrix(table.shape[1], N)
    return np.einsum("ip,pqd,jq->ijd", RM, table, RN)


def interpolate_k(k: Tensor, M: int, N: int) -> Tensor:
    """把 M'×N'×C 的预测 k 双线性插值到 M×N，对 k 可微"""
    if k.ndim != 3:
        raise ValueError(f"interpolate_k: k 必须是 M×N×C，当前 {k.shape}")
    if k.shape[:2] == (M, N):
        return k
    RM = constant(_interp_matrix(k.shape[0], M).T, k)
    RN = constant(_interp_matrix(k.shape[1], N).T, k)
    x = matmul(permute(k, (2, 1, 0)), RM)           # C×N'×M
    x = matmul(permute(x, (0, 2, 1)), RN)           # C×M×N
    return permute(x, (1, 2, 0))


def resize_fve(fve: FveTable, M: int, N: int, canonical=None, strategy: str = "pad_interpolate") -> FveTable:
    """
    对齐 FVE 尺寸以迁移到新分辨率。
    pad_interpolate: 右下(高频)区域补零到 max(canonical, 源尺寸)，再双线性插值到 (M, N)；
                     canonical 为 None 时不额外补零
    interpolate:     直接插值
    pad:             补零 / 裁剪
    """
    if M < 1 or N < 1:
        raise ValueError(f"resize_fve: 目标尺寸必须 >= 1，当前 ({M}, {N})")
    if strategy not in RESIZE_STRATEGIES:
        raise ValueError(f"resize_fve: 未知策略 {strategy}，可选 {RESIZE_STRATEGIES}")
    src = fve.embeddings.data
    name = fve.embeddings.name
    sm, sn, d = src.shape
    if (sm, sn) == (M, N):
        return FveTable(Parameter(src, dtype=src.dtype, name=name), fve.stage)

    if strategy == "interpolate":
        out = _bilinear(src.astype(np.float64), M, N)
    elif strategy == "pad":
        out = np.zeros((M, N, d))
        out[:min(sm, M), :min(sn, N)] = src[:min(sm, M), :min(sn, N)]
    else:
        if canonical is None:
            cm, cn = sm, sn
        else:
            cm, cn = (canonical, canonical) if isinstance(canonical, int) else canonical
        pm, pn = max(cm, sm), max(cn, sn)
        padded = np.zeros((pm, pn, d))
        padded[:sm, :sn] = src
        out = _bilinear(padded, M, N)
    return FveTable(Parameter(out, dtype=src.dtype, name=name), fve.stage)
