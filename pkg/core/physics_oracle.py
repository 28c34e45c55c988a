# core/physics_oracle.py
# MIT License - See LICENSE for details
import math
from dataclasses import dataclass, replace

import numpy as np

from core.autograd import Tensor
from core.dct2d import build_plan
from core.hco import frequency_grid, hco_forward, uniform_coefficients

STABILITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class HeatGrid:
    u: np.ndarray       # H×W 温度场
    k: float            # 导热系数 (patch²/时间)
    dt: float           # 时间步长

    def check_stability(self):
        if self.k < 0:
            raise ValueError(f"ftcs: 导热系数必须 >= 0，当前 {self.k}")
        if self.k * self.dt > 0.25 + STABILITY_TOL:
            raise ValueError(f"ftcs: 不满足稳定性条件 dt <= 1/(4k) (k={self.k}, dt={self.dt})")


def laplacian(u: np.ndarray) -> np.ndarray:
    """五点拉普拉斯；镜像幽灵格 (∂u/∂n = 0)"""
    p = np.pad(u, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * u


def ftcs_step(g: HeatGrid) -> HeatGrid:
    g.check_stability()
    return replace(g, u=g.u + g.k * g.dt * laplacian(g.u))


def ftcs_solve(u0, k: float, t: float, dt: float) -> np.ndarray:
    if t < 0:
        raise ValueError(f"ftcs_solve: t 必须 >= 0，当前 {t}")
    u0 = np.asarray(u0, dtype=np.float64)
    steps = int(round(t / dt))
    if abs(steps * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"ftcs_solve: t/dt 不是整数 (t={t}, dt={dt})")
    g = HeatGrid(u0.copy(), float(k), float(dt))
    g.check_stability()
    for _ in range(steps):
        g = ftcs_step(g)
    return g.u


def band_limited_field(M: int, N: int, cutoff: int, seed: int = 0) -> np.ndarray:
    """频谱仅在 p, q <= cutoff 内非零的随机场 (经 IDCT 合成)"""
    rng = np.random.default_rng(seed)
    spec = np.zeros((M, N))
    spec[:cutoff + 1, :cutoff + 1] = rng.uniform(-1.0, 1.0, size=(min(cutoff + 1, M), min(cutoff + 1, N)))
    return build_plan(M, N, "f64").inverse(spec)


def hco_uniform(u0, k: float, t: float) -> np.ndarray:
    u0 = np.asarray(u0, dtype=np.float64)
    M, N = u0.shape
    coeff = uniform_coefficients(k, frequency_grid(M, N, "f64"), 1, t, "f64")
    out = hco_forward(build_plan(M, N, "f64"), coeff, Tensor(u0.reshape(1, 1, M, N)))
    return out.data.reshape(M, N)


def compare_hco_ftcs(u0, k: float, t: float) -> float:
    """
    ‖HCO(u0) − FTCS(u0)‖₂ / ‖u0‖₂。
    步长不超过 min(0.01, 1/(8k))，并取 t 的整数分之一；u0 ≡ 0 时返回绝对误差。
    """
    u0 = np.asarray(u0, dtype=np.float64)
    dt = 0.01 if k == 0 else min(0.01, 1.0 / (8.0 * k))
    if t > 0:
        steps = max(1, math.ceil(t / dt - 1e-9))
        dt = t / steps
    spectral = hco_uniform(u0, k, t)
    explicit = ftcs_solve(u0, k, t, dt)
    diff = float(np.linalg.norm(spectral - explicit))
    norm = float(np.linalg.norm(u0))
    return diff / norm if norm > 0 else diff


def cutoff_sweep(M: int, k: float, t: float, seed: int = 0) -> dict:
    """诊断用：不同频带上限下的误差 {cutoff: err}"""
    return {c: compare_hco_ftcs(band_limited_field(M, M, c, seed), k, t) for c in (M // 8, M // 4, M // 2)}
