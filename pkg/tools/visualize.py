# tools/visualize.py
# MIT License - See LICENSE for details
import os
from dataclasses import dataclass

import numpy as np

from core.autograd import Tensor
from core.dct2d import build_plan
from core.hco import frequency_grid, decay_coefficients, hco_forward
from core.settings import silent_log


@dataclass
class HeatFrame:
    t: float
    field: np.ndarray       # 未归一化的温度场
    image: np.ndarray       # uint8 灰度图
    path: str = None

    @property
    def raw_max(self) -> float:
        return float(self.field.max())


def heat_source(extent, source) -> np.ndarray:
    """source = (x, y)，x 为列、y 为行"""
    M, N = extent
    x, y = source
    if not (0 <= x < N and 0 <= y < M):
        raise ValueError(f"visualize: 热源 ({x}, {y}) 超出 {N}x{M} 范围")
    u = np.zeros((M, N))
    u[y, x] = 1.0
    return u


def layer_k_map(model, stage: int, layer: int, channel: int = 0) -> np.ndarray:
    """取训练好的某层在某通道上的 k (M×N)"""
    if not 0 <= stage < len(model.stages):
        raise ValueError(f"visualize: stage {stage} 不存在 (共 {len(model.stages)} 个)")
    st = model.stages[stage]
    if not 0 <= layer < len(st.layers):
        raise ValueError(f"visualize: stage {stage} 没有第 {layer} 层 (共 {len(st.layers)} 层)")
    hl = st.layers[layer]
    if not 0 <= channel < hl.dim:
        raise ValueError(f"visualize: 通道 {channel} 超出 [0, {hl.dim})")
    extent = model.cfg.stage_extent(stage)
    k = hl.k_field(st.fve, (extent, extent))
    return k.data[:, :, channel].astype(np.float64)


def to_gray(u: np.ndarray) -> np.ndarray:
    """按本图最大值缩放到 [0, 255]，负的振铃截为 0"""
    peak = u.max()
    if peak <= 0:
        return np.zeros(u.shape, dtype=np.uint8)
    return np.clip(np.rint(np.maximum(u, 0.0) / peak * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray):
    H, W = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_png(path, image: np.ndarray):
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError("未安装 Pillow，无法输出 PNG (可改用 PGM)") from None
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)


def visualize_conduction(source, times, out_dir=None, k=1.0, extent=33, model=None, layer=(0, 0),
                         channel=0, fmt="pgm", log_callback=None) -> list:
    """
    单点热源在给定 k 下随时间的扩散。
    model 为 None 时使用均匀 k 与 extent×extent 网格；否则使用 model 第 layer=(stage, 层) 的预测 k。
    out_dir 为 None 时只返回帧，不写文件。
    """
    log = log_callback or silent_log
    if fmt not in ("pgm", "png"):
        raise ValueError(f"visualize: 未知输出格式 {fmt}")
    if model is not None:
        kmap = layer_k_map(model, layer[0], layer[1], channel)
        desc = f"stage {layer[0]} 层 {layer[1]} 通道 {channel}"
    else:
        if k < 0:
            raise ValueError(f"visualize: 均匀 k 必须 >= 0，当前 {k}")
        kmap = np.full((extent, extent), float(k))
        desc = f"均匀 k={k}"
    M, N = kmap.shape
    u0 = heat_source((M, N), source)
    plan = build_plan(M, N, "f64")
    grid = frequency_grid(M, N, "f64")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    frames = []
    for t in times:
        if t < 0:
            raise ValueError(f"visualize: t 必须 >= 0，当前 {t}")
        coeff = decay_coefficients(Tensor(kmap, dtype="f64"), grid, float(t))
        u = hco_forward(plan, coeff, Tensor(u0.reshape(1, 1, M, N))).data.reshape(M, N)
        frame = HeatFrame(float(t), u, to_gray(u))
        if out_dir:
            frame.path = os.path.join(out_dir, f"heat_t{t:g}.{fmt}")
            (write_png if fmt == "png" else write_pgm)(frame.path, frame.image)
        frames.append(frame)
        log(f"[系统] 导热可视化 ({desc}) t={t:g}: 峰值 {frame.raw_max:.4g}")
    return frames
