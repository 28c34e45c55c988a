# tools/attention.py
# MIT License - See LICENSE for details
import math

import numpy as np


def random_projections(channels: int, seed: int = 0, dtype=np.float32):
    """固定种子的 Q/K/V 投影，按 1/√C 缩放"""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(channels)
    return tuple((rng.normal(size=(channels, channels)) * scale).astype(dtype) for _ in range(3))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention_baseline(x: np.ndarray, projections=None, seed: int = 0, chunk: int = None) -> np.ndarray:
    """
    单头全局自注意力: softmax(Q Kᵀ / √C) V，每张图的 H·W 个位置互为 token。
    x: [B,C,H,W]，返回同形状。chunk 给定时按查询分块，峰值内存降为 chunk×N。
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"attention: 需要 [B,C,H,W] 输入，当前 {x.shape}")
    B, C, H, W = x.shape
    wq, wk, wv = projections if projections is not None else random_projections(C, seed, x.dtype)
    tokens = x.reshape(B, C, H * W).transpose(0, 2, 1)
    q = tokens @ wq
    k = tokens @ wk
    v = tokens @ wv
    scale = 1.0 / math.sqrt(C)
    n = H * W
    step = chunk or n
    out = np.empty_like(v)
    for start in range(0, n, step):
        scores = (q[:, start:start + step] @ k.transpose(0, 2, 1)) * scale
        out[:, start:start + step] = softmax_rows(scores) @ v
    return out.transpose(0, 2, 1).reshape(B, C, H, W)
