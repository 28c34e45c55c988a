# training/optim.py
# MIT License - See LICENSE for details
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 5
    warmup_epochs: int = 1
    label_smoothing: float = 0.1
    min_lr: float = 0.0

    @classmethod
    def from_section(cls, section: dict, **overrides) -> "OptimConfig":
        """从 AppConfig 的 train 段构造；None 值的覆盖项忽略"""
        data = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        data.update({k: v for k, v in overrides.items() if v is not None})
        data["betas"] = tuple(data.get("betas", (0.9, 0.999)))
        return cls(**data)


class CosineSchedule:
    """线性 warmup 后余弦衰减到 min_lr，按已完成的更新步数取值"""

    def __init__(self, base_lr, warmup_steps, total_steps, min_lr=0.0):
        self.base_lr = base_lr
        self.warmup_steps = int(warmup_steps)
        self.total_steps = max(int(total_steps), 1)
        self.min_lr = min_lr

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


def decays(name: str, p) -> bool:
    """权重衰减只作用于 ndim >= 2 的权重，FVE 与 k 表除外"""
    leaf = name.rsplit(".", 1)[-1]
    return p.ndim >= 2 and leaf not in ("fve", "fve_table", "k")


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """解耦权重衰减的 Adam: p -= lr·(m̂/(√v̂+eps) + wd·p)"""

    def __init__(self, named_params, cfg: OptimConfig, schedule=None, state: OptimState = None):
        self.params = dict(named_params)
        self.cfg = cfg
        self.schedule = schedule
        self.state = state or OptimState()
        for name, p in self.params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    @property
    def lr(self) -> float:
        return self.schedule(self.state.step) if self.schedule else self.cfg.lr

    def restore(self, records: dict, step: int):
        """从检查点的 m.<name> / v.<name> 记录恢复"""
        for name, p in self.params.items():
            m, v = records.get(f"m.{name}"), records.get(f"v.{name}")
            if m is not None and v is not None:
                self.state.m[name] = m.astype(p.dtype).reshape(p.shape)
                self.state.v[name] = v.astype(p.dtype).reshape(p.shape)
        self.state.step = int(step)

    def step(self, grads: dict, lr: float = None) -> float:
        """grads: {名称: 梯度}；缺失的参数按零梯度处理"""
        lr = self.lr if lr is None else lr
        b1, b2 = self.cfg.betas
        eps = self.cfg.eps
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.state.m[name]
            v = self.state.v[name]
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            wd = self.cfg.weight_decay if decays(name, p) else 0.0
            p.data -= (lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)).astype(p.dtype, copy=False)
        return lr
