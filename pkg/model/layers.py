# model/layers.py
# MIT License - See LICENSE for details
import math
from abc import ABC, abstractmethod

import numpy as np

from core.autograd import Tensor, Parameter
from core.dct2d import build_plan
from core.hco import (FveTable, frequency_grid, predict_k, decay_coefficients, interpolate_k,
                      uniform_coefficients, hco_forward)
from core.ops import (add, mul, constant, permute, linear, layer_norm, gelu, silu, relu,
                      depthwise_conv3x3, strided_conv3x3, global_avg_pool)


class Initializer:
    """按调用顺序从同一个 rng 取样，保证同种子构建出相同参数"""

    def __init__(self, rng, dtype="f32"):
        self.rng = rng
        self.dtype = dtype

    def normal(self, shape, std):
        return self.rng.normal(0.0, std, size=shape)

    def kaiming(self, shape, fan_in):
        return self.normal(shape, math.sqrt(2.0 / fan_in))

    @staticmethod
    def zeros(shape):
        return np.zeros(shape)

    @staticmethod
    def ones(shape):
        return np.ones(shape)


class Block(ABC):
    """参数容器：按登记顺序命名参数与子块"""

    def __init__(self, dtype="f32"):
        self.dtype = dtype
        self._params = {}
        self._children = {}

    def add_param(self, name, data) -> Parameter:
        p = Parameter(data, dtype=self.dtype, name=name)
        self._params[name] = p
        setattr(self, name, p)
        return p

    def set_param(self, name, p: Parameter):
        self._params[name] = p
        setattr(self, name, p)

    def add_child(self, name, block):
        self._children[name] = block
        return block

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @abstractmethod
    def forward(self, x, *args, **kwargs): ...

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def drop_path(branch: Tensor, rate: float, training: bool, rng) -> Tensor:
    """随机深度：训练时按样本整支清零并按保留率放大；评估时原样返回"""
    if not training or rate <= 0.0:
        return branch
    keep = 1.0 - rate
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(branch.shape[0]) < keep).astype(np.float64) / keep
    return mul(branch, constant(mask.reshape(-1, *([1] * (branch.ndim - 1))), branch))


def _to_channels_last(x):
    return permute(x, (0, 2, 3, 1))


def _to_channels_first(x):
    return permute(x, (0, 3, 1, 2))


class Stem(Block):
    """3×3 conv s2 → Norm → GELU → 3×3 conv s2 → Norm"""

    def __init__(self, in_chans, dim, init: Initializer):
        super().__init__(init.dtype)
        self.add_param("conv1_w", init.kaiming((dim, in_chans, 3, 3), in_chans * 9))
        self.add_param("conv1_b", init.zeros(dim))
        self.add_param("norm1_w", init.ones(dim))
        self.add_param("norm1_b", init.zeros(dim))
        self.add_param("conv2_w", init.kaiming((dim, dim, 3, 3), dim * 9))
        self.add_param("conv2_b", init.zeros(dim))
        self.add_param("norm2_w", init.ones(dim))
        self.add_param("norm2_b", init.zeros(dim))

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"stem: 输入 {x.shape} 的空间尺寸必须能被 4 整除")
        x = strided_conv3x3(x, self.conv1_w, self.conv1_b)
        x = gelu(layer_norm(x, self.norm1_w, self.norm1_b, axis=1))
        x = strided_conv3x3(x, self.conv2_w, self.conv2_b)
        return layer_norm(x, self.norm2_w, self.norm2_b, axis=1)


class Downsample(Block):
    """3×3 conv s2 → Norm，通道翻倍、空间减半"""

    def __init__(self, in_dim, out_dim, init: Initializer):
        super().__init__(init.dtype)
        self.add_param("conv_w", init.kaiming((out_dim, in_dim, 3, 3), in_dim * 9))
        self.add_param("conv_b", init.zeros(out_dim))
        self.add_param("norm_w", init.ones(out_dim))
        self.add_param("norm_b", init.zeros(out_dim))

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"downsample: 输入 {x.shape} 的空间尺寸必须为偶数")
        x = strided_conv3x3(x, self.conv_w, self.conv_b)
        return layer_norm(x, self.norm_w, self.norm_b, axis=1)


class HeatLayer(Block):
    """
    导热层:
      y = x + DropPath(out(HCO(in(DW(LN(x)))) ∘ SiLU(gate(DW(LN(x))))))
      z = y + DropPath(FFN(LN(y)))
    out、FFN 第二层与 k 预测层零初始化，初始时整层为恒等映射。
    gate 可换成 ReLU 或去掉整个门控分支 (消融)。
    """

    def __init__(self, dim, extent, init: Initializer, mlp_ratio=4, drop_path=0.0,
                 k_mode="shared_fve", fixed_k=1.0, t=1.0, use_dwconv=True, stage=0, gate="silu",
                 k_interp=False):
        super().__init__(init.dtype)
        self.dim = dim
        self.drop_path = drop_path
        self.k_mode = k_mode
        self.fixed_k = fixed_k
        self.t = t
        self.use_dwconv = use_dwconv
        self.gate = gate
        # 为真时 k 在表尺寸上预测后插值到特征尺寸
        self.k_interp = k_interp
        self.fve = None
        hidden = dim * mlp_ratio

        self.add_param("ln1_w", init.ones(dim))
        self.add_param("ln1_b", init.zeros(dim))
        if use_dwconv:
            self.add_param("dw_w", init.kaiming((dim, 3, 3), 9))
            self.add_param("dw_b", init.zeros(dim))
        else:
            # 消融：用 LayerNorm 替代深度卷积
            self.add_param("dwn_w", init.ones(dim))
            self.add_param("dwn_b", init.zeros(dim))
        self.add_param("in_w", init.normal((dim, dim), 0.02))
        self.add_param("in_b", init.zeros(dim))
        if gate != "none":
            self.add_param("gate_w", init.normal((dim, dim), 0.02))
            self.add_param("gate_b", init.zeros(dim))
        self.add_param("out_w", init.zeros((dim, dim)))
        self.add_param("out_b", init.zeros(dim))

        if k_mode == "individual_fve":
            self.fve = FveTable.create(extent, extent, dim, stage, init.rng, init.dtype, name="fve")
            self.set_param("fve_table", self.fve.embeddings)
        if k_mode in ("shared_fve", "individual_fve"):
            self.add_param("k_w", init.zeros((dim, dim)))
            self.add_param("k_b", init.zeros(dim))
        elif k_mode == "learnable":
            self.add_param("k", init.zeros((extent, extent, dim)))

        self.add_param("ln2_w", init.ones(dim))
        self.add_param("ln2_b", init.zeros(dim))
        self.add_param("fc1_w", init.normal((dim, hidden), 0.02))
        self.add_param("fc1_b", init.zeros(hidden))
        self.add_param("fc2_w", init.zeros((hidden, dim)))
        self.add_param("fc2_b", init.zeros(dim))

    def set_fve(self, table: FveTable):
        self.fve = table
        self.set_param("fve_table", table.embeddings)

    def k_field(self, fve, extent) -> Tensor:
        """按 k_mode 得到对齐到 extent 的 M×N×C 导热系数"""
        M, N = extent
        if self.k_mode == "fixed":
            return Tensor(np.full((M, N, self.dim), self.fixed_k), dtype=self.dtype)
        if self.k_mode == "learnable":
            k = self.k
        else:
            table = self.fve if self.k_mode == "individual_fve" else fve
            if table is None:
                raise ValueError("heat_layer: shared_fve 模式需要传入 stage 的 FveTable")
            if not self.k_interp:
                return predict_k(table, self.k_w, self.k_b, extent).k
            k = predict_k(table, self.k_w, self.k_b).k
        if k.shape[:2] != (M, N):
            if not self.k_interp:
                raise ValueError(f"heat_layer: k 尺寸 {k.shape[:2]} 与特征尺寸 {extent} 不符，"
                                 f"请先调用 resize_fves")
            k = interpolate_k(k, M, N)
        return k

    def coefficients(self, fve, extent):
        """按 k_mode 得到 M×N×C 衰减系数"""
        grid = frequency_grid(*extent, self.dtype)
        if self.k_mode == "fixed":
            return uniform_coefficients(self.fixed_k, grid, self.dim, self.t, self.dtype)
        return decay_coefficients(self.k_field(fve, extent), grid, self.t)

    def forward(self, x, fve=None, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ValueError(f"heat_layer: 输入 {x.shape} 与通道数 {self.dim} 不符")
        H, W = x.shape[2:]
        coeff = self.coefficients(fve, (H, W))

        h = layer_norm(x, self.ln1_w, self.ln1_b, axis=1)
        if self.use_dwconv:
            h = depthwise_conv3x3(h, self.dw_w, self.dw_b)
        else:
            h = layer_norm(h, self.dwn_w, self.dwn_b, axis=1)
        h = _to_channels_last(h)
        a = _to_channels_first(linear(h, self.in_w, self.in_b))
        a = _to_channels_last(hco_forward(build_plan(H, W, self.dtype), coeff, a))
        if self.gate != "none":
            g = linear(h, self.gate_w, self.gate_b)
            a = mul(a, silu(g) if self.gate == "silu" else relu(g))
        branch = _to_channels_first(linear(a, self.out_w, self.out_b))
        y = add(x, drop_path(branch, self.drop_path, training, rng))

        f = _to_channels_last(layer_norm(y, self.ln2_w, self.ln2_b, axis=1))
        f = linear(gelu(linear(f, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)
        return add(y, drop_path(_to_channels_first(f), self.drop_path, training, rng))


def heat_layer_forward(params: HeatLayer, fve, x, training=False, rng=None):
    return params.forward(x, fve, training, rng)


class ClassifierHead(Block):
    """全局平均池化 → Norm → Linear (零初始化，初始 logits 均匀)"""

    def __init__(self, dim, num_classes, init: Initializer):
        super().__init__(init.dtype)
        self.num_classes = num_classes
        self.add_param("norm_w", init.ones(dim))
        self.add_param("norm_b", init.zeros(dim))
        self.add_param("fc_w", init.zeros((dim, num_classes)))
        self.add_param("fc_b", init.zeros(num_classes))

    def forward(self, x):
        pooled = layer_norm(global_avg_pool(x), self.norm_w, self.norm_b, axis=1)
        return linear(pooled, self.fc_w, self.fc_b)


def classifier_head(head: ClassifierHead, x):
    return head.forward(x)


def stem(block: Stem, image):
    return block.forward(image)


def downsample(block: Downsample, x):
    return block.forward(x)
