# model/backbone.py
# MIT License - See LICENSE for details
import numpy as np

from core.autograd import Tensor
from core.hco import FveTable, RESIZE_STRATEGIES, resize_fve
from model.config import ModelConfig
from model.layers import Block, Initializer, Stem, Downsample, HeatLayer, ClassifierHead

# 表对齐策略之外再加 "interpolate_k"：表保持原尺寸，前向时插值预测出的 k
ALIGN_STRATEGIES = RESIZE_STRATEGIES + ("interpolate_k",)


class Stage(Block):
    """一个 stage：可选下采样 + 若干导热层；shared_fve 模式下持有本 stage 的 FVE"""

    def __init__(self, index, dim, depth, extent, cfg: ModelConfig, init: Initializer,
                 drop_rates, in_dim=None):
        super().__init__(init.dtype)
        self.index = index
        self.dim = dim
        self.fve = None
        self.downsample = self.add_child("downsample", Downsample(in_dim, dim, init)) if in_dim else None
        if cfg.k_mode == "shared_fve":
            self.set_fve(FveTable.create(extent, extent, dim, index, init.rng, init.dtype, name="fve"))
        self.layers = []
        for i in range(depth):
            layer = HeatLayer(dim, extent, init, mlp_ratio=cfg.mlp_ratio, drop_path=float(drop_rates[i]),
                              k_mode=cfg.k_mode, fixed_k=cfg.fixed_k, t=cfg.t,
                              use_dwconv=cfg.use_dwconv, stage=index, gate=cfg.gate,
                              k_interp=bool(cfg.k_source_extent))
            self.layers.append(self.add_child(f"layers.{i}", layer))

    def set_fve(self, table: FveTable):
        # 参数名与属性同名，set_param 会覆盖 self.fve，表须最后赋值
        self.set_param("fve", table.embeddings)
        self.fve = table

    def forward(self, x, training=False, rng=None):
        if self.downsample is not None:
            x = self.downsample(x)
        for layer in self.layers:
            x = layer.forward(x, self.fve, training, rng)
        return x


class Model(Block):
    """
    vHeat 骨干网络:
      stem (1/4) → stage0 → [down → stage1] → [down → stage2] → [down → stage3] → head
    参数按构建顺序命名，例如 stages.2.layers.1.in_w
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        super().__init__(cfg.dtype)
        self.cfg = cfg
        self.seed = int(seed)
        # 训练集归一化统计量 {"mean": [...], "std": [...]}，由训练器写入
        self.norm = None
        # 由 load_checkpoint 填入，供断点续训读取优化器状态
        self.checkpoint = None
        init = Initializer(np.random.default_rng(self.seed), cfg.dtype)

        rates = np.linspace(0.0, cfg.drop_path, sum(cfg.layers))
        self.stem = self.add_child("stem", Stem(cfg.in_chans, cfg.channels[0], init))
        self.stages = []
        offset = 0
        for s, (depth, dim) in enumerate(zip(cfg.layers, cfg.channels)):
            stage = Stage(s, dim, depth, cfg.table_extent(s), cfg, init,
                          rates[offset:offset + depth], in_dim=cfg.channels[s - 1] if s else None)
            self.stages.append(self.add_child(f"stages.{s}", stage))
            offset += depth
        self.head = self.add_child("head", ClassifierHead(cfg.channels[-1], cfg.num_classes, init))

    @property
    def input_extent(self) -> int:
        return self.cfg.input_extent

    def _check_input(self, images: Tensor):
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_chans:
            raise ValueError(f"forward: 需要 [B,{cfg.in_chans},H,W] 输入，当前 {images.shape}")
        H, W = images.shape[2:]
        if H % 32 or W % 32:
            raise ValueError(f"forward: 输入尺寸 {H}x{W} 必须是 32 的倍数")
        if (H, W) != (cfg.input_extent, cfg.input_extent):
            raise ValueError(f"forward: 输入尺寸 {H}x{W} 与模型的 {cfg.input_extent} 不符，"
                             f"请先调用 resize_fves({H})")

    def forward_features(self, images, training=False, rng=None) -> list:
        """返回每个 stage 的输出特征"""
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        self._check_input(x)
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage.forward(x, training, rng)
            feats.append(x)
        return feats

    def forward(self, images, training=False, rng=None) -> Tensor:
        return self.head(self.forward_features(images, training, rng)[-1])

    def resize_fves(self, extent: int, strategy: str = "pad_interpolate"):
        """
        把所有 FVE (及 learnable 模式的 k 表) 对齐到新的输入分辨率。
        interpolate_k 不改动表，记下表对应的输入尺寸，前向时插值每层预测出的 k。
        """
        if strategy not in ALIGN_STRATEGIES:
            raise ValueError(f"resize_fves: 未知策略 {strategy}，可选 {ALIGN_STRATEGIES}")
        if strategy == "interpolate_k":
            source = self.cfg.k_source_extent or self.cfg.input_extent
            self.cfg = self.cfg.with_overrides(input_extent=int(extent), k_source_extent=source)
            for stage in self.stages:
                for layer in stage.layers:
                    layer.k_interp = True
            return self

        cfg = self.cfg.with_overrides(input_extent=int(extent), k_source_extent=0)
        for stage in self.stages:
            s = stage.index
            target = cfg.stage_extent(s)
            canonical = cfg.stage_canonical(s)
            if stage.fve is not None:
                stage.set_fve(resize_fve(stage.fve, target, target, canonical, strategy))
            for layer in stage.layers:
                layer.k_interp = False
                if layer.k_mode == "individual_fve":
                    layer.set_fve(resize_fve(layer.fve, target, target, canonical, strategy))
                elif layer.k_mode == "learnable":
                    table = resize_fve(FveTable(layer.k, s), target, target, canonical, strategy)
                    layer.set_param("k", table.embeddings)
        self.cfg = cfg
        return self


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def forward(model: Model, images, training=False, rng=None) -> Tensor:
    return model.forward(images, training, rng)


def count_parameters(model: Model) -> int:
    return model.num_parameters()
