# model/config.py
# MIT License - See LICENSE for details
import json
from dataclasses import dataclass, asdict, replace

K_MODES = ("shared_fve", "individual_fve", "learnable", "fixed")
GATES = ("silu", "relu", "none")


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple = (2, 2, 6, 2)
    channels: tuple = (96, 192, 384, 768)
    mlp_ratio: int = 4
    drop_path: float = 0.1
    num_classes: int = 1000
    input_extent: int = 224
    in_chans: int = 3
    dtype: str = "f32"
    fve_canonical: int = 128        # stage 1 的规范补零尺寸，逐 stage 减半
    t: float = 1.0
    k_mode: str = "shared_fve"
    fixed_k: float = 1.0
    use_dwconv: bool = True
    gate: str = "silu"
    # 非 0 时 FVE / k 表保持在该输入尺寸，预测出的 k 插值到实际特征尺寸
    k_source_extent: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        object.__setattr__(self, "channels", tuple(int(x) for x in self.channels))

    def validate(self) -> "ModelConfig":
        if len(self.layers) != 4 or len(self.channels) != 4:
            raise ValueError(f"配置错误: 需要 4 个 stage，当前 layers={self.layers} channels={self.channels}")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ValueError(f"配置错误: 通道数必须严格递增 {self.channels}")
        if any(n < 1 for n in self.layers):
            raise ValueError(f"配置错误: 每个 stage 至少 1 层 {self.layers}")
        if self.input_extent % 32 != 0 or self.input_extent < 32:
            raise ValueError(f"配置错误: 输入尺寸 {self.input_extent} 必须是 32 的倍数")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"配置错误: drop_path 必须在 [0, 1) 内，当前 {self.drop_path}")
        if self.k_mode not in K_MODES:
            raise ValueError(f"配置错误: 未知 k_mode {self.k_mode}，可选 {K_MODES}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"配置错误: dtype 仅支持 f32/f64，当前 {self.dtype}")
        if self.num_classes < 1:
            raise ValueError(f"配置错误: num_classes 必须 >= 1，当前 {self.num_classes}")
        if self.gate not in GATES:
            raise ValueError(f"配置错误: 未知 gate {self.gate}，可选 {GATES}")
        if self.k_source_extent and (self.k_source_extent % 32 or self.k_source_extent < 32):
            raise ValueError(f"配置错误: k_source_extent {self.k_source_extent} 必须为 0 或 32 的倍数")
        return self

    def stage_extent(self, stage: int, input_extent: int = None) -> int:
        """stage s 的特征尺寸 (H/4)/2^s"""
        return (input_extent or self.input_extent) // 4 // (2 ** stage)

    def table_extent(self, stage: int) -> int:
        """FVE / k 表的尺寸；k_source_extent 为 0 时与特征尺寸相同"""
        return self.stage_extent(stage, self.k_source_extent or None)

    def stage_canonical(self, stage: int) -> int:
        return max(self.fve_canonical // (2 ** stage), 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        d["channels"] = list(self.channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"配置错误: 未知字段 {sorted(unknown)}")
        return cls(**data).validate()

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs).validate()


PRESETS = {
    "tiny": ModelConfig(layers=(2, 2, 6, 2), channels=(96, 192, 384, 768), drop_path=0.1),
    "small": ModelConfig(layers=(2, 2, 18, 2), channels=(96, 192, 384, 768), drop_path=0.3),
    "base": ModelConfig(layers=(2, 2, 18, 2), channels=(128, 256, 512, 1024), drop_path=0.5),
    # 桌面规模 (自定义)，覆盖所有代码路径
    "micro": ModelConfig(layers=(2, 2, 2, 2), channels=(16, 32, 64, 128), drop_path=0.0,
                         num_classes=10, input_extent=32, fve_canonical=16),
}


def get_preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"未知预设 {name}，可选 {sorted(PRESETS)}")
    return PRESETS[name]


def load_model_config(spec: str) -> ModelConfig:
    """预设名或 JSON 文件路径；JSON 可含 "preset" 字段作为基底"""
    if spec in PRESETS:
        return PRESETS[spec]
    with open(spec, "r", encoding="utf-8") as f:
        data = json.load(f)
    base = data.pop("preset", None)
    if base is not None:
        return get_preset(base).with_overrides(**data)
    return ModelConfig.from_dict(data)
