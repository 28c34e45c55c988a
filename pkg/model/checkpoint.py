# model/checkpoint.py
# MIT License - See LICENSE for details
"""
检查点二进制格式 (全部小端):
  magic    8 字节  b"VHEAT001"
  u32      header JSON 长度，随后 UTF-8 JSON
           {"format_version", "config", "seed", "step", "norm"}
  u32      记录数
  记录      u32 名称长度 | 名称 | u8 ndim | u32 × ndim | f32 × numel
  u64      FNV-1a 校验和 (覆盖之前的全部字节)
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from model.backbone import Model, build_model
from model.config import ModelConfig

MAGIC = b"VHEAT001"
MAGIC_PREFIX = b"VHEAT"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF
FNV_CHUNK = 1 << 16

# P^(j+1) mod 2^64，j = 0..FNV_CHUNK-1 (uint64 乘法自然回绕)
_PRIME_POWERS = np.cumprod(np.full(FNV_CHUNK, FNV_PRIME, dtype=np.uint64), dtype=np.uint64)


def _low_bytes(b: np.ndarray, l0: int) -> np.ndarray:
    """
    每个字节进入前哈希值的最低字节 l_i。
    l_{i+1} = ((l_i ^ b_i) * P) & 0xFF，P 为奇数，第 k 位只依赖更低位，
    因此逐位求解：第 k 位是一个前缀异或。
    """
    low = np.zeros(b.size, dtype=np.uint8)
    low[0] = l0
    b16 = b.astype(np.uint16)
    p8 = FNV_PRIME & 0xFF
    for k in range(8):
        mask = (1 << k) - 1
        xlow = (low.astype(np.uint16) ^ b16) & mask
        e = (((xlow * p8) >> k) ^ (b16 >> k)) & 1
        bits = ((l0 >> k) & 1) ^ np.bitwise_xor.accumulate(e[:-1].astype(np.uint8))
        low[1:] |= (bits << k).astype(np.uint8)
    return low


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """
    64 位 FNV-1a，按块向量化。
    h ^ b 只改动最低字节，故 h_{i+1} = (h_i + d_i)·P，d_i = (l_i ^ b_i) − l_i；
    一块的结果为 h·P^m + Σ d_i·P^(m−i) (mod 2^64)。
    """
    buf = np.frombuffer(data, dtype=np.uint8)
    for start in range(0, buf.size, FNV_CHUNK):
        b = buf[start:start + FNV_CHUNK]
        m = b.size
        low = _low_bytes(b, h & 0xFF)
        d = ((low ^ b).astype(np.int64) - low.astype(np.int64)).view(np.uint64)
        tail = int(np.sum(d * _PRIME_POWERS[m - 1::-1], dtype=np.uint64))
        h = (h * pow(FNV_PRIME, m, 1 << 64) + tail) & _U64
    return h


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict                                # 名称 -> ndarray，保持文件顺序
    seed: int = 0
    step: int = 0
    norm: dict = None
    optim: dict = field(default_factory=dict)   # "m.<name>" / "v.<name>" -> ndarray


def expected_size(header_json: bytes, records) -> int:
    """records: [(name, shape)]"""
    total = len(MAGIC) + 4 + len(header_json) + 4 + 8
    for name, shape in records:
        total += 4 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))
    return total


def _encode_header(model: Model, step: int) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "norm": model.norm,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8")


def _encode_record(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(data, dtype="<f4")
    return b"".join((
        struct.pack("<I", len(raw)), raw,
        struct.pack("<B", arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape),
        arr.tobytes(),
    ))


def save_checkpoint(model: Model, path: str, optim_state=None) -> int:
    """
    写检查点，返回写入字节数。
    optim_state: OptimState (可选)，其一、二阶矩以 optim.m.<name> / optim.v.<name> 记录写入。
    先写临时文件再替换，避免中途失败留下半个文件。
    """
    records = [(name, p.data) for name, p in model.named_parameters()]
    step = 0
    if optim_state is not None:
        step = optim_state.step
        for name, _ in list(records):
            if name in optim_state.m:
                records.append((f"{OPTIM_PREFIX}m.{name}", optim_state.m[name]))
                records.append((f"{OPTIM_PREFIX}v.{name}", optim_state.v[name]))

    header = _encode_header(model, step)
    body = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(records))]
    body.extend(_encode_record(name, data) for name, data in records)
    blob = b"".join(body)
    blob += struct.pack("<Q", fnv1a64(blob))

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        remain = len(self.buf) - self.pos
        if n > remain:
            raise ValueError(f"检查点被截断: 读取 {what} 需要 {n} 字节，仅剩 {remain} 字节")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"检查点不存在: {path}")
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)

    magic = r.take(len(MAGIC), "magic")
    if not magic.startswith(MAGIC_PREFIX):
        raise ValueError(f"不是 vheat 检查点 (magic={magic!r})")
    if magic != MAGIC:
        raise ValueError(f"不支持的检查点版本 {magic[len(MAGIC_PREFIX):]!r}，当前仅支持 001")

    (hlen,) = r.unpack("<I", "header 长度")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"检查点 header 损坏: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"不支持的检查点版本 {header.get('format_version')}")

    (count,) = r.unpack("<I", "记录数")
    params, optim = {}, {}
    for i in range(count):
        what = f"记录 #{i}"
        (nlen,) = r.unpack("<I", f"{what} 名称长度")
        name = r.take(nlen, f"{what} 名称").decode("utf-8")
        what = f"记录 #{i} ({name})"
        (ndim,) = r.unpack("<B", f"{what} ndim")
        shape = r.unpack(f"<{ndim}I", f"{what} 维度") if ndim else ()
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * numel, f"{what} 数据"), dtype="<f4").reshape(shape)
        if name.startswith(OPTIM_PREFIX):
            optim[name[len(OPTIM_PREFIX):]] = data.astype(np.float32)
        else:
            params[name] = data.astype(np.float32)

    covered = r.pos
    (stored,) = r.unpack("<Q", "校验和")
    if r.pos != len(buf):
        raise ValueError(f"检查点尾部有 {len(buf) - r.pos} 字节多余数据")
    actual = fnv1a64(buf[:covered])
    if stored != actual:
        raise ValueError(f"检查点校验和不匹配 (文件 {stored:016x}，计算 {actual:016x})")

    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        seed=int(header.get("seed", 0)),
        step=int(header.get("step", 0)),
        norm=header.get("norm"),
        optim=optim,
    )


def load_checkpoint(path: str) -> Model:
    """按 header 中的配置与种子重建模型，再逐个覆盖参数"""
    ckpt = read_checkpoint(path)
    model = build_model(ckpt.config, ckpt.seed)
    expected = dict(model.named_parameters())
    missing = [n for n in expected if n not in ckpt.params]
    extra = [n for n in ckpt.params if n not in expected]
    if missing or extra:
        raise ValueError(f"检查点参数与配置不符: 缺少 {missing[:3]} 多余 {extra[:3]}")
    for name, p in expected.items():
        data = ckpt.params[name]
        if data.shape != p.shape:
            raise ValueError(f"检查点参数 {name} 维度 {data.shape} 与模型 {p.shape} 不符")
        p.data[...] = data
    model.norm = ckpt.norm
    model.checkpoint = ckpt
    return model
