# core/settings.py
# MIT License - See LICENSE for details
import copy
import json
import os
import time
from pathlib import Path
from threading import Lock

APP_DIR = "VHeat"
THREADS_ENV = "VHEAT_THREADS"
BLAS_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def silent_log(message: str):
    """库函数默认的日志回调：丢弃"""


class ConsoleLog:
    """命令行日志回调: 打印 [HH:MM:SS] 消息，可同时写入文件"""

    def __init__(self, tee_path=None, quiet=False):
        self.quiet = quiet
        self._lock = Lock()
        self._tee = open(tee_path, "a", encoding="utf-8") if tee_path else None

    def __call__(self, message: str):
        line = f"[{time.strftime('%H:%M:%S', time.localtime())}] {message}"
        with self._lock:
            if not self.quiet:
                print(line, flush=True)
            if self._tee:
                self._tee.write(line + "\n")
                self._tee.flush()

    def close(self):
        if self._tee:
            self._tee.close()
            self._tee = None


def get_config_dir() -> Path:
    if os.name == "nt":
        config_dir = Path(os.getenv("APPDATA", Path.home())) / APP_DIR
    else:
        config_dir = Path.home() / ".config" / APP_DIR
    return config_dir


def get_default_config() -> dict:
    return {
        "runtime": {"threads": 1, "deterministic": False, "seed": 0},
        "train": {
            "lr": 1e-3,
            "weight_decay": 0.05,
            "batch_size": 64,
            "epochs": 5,
            "warmup_epochs": 1,
            "label_smoothing": 0.1,
            "betas": [0.9, 0.999],
            "eps": 1e-8,
            "min_lr": 0.0,
        },
        "bench": {"resolutions": [32, 64, 128, 256], "channels": 64, "repeats": 9, "warmup": 2},
        "visualize": {"extent": 33, "k": 1.0},
        "web": {"host": "127.0.0.1", "port": 8000},
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class AppConfig:
    """
    应用配置 (JSON)。默认位于 %APPDATA%/VHeat/config.json 或 ~/.config/VHeat/config.json。
    文件缺失的字段用默认值补齐；环境变量 VHEAT_THREADS 覆盖 runtime.threads。
    """

    def __init__(self, path=None, log_callback=None):
        self.path = Path(path) if path else get_config_dir() / "config.json"
        self.log = log_callback or silent_log
        self.data = self.load()

    def _init_config(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8") as f:
                json.dump(get_default_config(), f, indent=2)
            self.log(f"[系统] 已创建默认配置文件 {self.path}")
        except OSError as e:
            self.log(f"[警告] 创建配置文件失败: {e}")

    def load(self) -> dict:
        if not self.path.exists():
            self._init_config()
            data = get_default_config()
        else:
            try:
                with open(self.path, "r", encoding="utf-8") as f:
                    data = _merge(get_default_config(), json.load(f))
            except (OSError, json.JSONDecodeError) as e:
                self.log(f"[警告] 配置文件读取失败，使用默认配置: {e}")
                data = get_default_config()
        env = os.getenv(THREADS_ENV)
        if env:
            try:
                data["runtime"]["threads"] = int(env)
            except ValueError:
                raise ValueError(f"{THREADS_ENV} 必须是整数，当前 {env!r}") from None
        self.validate(data)
        return data

    @staticmethod
    def validate(data: dict):
        for section in ("runtime", "train", "bench", "visualize", "web"):
            if section not in data:
                raise ValueError(f"缺少配置段 {section}")
        if int(data["runtime"]["threads"]) < 1:
            raise ValueError(f"runtime.threads 必须 >= 1，当前 {data['runtime']['threads']}")
        train = data["train"]
        if train["lr"] < 0 or train["weight_decay"] < 0:
            raise ValueError("train.lr / train.weight_decay 不能为负")
        if int(train["batch_size"]) < 1 or int(train["epochs"]) < 1:
            raise ValueError("train.batch_size / train.epochs 必须 >= 1")
        if not 0.0 <= train["label_smoothing"] < 1.0:
            raise ValueError(f"train.label_smoothing 必须在 [0, 1) 内，当前 {train['label_smoothing']}")

    def save(self, data: dict = None):
        data = _merge(get_default_config(), data if data is not None else self.data)
        self.validate(data)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
        self.data = data
        self.log("[系统] 配置已保存")

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def threads(self) -> int:
        return int(self.data["runtime"]["threads"])

    @property
    def deterministic(self) -> bool:
        return bool(self.data["runtime"]["deterministic"])


def pin_blas_threads(threads: int):
    """必须在 import numpy 之前调用才对 BLAS 线程池生效"""
    for var in BLAS_ENV_VARS:
        os.environ[var] = str(int(threads))
