# training/session.py
# MIT License - See LICENSE for details
import time
from threading import Thread, Event, Lock

from dataio.sources import open_source
from model.backbone import build_model
from model.checkpoint import save_checkpoint
from model.config import load_model_config
from training.optim import OptimConfig
from training.trainer import Trainer, evaluate


class TrainingSession:
    """后台训练会话：供 Web 监控页面启动 / 停止并查询进度"""

    def __init__(self, config: dict, log_callback, job: dict = None):
        self.config = config
        self.log = log_callback
        self.job = {"model": "micro", "dataset": "synthetic", "data_dir": None, "out": None, **(job or {})}
        self.running = False
        self.error = None
        self.started_at = None
        self._stop = Event()
        self._lock = Lock()
        self.trainer = None
        self.thread = Thread(target=self._run, daemon=True)

    def start(self):
        with self._lock:
            if not self.running:
                self.running = True
                self.started_at = time.time()
                self.thread.start()
                self.log("[系统] 训练会话已启动")

    def _run(self):
        try:
            runtime = self.config["runtime"]
            seed = int(runtime.get("seed", 0))
            cfg = load_model_config(self.job["model"])
            train_ds = open_source(self.job["dataset"], "train", self.job["data_dir"], seed=seed,
                                  log_callback=self.log).load()
            test_ds = open_source(self.job["dataset"], "test", self.job["data_dir"], seed=seed,
                                 log_callback=self.log).load()
            model = build_model(cfg, seed)
            self.trainer = Trainer(model, OptimConfig.from_section(self.config["train"]), self.log,
                                   threads=runtime.get("threads", 1),
                                   deterministic=runtime.get("deterministic", False),
                                   seed=seed, stop_event=self._stop)
            self.trainer.fit(train_ds, test_ds)
            if self.job.get("out"):
                save_checkpoint(model, self.job["out"], self.trainer.optimizer.state)
                self.log(f"[系统] 检查点已保存: {self.job['out']}")
            top1, _ = evaluate(model, test_ds)
            self.log(f"[评估] 最终 top1 {top1:.4f}")
        except Exception as e:
            self.error = str(e)
            self.log(f"[错误] 训练会话异常: {e}")
        finally:
            self.running = False

    def status(self) -> dict:
        metrics = self.trainer.metrics if self.trainer else []
        return {
            "running": self.running,
            "error": self.error,
            "elapsed": time.time() - self.started_at if self.started_at else 0.0,
            "step": self.trainer.optimizer.state.step if self.trainer and self.trainer.optimizer else 0,
            "last_loss": self.trainer.last_loss if self.trainer else None,
            "metrics": [m.__dict__ for m in metrics],
        }

    def stop(self, timeout: float = 5.0):
        self._stop.set()
        if self.thread.is_alive():
            self.thread.join(timeout)
        self.running = False
        self.log("[系统] 训练会话已停止")
