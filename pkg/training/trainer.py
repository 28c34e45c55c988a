# training/trainer.py
# MIT License - See LICENSE for details
import csv
import math
import os
from dataclasses import dataclass
from threading import Thread

import numpy as np

from core.autograd import Tape, Tensor
from core.ops import cross_entropy
from core.settings import silent_log
from dataio.sources import Dataset, Normalizer
from model.backbone import Model
from model.checkpoint import save_checkpoint
from training.optim import AdamW, CosineSchedule, OptimConfig

CSV_HEADER = ("epoch", "split", "loss", "top1")
DUMP_NAME = "divergence_dump.vheat"
LOG_EVERY = 20


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    top1: float

    def row(self):
        return [self.epoch, self.split, f"{self.loss:.6f}", f"{self.top1:.6f}"]


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for m in metrics:
            writer.writerow(m.row())


def model_normalizer(model: Model):
    return Normalizer.from_dict(model.norm) if model.norm else None


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256, norm: Normalizer = None):
    """返回 (top1, 平均交叉熵)。并列最大 logit 取最小类别索引"""
    norm = norm or model_normalizer(model)
    correct = 0
    total_loss = 0.0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x, y = dataset.batch(idx, norm)
        logits = model.forward(Tensor(x, dtype=model.dtype), training=False)
        total_loss += cross_entropy(logits, y).item() * len(idx)
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    n = max(len(dataset), 1)
    return correct / n, total_loss / n


class Trainer:
    """
    数据并行训练：一个 batch 按样本切成 threads 份，每个线程各自录制磁带，
    梯度按分片大小加权、以固定顺序合并后做一次 AdamW 更新。
    deterministic=True 时只用单线程，同种子重复运行逐位一致。
    """

    def __init__(self, model: Model, cfg: OptimConfig, log_callback=None, threads: int = 1,
                 deterministic: bool = False, seed: int = 0, stop_event=None, dump_dir="."):
        self.model = model
        self.cfg = cfg
        self.log = log_callback or silent_log
        self.workers = 1 if deterministic else max(1, int(threads))
        self.seed = int(seed)
        self.stop_event = stop_event
        self.dump_dir = dump_dir
        self.metrics = []
        self.optimizer = None
        self.last_loss = None
        self._names = {id(p): name for name, p in model.named_parameters()}

    def _loss_and_grads(self, x, y, rng):
        with Tape() as tape:
            logits = self.model.forward(Tensor(x, dtype=self.model.dtype), training=True, rng=rng)
            loss = cross_entropy(logits, y, self.cfg.label_smoothing)
        grads = tape.backward(loss, accumulate=False)
        named = {self._names[id(leaf)]: g for leaf, g in grads.items() if id(leaf) in self._names}
        return loss.item(), named, np.argmax(logits.data, axis=1)

    def _sharded(self, x, y, seeds):
        B = x.shape[0]
        shards = [s for s in np.array_split(np.arange(B), min(self.workers, B)) if len(s)]
        results = [None] * len(shards)
        errors = [None] * len(shards)

        def _worker(i, idx):
            try:
                results[i] = self._loss_and_grads(x[idx], y[idx], np.random.default_rng([*seeds, i]))
            except Exception as e:
                errors[i] = e

        if len(shards) == 1:
            _worker(0, shards[0])
        else:
            threads = [Thread(target=_worker, args=(i, idx), daemon=True) for i, idx in enumerate(shards)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        for e in errors:
            if e is not None:
                raise e

        loss = 0.0
        grads = {}
        preds = []
        for idx, (l, g, p) in zip(shards, results):
            w = len(idx) / B
            loss += w * l
            preds.append(p)
            for name, gi in g.items():
                grads[name] = grads[name] + w * gi if name in grads else w * gi
        return loss, grads, np.concatenate(preds)

    def _diverged(self, reason: str):
        path = os.path.join(self.dump_dir, DUMP_NAME)
        try:
            save_checkpoint(self.model, path, self.optimizer.state if self.optimizer else None)
            self.log(f"[错误] 训练发散 ({reason})，现场已保存到 {path}")
        except Exception as e:
            self.log(f"[错误] 训练发散 ({reason})，现场保存失败: {e}")
        raise RuntimeError(f"训练发散: {reason}")

    def train_step(self, x, y, seeds=(0,)):
        try:
            loss, grads, preds = self._sharded(x, y, seeds)
        except FloatingPointError as e:
            self._diverged(str(e))
        if not math.isfinite(loss):
            self._diverged(f"loss={loss}")
        for name, g in grads.items():
            if not np.isfinite(g).all():
                self._diverged(f"{name} 的梯度出现 NaN/Inf")
        self.optimizer.step(grads)
        self.last_loss = loss
        return loss, preds

    def _stopped(self) -> bool:
        return self.stop_event is not None and self.stop_event.is_set()

    def fit(self, train_ds: Dataset, test_ds: Dataset = None, epochs: int = None, resume: bool = False):
        cfg = self.cfg
        epochs = epochs or cfg.epochs
        N = len(train_ds)
        bs = min(cfg.batch_size, N)
        spe = math.ceil(N / bs)

        norm = Normalizer.from_dataset(train_ds)
        self.model.norm = norm.to_dict()
        schedule = CosineSchedule(cfg.lr, cfg.warmup_epochs * spe, epochs * spe, cfg.min_lr)
        self.optimizer = AdamW(self.model.named_parameters(), cfg, schedule)
        start_epoch = 0
        ckpt = self.model.checkpoint
        if resume and ckpt is not None and ckpt.optim:
            self.optimizer.restore(ckpt.optim, ckpt.step)
            start_epoch = ckpt.step // spe
            self.log(f"[训练] 从第 {ckpt.step} 步恢复优化器状态")

        self.log(f"[训练] 开始: {N} 样本, batch {bs}, {epochs} epoch, {self.workers} 线程")
        for epoch in range(start_epoch, epochs):
            perm = np.random.default_rng([self.seed, epoch]).permutation(N)
            total_loss, correct, seen = 0.0, 0, 0
            for i in range(spe):
                if self._stopped():
                    self.log("[训练] 收到停止请求")
                    return self.metrics
                idx = perm[i * bs:(i + 1) * bs]
                x, y = train_ds.batch(idx, norm)
                loss, preds = self.train_step(x, y, seeds=(self.seed, epoch, i))
                total_loss += loss * len(idx)
                correct += int((preds == y).sum())
                seen += len(idx)
                if (i + 1) % LOG_EVERY == 0:
                    self.log(f"[训练] epoch {epoch + 1} step {i + 1}/{spe} loss {loss:.4f} "
                             f"lr {self.optimizer.schedule(self.optimizer.state.step - 1):.2e}")

            row = EpochMetrics(epoch + 1, "train", total_loss / seen, correct / seen)
            self.metrics.append(row)
            self.log(f"[训练] epoch {row.epoch} loss {row.loss:.4f} top1 {row.top1:.4f}")
            if test_ds is not None:
                top1, loss = evaluate(self.model, test_ds, norm=norm)
                self.metrics.append(EpochMetrics(epoch + 1, "test", loss, top1))
                self.log(f"[评估] epoch {epoch + 1} test loss {loss:.4f} top1 {top1:.4f}")
        return self.metrics


def train(model: Model, dataset: Dataset, config: OptimConfig, epochs: int = None, seed: int = 0,
          test: Dataset = None, log_callback=None, threads: int = 1, deterministic: bool = False):
    trainer = Trainer(model, config, log_callback, threads, deterministic, seed)
    metrics = trainer.fit(dataset, test, epochs)
    return model, metrics
