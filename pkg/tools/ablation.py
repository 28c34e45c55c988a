# tools/ablation.py
# MIT License - See LICENSE for details
import copy
import statistics
from dataclasses import dataclass, field

from core.settings import silent_log
from dataio.sources import synth_dataset
from model.backbone import ALIGN_STRATEGIES, build_model
from model.config import get_preset
from training.optim import OptimConfig
from training.trainer import Trainer, evaluate

# 名称 -> ModelConfig 覆盖项
VARIANTS = {
    "shared_fve": {"k_mode": "shared_fve"},
    "individual_fve": {"k_mode": "individual_fve"},
    "learnable": {"k_mode": "learnable"},
    "fixed_k10": {"k_mode": "fixed", "fixed_k": 10.0},
    "fixed_k1": {"k_mode": "fixed", "fixed_k": 1.0},
    "fixed_k0": {"k_mode": "fixed", "fixed_k": 0.0},
    "no_dwconv": {"use_dwconv": False},
    "gate_relu": {"gate": "relu"},
    "no_gate": {"gate": "none"},
}
DEFAULT_VARIANTS = ("shared_fve", "fixed_k1", "fixed_k0")
# 以百分点计的方向性容差
ORDER_TOLERANCE = 0.5


@dataclass
class AblationResult:
    accuracies: dict = field(default_factory=dict)    # 名称 -> [每个种子的 top1]

    def median(self, name: str) -> float:
        return statistics.median(self.accuracies[name])

    def ordering_holds(self, order=DEFAULT_VARIANTS, tol=ORDER_TOLERANCE) -> bool:
        """相邻两项满足 acc(前) >= acc(后) − tol (百分点)"""
        meds = [100.0 * self.median(n) for n in order if n in self.accuracies]
        return all(a >= b - tol for a, b in zip(meds, meds[1:]))


def run_ablation(variants=DEFAULT_VARIANTS, seeds=(0, 1, 2), epochs=5, n_train=2048, n_test=512,
                 optim: OptimConfig = None, base="micro", log_callback=None) -> AblationResult:
    log = log_callback or silent_log
    optim = optim or OptimConfig(epochs=epochs)
    result = AblationResult()
    for name in variants:
        if name not in VARIANTS:
            raise ValueError(f"ablate: 未知变体 {name}，可选 {sorted(VARIANTS)}")
        cfg = get_preset(base).with_overrides(**VARIANTS[name])
        accs = []
        for seed in seeds:
            train_ds = synth_dataset(10, n_train, cfg.input_extent, seed=seed)
            test_ds = synth_dataset(10, n_test, cfg.input_extent, seed=seed + 10_000, split="test")
            model = build_model(cfg, seed)
            Trainer(model, optim, seed=seed, deterministic=True).fit(train_ds, epochs=epochs)
            top1, _ = evaluate(model, test_ds)
            accs.append(top1)
            log(f"[评估] 消融 {name} seed {seed}: top1 {top1:.4f}")
        result.accuracies[name] = accs
        log(f"[评估] 消融 {name}: 中位数 top1 {statistics.median(accs):.4f}")
    return result


def compare_alignments(model, dataset, strategies=ALIGN_STRATEGIES, log_callback=None) -> dict:
    """把训练好的模型分别按各策略迁移到 dataset 的分辨率后评估，返回 {策略: top1}"""
    log = log_callback or silent_log
    results = {}
    for strategy in strategies:
        moved = copy.deepcopy(model).resize_fves(dataset.extent, strategy)
        top1, _ = evaluate(moved, dataset)
        results[strategy] = top1
        log(f"[评估] 对齐 {strategy} @ {dataset.extent}: top1 {top1:.4f}")
    return results
