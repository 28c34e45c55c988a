# tools/verify.py
# MIT License - See LICENSE for details
import time
from dataclasses import dataclass, field

import numpy as np

from core import ops
from core.autograd import Tensor, Parameter
from core.dct2d import build_plan, dct_matrix, dct2d, dct2d_naive, idct2d
from core.gradcheck import grad_check
from core.hco import FveTable, frequency_grid, decay_coefficients, uniform_coefficients, hco_forward
from core.physics_oracle import band_limited_field, compare_hco_ftcs
from core.settings import silent_log
from model.backbone import build_model
from model.config import get_preset
from model.layers import HeatLayer, Initializer

SUITES = ("dct", "hco", "oracle", "grad")


@dataclass
class CheckResult:
    name: str
    measured: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured)) and self.measured < self.tol

    def line(self) -> str:
        tag = "通过" if self.passed else "失败"
        return f"[{tag}] {self.name}: 测得 {self.measured:.3e} / 容差 {self.tol:.1e}"


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def summary(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"共 {len(self.results)} 项，失败 {len(self.failures)} 项，用时 {self.elapsed:.1f} s")
        return "\n".join(lines)


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _weighted(out: Tensor, rng) -> Tensor:
    # 随机权重求和，让每个输出元素都贡献梯度
    w = rng.normal(size=out.shape)
    return ops.sum(ops.mul(out, ops.constant(w, out)))


def _param(rng, *shape, scale=1.0, name=None):
    return Parameter(rng.normal(size=shape) * scale, dtype="f64", name=name)


class Verifier:
    """
    运行各校验套件并汇总结果。
    plan_builder 可替换成构造被篡改 DCT 矩阵的函数，用于故障注入测试。
    """

    def __init__(self, seed: int = 0, log_callback=None, plan_builder=build_plan):
        self.seed = seed
        self.log = log_callback or silent_log
        self.plan_builder = plan_builder

    def _rng(self, salt: int):
        return np.random.default_rng([self.seed, salt])

    # ---------------- dct ----------------

    def check_dct(self) -> list:
        out = []
        worst = 0.0
        for n in range(1, 65):
            C = self.plan_builder(n, n, "f64").C.astype(np.float64)
            worst = max(worst, float(np.abs(C @ C.T - np.eye(n)).max()))
        out.append(CheckResult("dct 正交性 ‖CCᵀ−I‖∞ (n=1..64, f64)", worst, 1e-12))

        rng = self._rng(1)
        worst = 0.0
        for M, N in ((1, 1), (2, 3), (4, 4), (5, 7), (8, 8), (11, 16), (16, 16)):
            a = rng.normal(size=(M, N))
            got = self.plan_builder(M, N, "f64").forward(a)
            worst = max(worst, float(np.abs(got - dct2d_naive(a)).max()))
        out.append(CheckResult("dct2d 与直接求和一致 (<=16, f64)", worst, 1e-12))

        worst_rt, worst_pv = 0.0, 0.0
        for M, N in ((8, 8), (16, 12), (32, 32), (33, 33)):
            a = rng.normal(size=(3, M, N)).astype(np.float32)
            plan = self.plan_builder(M, N, "f32")
            b = plan.forward(a)
            worst_rt = max(worst_rt, _rel(plan.inverse(b), a))
            ea = float(np.sum(a.astype(np.float64) ** 2))
            worst_pv = max(worst_pv, abs(float(np.sum(b.astype(np.float64) ** 2)) - ea) / ea)
        out.append(CheckResult("idct2d(dct2d(A)) 往返 (f32)", worst_rt, 1e-6))
        out.append(CheckResult("Parseval 能量守恒 (f32)", worst_pv, 1e-6))
        return out

    # ---------------- hco ----------------

    def check_hco(self) -> list:
        out = []
        rng = self._rng(2)
        M, N, C = 16, 12, 4
        plan32 = build_plan(M, N, "f32")
        plan64 = build_plan(M, N, "f64")
        grid64 = frequency_grid(M, N, "f64")

        u = Tensor(rng.normal(size=(2, C, M, N)), dtype="f32")
        coeff = uniform_coefficients(0.0, frequency_grid(M, N, "f32"), C, 1.0, "f32")
        out.append(CheckResult("k=0 恒等 (f32)", _rel(hco_forward(plan32, coeff, u).data, u.data), 1e-6))

        u = Tensor(rng.normal(size=(2, C, M, N)), dtype="f64")
        k = Tensor(rng.uniform(0.0, 2.0, size=(M, N, C)), dtype="f64")
        y = hco_forward(plan64, decay_coefficients(k, grid64, 1.0), u)
        out.append(CheckResult("DC/均值守恒 (非均匀 k)",
                               float(np.abs(y.data.mean(axis=(2, 3)) - u.data.mean(axis=(2, 3))).max()), 1e-6))

        Cm, Dm = dct_matrix(M), dct_matrix(N)
        worst = 0.0
        for p, q in ((0, 0), (1, 0), (0, 3), (2, 5), (M - 1, N - 1)):
            basis = np.outer(Cm[p], Dm[q])
            kt = 0.7 * 1.5
            got = hco_forward(plan64, uniform_coefficients(0.7, grid64, 1, 1.5, "f64"),
                              Tensor(basis.reshape(1, 1, M, N))).data.reshape(M, N)
            expect = np.exp(-kt * grid64.omega2[p, q]) * basis
            worst = max(worst, float(np.abs(got - expect).max()))
        out.append(CheckResult("特征函数按 e^(−kω²t) 衰减 (f64)", worst, 1e-12))

        t1, t2 = 0.4, 1.3
        once = hco_forward(plan64, decay_coefficients(k, grid64, t1 + t2), u)
        twice = hco_forward(plan64, decay_coefficients(k, grid64, t2),
                            hco_forward(plan64, decay_coefficients(k, grid64, t1), u))
        out.append(CheckResult("半群性质 HCO(t1+t2)=HCO(t2)∘HCO(t1) (f64)",
                               float(np.abs(once.data - twice.data).max()), 1e-10))
        return out

    # ---------------- oracle ----------------

    def check_oracle(self) -> list:
        errs = [compare_hco_ftcs(band_limited_field(32, 32, 8, seed=self.seed + s), 1.0, 4.0) for s in range(10)]
        return [CheckResult("HCO 与 FTCS 相对 L2 误差 (32x32, p,q<=8, k=1, t=4, 10 个种子)", max(errs), 2e-2)]

    # ---------------- grad ----------------

    def _primitive_cases(self, rng):
        p = lambda *shape, **kw: _param(rng, *shape, **kw)  # noqa: E731
        plan = build_plan(5, 4, "f64")
        grid = frequency_grid(5, 4, "f64")
        labels = rng.integers(0, 5, size=3)
        return [
            ("add (广播)", lambda a, b: ops.add(a, b), [p(3, 4), p(1, 4)]),
            ("sub (广播)", lambda a, b: ops.sub(a, b), [p(2, 3, 4), p(4)]),
            ("mul (广播)", lambda a, b: ops.mul(a, b), [p(3, 4), p(3, 1)]),
            ("exp", ops.exp, [p(3, 4, scale=0.5)]),
            ("gelu", ops.gelu, [p(3, 5)]),
            ("silu", ops.silu, [p(3, 5)]),
            ("relu", ops.relu, [p(3, 5)]),
            ("softmax", ops.softmax, [p(3, 5)]),
            ("reshape", lambda a: ops.reshape(a, (4, 6)), [p(2, 3, 4)]),
            ("permute", lambda a: ops.permute(a, (2, 0, 1)), [p(2, 3, 4)]),
            ("broadcast", lambda a: ops.broadcast_to(a, (3, 2, 4)), [p(2, 1)]),
            ("sum", lambda a: ops.sum(a, axis=1), [p(3, 4, 2)]),
            ("mean", lambda a: ops.mean(a, axis=(0, 2), keepdims=True), [p(3, 4, 2)]),
            ("global-average-pool", ops.global_avg_pool, [p(2, 3, 4, 4)]),
            ("matmul", ops.matmul, [p(2, 3, 4), p(4, 5)]),
            ("batched-matmul", ops.batched_matmul, [p(2, 3, 4), p(2, 4, 5)]),
            ("depthwise-conv-3x3", ops.depthwise_conv3x3, [p(2, 3, 5, 4), p(3, 3, 3), p(3)]),
            ("strided-conv-3x3", ops.strided_conv3x3, [p(2, 2, 6, 5), p(3, 2, 3, 3), p(3)]),
            ("layer-norm", lambda x, g, b: ops.layer_norm(x, g, b, axis=1), [p(2, 4, 3, 3), p(4), p(4)]),
            ("cross-entropy", lambda z: ops.cross_entropy(z, labels, 0.1), [p(3, 5)]),
            ("dct2d", lambda a: dct2d(plan, a), [p(2, 5, 4)]),
            ("idct2d", lambda a: idct2d(plan, a), [p(2, 5, 4)]),
            ("decay", lambda k: decay_coefficients(k, grid, 0.8), [p(5, 4, 2, scale=0.5)]),
            ("hco", lambda k, u: hco_forward(plan, decay_coefficients(k, grid, 1.0), u),
             [p(5, 4, 2, scale=0.5), p(1, 2, 5, 4)]),
        ]

    def check_grad(self) -> list:
        out = []
        rng = self._rng(3)
        worst, worst_name = 0.0, ""
        for name, fn, inputs in self._primitive_cases(rng):
            wrng = np.random.default_rng(len(name))
            w = {}

            def scalar(*xs, fn=fn, wrng=wrng, w=w):
                y = fn(*xs)
                if y.size == 1:
                    return y
                if "w" not in w:
                    w["w"] = wrng.normal(size=y.shape)
                return ops.sum(ops.mul(y, ops.constant(w["w"], y)))

            err = grad_check(scalar, inputs)
            if err > worst:
                worst, worst_name = err, name
        out.append(CheckResult(f"全部原语梯度 (f64 中心差分，最差: {worst_name or '-'})", worst, 1e-5))

        out.append(CheckResult("导热层梯度 (f64)", self._heat_layer_grad(rng), 1e-5))
        out.append(CheckResult("Micro 骨干网络梯度抽查 64 个参数 (f64)", self._backbone_grad(), 1e-4))
        return out

    def _heat_layer_grad(self, rng) -> float:
        init = Initializer(rng, "f64")
        layer = HeatLayer(4, 4, init, mlp_ratio=2)
        for _, p in layer.named_parameters():
            p.data += rng.normal(scale=0.3, size=p.shape)
        fve = FveTable.create(4, 4, 4, rng=rng, dtype="f64")
        x = _param(rng, 2, 4, 4, 4)
        params = [p for _, p in layer.named_parameters()]
        w = rng.normal(size=(2, 4, 4, 4))

        def fn(x, emb, *_):
            return ops.sum(ops.mul(layer.forward(x, FveTable(emb)), ops.constant(w, x)))

        return grad_check(fn, [x, fve.embeddings, *params], samples=256, seed=self.seed)

    def _backbone_grad(self) -> float:
        cfg = get_preset("micro").with_overrides(dtype="f64", drop_path=0.0)
        model = build_model(cfg, self.seed)
        rng = self._rng(4)
        for _, p in model.named_parameters():
            p.data += rng.normal(scale=0.02, size=p.shape)
        images = rng.normal(size=(2, 3, 32, 32))
        labels = np.array([1, 7])
        params = [p for _, p in model.named_parameters()]

        def fn(*_):
            return ops.cross_entropy(model.forward(Tensor(images, dtype="f64")), labels)

        return grad_check(fn, params, samples=64, seed=self.seed)

    # ---------------- 入口 ----------------

    def run(self, suite: str = "all") -> VerifyReport:
        suites = SUITES if suite == "all" else (suite,)
        for s in suites:
            if s not in SUITES:
                raise ValueError(f"verify: 未知套件 {s}，可选 {SUITES + ('all',)}")
        report = VerifyReport()
        start = time.perf_counter()
        for s in suites:
            self.log(f"[校验] 运行 {s} 套件")
            try:
                results = getattr(self, f"check_{s}")()
            except Exception as e:
                self.log(f"[错误] {s} 套件异常: {e}")
                results = [CheckResult(f"{s} 套件运行 ({type(e).__name__})", float("inf"), 0.0)]
            for r in results:
                self.log(f"[校验] {r.line()}")
            report.results.extend(results)
        report.elapsed = time.perf_counter() - start
        return report


def verify(suite: str = "all", seed: int = 0, log_callback=None, plan_builder=build_plan) -> VerifyReport:
    return Verifier(seed, log_callback, plan_builder).run(suite)
