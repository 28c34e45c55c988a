# main.py
# MIT License - See LICENSE for details
import argparse
import os
import sys

# 只依赖标准库，BLAS 线程数需在 numpy 导入之前设置
from core.settings import AppConfig, ConsoleLog, pin_blas_threads


def _csv_list(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"无法解析列表: {text}") from None


def _int_list(text):
    return _csv_list(text, int)


def _pair(text, sep=","):
    parts = text.split(sep)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"需要两个整数 (a{sep}b)，当前 {text}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要两个整数 (a{sep}b)，当前 {text}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vheat", description="vHeat 导热视觉骨干 (CPU / numpy)")
    parser.add_argument("--app-config", help="应用配置 JSON (默认位于用户配置目录)")
    parser.add_argument("--threads", type=int, help="工作线程 / BLAS 线程数 (覆盖 VHEAT_THREADS)")
    parser.add_argument("--log-file", help="日志同时写入该文件")
    parser.add_argument("--quiet", action="store_true", help="不在终端打印日志")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="运行数值校验套件")
    p.add_argument("--suite", default="all", choices=("dct", "hco", "oracle", "grad", "all"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="训练模型")
    p.add_argument("--config", default="micro", help="模型预设名或 JSON 配置文件")
    p.add_argument("--data", help="IDX 数据目录")
    p.add_argument("--synthetic", action="store_true", help="使用合成频率分类数据集")
    p.add_argument("--n-train", type=int, default=2048)
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--out", required=True, help="检查点输出路径")
    p.add_argument("--metrics", help="每 epoch 指标 CSV (默认 <out>.metrics.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", help="从检查点继续训练 (含优化器状态)")

    p = sub.add_parser("eval", help="评估检查点")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="IDX 数据目录")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="复杂度基准 (log-log 斜率)")
    p.add_argument("--op", required=True, choices=("hco", "attention", "dct"))
    p.add_argument("--resolutions", type=_int_list)
    p.add_argument("--channels", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="结果 CSV 路径")

    p = sub.add_parser("visualize", help="单点热源导热可视化")
    p.add_argument("--source", type=_pair, required=True, help="热源位置 X,Y")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--k", type=float, help="均匀导热系数")
    src.add_argument("--ckpt", help="使用训练好的模型某层的预测 k")
    p.add_argument("--layer", type=lambda s: _pair(s, "."), default=(0, 0), help="stage.层，如 0.1")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--extent", type=int, help="均匀 k 时的网格尺寸")
    p.add_argument("--times", type=_csv_list, default=[0, 1, 5, 25, 100])
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--format", default="pgm", choices=("pgm", "png"))

    p = sub.add_parser("ablate", help="导热系数来源消融 (合成数据集)")
    p.add_argument("--variants", type=lambda s: _csv_list(s, str), default=None)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--n-train", type=int, default=2048)
    p.add_argument("--n-test", type=int, default=512)

    p = sub.add_parser("serve", help="启动 Web 训练监控")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def _load_datasets(args, seed, log):
    from dataio.sources import IdxSource, open_source
    if args.synthetic:
        train = open_source("synthetic", "train", n=getattr(args, "n_train", None), seed=seed, log_callback=log)
        test = open_source("synthetic", "test", n=args.n_test, seed=seed, log_callback=log)
    elif args.data:
        train = IdxSource(args.data, "train", log)
        test = IdxSource(args.data, "test", log)
    else:
        raise ValueError("需要 --data DIR 或 --synthetic")
    return train, test


def cmd_verify(args, app, log) -> int:
    from tools.verify import verify
    report = verify(args.suite, args.seed, log)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_train(args, app, log) -> int:
    from model.backbone import build_model
    from model.checkpoint import load_checkpoint, save_checkpoint
    from model.config import load_model_config
    from training.optim import OptimConfig
    from training.trainer import Trainer, write_metrics_csv

    seed = args.seed if args.seed is not None else int(app.section("runtime")["seed"])
    train_src, test_src = _load_datasets(args, seed, log)
    train_ds, test_ds = train_src.load(), test_src.load()
    model = load_checkpoint(args.resume) if args.resume else build_model(load_model_config(args.config), seed)
    if train_ds.extent != model.input_extent:
        raise ValueError(f"数据尺寸 {train_ds.extent} 与模型输入 {model.input_extent} 不符")
    optim = OptimConfig.from_section(app.section("train"), epochs=args.epochs, lr=args.lr,
                                     batch_size=args.batch_size)
    log(f"[系统] 模型 {args.config}: {model.num_parameters():,} 个参数")
    trainer = Trainer(model, optim, log, threads=app.threads,
                      deterministic=args.deterministic or app.deterministic, seed=seed,
                      dump_dir=os.path.dirname(os.path.abspath(args.out)))
    trainer.fit(train_ds, test_ds, resume=bool(args.resume))
    save_checkpoint(model, args.out, trainer.optimizer.state)
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    write_metrics_csv(trainer.metrics, metrics_path)
    log(f"[系统] 检查点已保存: {args.out}，指标: {metrics_path}")
    return 0


def cmd_eval(args, app, log) -> int:
    from model.checkpoint import load_checkpoint
    from training.trainer import evaluate
    model = load_checkpoint(args.ckpt)
    _, test_src = _load_datasets(args, args.seed, log)
    top1, loss = evaluate(model, test_src.load())
    log(f"[评估] top1 {top1:.4f}  loss {loss:.4f}")
    print(f"top1={top1:.6f} loss={loss:.6f}")
    return 0


def cmd_bench(args, app, log) -> int:
    from tools.bench import bench, write_bench_csv
    defaults = app.section("bench")
    result = bench(args.op,
                   args.resolutions or defaults["resolutions"],
                   channels=args.channels or defaults["channels"],
                   repeats=args.repeats or defaults["repeats"],
                   warmup=args.warmup or defaults["warmup"],
                   batch=args.batch, seed=args.seed, threads=app.threads, log_callback=log)
    if args.csv:
        write_bench_csv(result, args.csv)
        log(f"[基准] 结果已写入 {args.csv}")
    print(f"{args.op} slope={result.slope:.4f}")
    return 0


def cmd_visualize(args, app, log) -> int:
    from tools.visualize import visualize_conduction
    defaults = app.section("visualize")
    model = None
    if args.ckpt:
        from model.checkpoint import load_checkpoint
        model = load_checkpoint(args.ckpt)
    k = args.k if args.k is not None else defaults["k"]
    frames = visualize_conduction(args.source, args.times, args.out, k=k,
                                  extent=args.extent or defaults["extent"], model=model,
                                  layer=args.layer, channel=args.channel, fmt=args.format, log_callback=log)
    for f in frames:
        print(f.path)
    return 0


def cmd_ablate(args, app, log) -> int:
    from tools.ablation import DEFAULT_VARIANTS, run_ablation
    from training.optim import OptimConfig
    variants = args.variants or DEFAULT_VARIANTS
    optim = OptimConfig.from_section(app.section("train"), epochs=args.epochs)
    result = run_ablation(variants, args.seeds, args.epochs, args.n_train, args.n_test, optim, log_callback=log)
    for name in variants:
        print(f"{name}: median top1 {result.median(name):.4f}")
    order = [n for n in DEFAULT_VARIANTS if n in variants]
    if len(order) > 1:
        ok = result.ordering_holds(order)
        print(f"ordering {' >= '.join(order)}: {'ok' if ok else 'violated'}")
    return 0


def cmd_serve(args, app, log) -> int:
    import web_server
    web = app.section("web")
    web_server.state.bind(app)
    web_server.app.run(host=args.host or web["host"], port=args.port or web["port"], threaded=True)
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = ConsoleLog(args.log_file, args.quiet)
    try:
        app = AppConfig(args.app_config, log)
        if args.threads:
            app.data["runtime"]["threads"] = args.threads
        if "numpy" in sys.modules and os.environ.get("OMP_NUM_THREADS") != str(app.threads):
            log("[警告] numpy 已被导入，线程数设置可能不生效")
        pin_blas_threads(app.threads)
        return COMMANDS[args.command](args, app, log)
    except KeyboardInterrupt:
        log("[系统] 已中断")
        return 130
    except Exception as e:
        log(f"[错误] {args.command} 失败: {e}")
        return 1
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
