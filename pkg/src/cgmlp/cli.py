"""Command line entry point: train / compare / eval / visualize / gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every run prints the
fully resolved configuration up front so a transcript reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--data-dir", default=os.environ.get("CGMLP_DATA_DIR"),
                   help="directory with CIFAR binary files "
                        "(default: $CGMLP_DATA_DIR)")
    p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--threads", type=int, default=1,
                   help="kernel parallelism (1 = deterministic mode)")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--min-delta", type=float, default=0.001)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-ffn", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgmlp",
                                 description="Train and inspect gMLP / CgMLP "
                                             "image classifiers")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    _add_common(t)
    _add_train_flags(t)
    t.add_argument("--model", default="cgmlp2",
                   help="preset (gmlp4|cgmlp1|cgmlp2) or a JSON config file")

    c = sub.add_parser("compare", help="train several models on identical data")
    _add_common(c)
    _add_train_flags(c)
    c.add_argument("--model", action="append", required=True,
                   help="repeatable: preset name or JSON config file")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--batch-size", type=int, default=256)

    v = sub.add_parser("visualize", help="export conv-stem feature maps as PGM")
    _add_common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--layers", action="append", default=None,
                   help="repeatable; default: every stem tap")
    v.add_argument("--image-index", type=int, default=0)

    g = sub.add_parser("gradcheck", help="finite-difference check of a full model")
    _add_common(g)
    g.add_argument("--model", default="cgmlp2")
    g.add_argument("--d-model", type=int, default=16)
    g.add_argument("--d-ffn", type=int, default=32)
    g.add_argument("--stem-channels", default=None,
                   help="comma-separated, e.g. 4,8")
    g.add_argument("--tolerance", type=float, default=1e-3)
    return ap


def _print_resolved(args) -> None:
    print("resolved configuration:")
    for key in sorted(vars(args)):
        print(f"  {key} = {getattr(args, key)!r}")


def _limit_threads(n: int) -> None:
    # best effort: cap BLAS pools; deterministic mode wants n == 1
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _model_config(choice: str, args, dataset: str):
    from .models import ConfigError, ModelConfig, preset_config

    overrides = {}
    if getattr(args, "d_model", None):
        overrides["d_model"] = args.d_model
        overrides.setdefault("d_ffn", 2 * args.d_model)
    if getattr(args, "d_ffn", None):
        overrides["d_ffn"] = args.d_ffn
    overrides["seed"] = args.seed
    if choice.endswith(".json"):
        with open(choice) as f:
            kw = json.load(f)
        kw.setdefault("dataset", dataset)
        kw.update(overrides)
        return ModelConfig(**kw)
    try:
        return preset_config(choice, dataset=dataset, **overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _load_splits(args):
    from . import data as D

    if not args.data_dir:
        raise UsageError("no data directory: pass --data-dir or set CGMLP_DATA_DIR")
    train_raw = D.load_cifar(args.data_dir, args.dataset, "train")
    test_raw = D.load_cifar(args.data_dir, args.dataset, "test")
    train, val = D.split_train_val(train_raw, args.val_fraction, args.seed)
    test = D.normalize(test_raw, train.norm_mean, train.norm_std)
    return train, val, test


def _model_name(choice: str) -> str:
    return os.path.splitext(os.path.basename(choice))[0]


def cmd_train(args) -> int:
    return _train_models(args, [args.model])


def cmd_compare(args) -> int:
    return _train_models(args, args.model)


def _train_models(args, choices) -> int:
    import numpy as np

    from . import training as T
    from .models import Model, save_checkpoint, with_norm_stats

    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    if args.batch_size < 1:
        raise UsageError(f"--batch-size must be >= 1, got {args.batch_size}")
    train, val, test = _load_splits(args)
    dtype = np.float64 if args.precision == "f64" else np.float32
    models = {}
    for choice in choices:
        cfg = _model_config(choice, args, args.dataset)
        cfg = with_norm_stats(cfg, train.norm_mean, train.norm_std)
        models[_model_name(choice)] = Model(cfg, dtype=dtype)
    policy = T.EarlyStopPolicy(patience=args.patience, min_delta=args.min_delta)
    reports, csv_text = T.compare(models, train, val, test, policy=policy,
                                  epochs_max=args.epochs, batch_size=args.batch_size,
                                  lr=args.lr, seed=args.seed, log=print)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "history.csv"), "w", encoding="utf-8") as f:
        f.write(csv_text)
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as f:
        for rep in reports.values():
            f.write(rep.summary() + "\n")
    for name, model in models.items():
        ckpt = "model.ckpt" if len(models) == 1 else f"model_{name}.ckpt"
        save_checkpoint(model, os.path.join(args.out_dir, ckpt))
    for name, rep in reports.items():
        line = f"{name}: best_val_acc={rep.best_val_acc:.4f}"
        if rep.test_acc is not None:
            line += f" test_acc={rep.test_acc:.4f}"
        print(line)
    return 0


def cmd_eval(args) -> int:
    from . import data as D
    from . import training as T
    from .models import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if not args.data_dir:
        raise UsageError("no data directory: pass --data-dir or set CGMLP_DATA_DIR")
    test = D.load_cifar(args.data_dir, model.config.dataset, "test")
    import numpy as np
    test = D.normalize(test, np.asarray(model.config.norm_mean, dtype=np.float32),
                       np.asarray(model.config.norm_std, dtype=np.float32))
    loss, acc = T.evaluate(model, test, batch_size=args.batch_size)
    print(f"test_loss={loss:.6f} test_acc={acc:.6f}")
    return 0


def cmd_visualize(args) -> int:
    import numpy as np

    from . import data as D
    from .models import load_checkpoint
    from .tensor import Tensor
    from .visualize import capture_feature_maps, export_channel_images

    model = load_checkpoint(args.checkpoint)
    if not model.capture_names():
        raise UsageError("model has no conv stem; nothing to visualize")
    if not args.data_dir:
        raise UsageError("no data directory: pass --data-dir or set CGMLP_DATA_DIR")
    test = D.load_cifar(args.data_dir, model.config.dataset, "test")
    test = D.normalize(test, np.asarray(model.config.norm_mean, dtype=np.float32),
                       np.asarray(model.config.norm_std, dtype=np.float32))
    if not 0 <= args.image_index < len(test):
        raise UsageError(f"--image-index out of range [0,{len(test)})")
    layers = args.layers or model.capture_names()
    img = Tensor(test.images[args.image_index:args.image_index + 1])
    captures = capture_feature_maps(model, img, layers, image_index=args.image_index)
    out = os.path.join(args.out_dir, "featuremaps")
    for fc in captures:
        paths = export_channel_images(fc, out)
        print(f"{fc.layer}: wrote {len(paths)} channel images to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .models import Model, preset_config
    from .tensor import Rng, Tensor, grad_check, softmax_cross_entropy

    overrides = dict(d_model=args.d_model, d_ffn=args.d_ffn, seed=args.seed)
    if args.stem_channels:
        channels = tuple(int(c) for c in args.stem_channels.split(","))
        overrides.update(stem_channels=channels, stem_layers=len(channels))
    elif args.model == "cgmlp2":
        overrides.update(stem_channels=(4, 8), stem_layers=2)
    elif args.model == "cgmlp1":
        overrides.update(stem_channels=(4,), stem_layers=1)
    cfg = preset_config(args.model, dataset="cifar10", **overrides)
    dtype = np.float64 if args.precision == "f64" else np.float32
    model = Model(cfg, dtype=dtype)
    rng = Rng(args.seed + 1)
    images = rng.normal((2, 3, 32, 32), std=1.0, dtype=dtype)
    labels = np.array([rng.next_u64() % cfg.num_classes for _ in range(2)])

    def loss_fn(tape):
        logits = model.forward(Tensor(images), tape)
        return softmax_cross_entropy(logits, labels, tape)

    report = grad_check(loss_fn, list(model.params.values()), h=1e-4, tol=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"max_rel_err={report.max_rel_err:.3e} worst={report.worst_param} "
          f"flagged={len(report.flagged)} {status}")
    return 0 if report.passed else 2


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "gradcheck": cmd_gradcheck,
}


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    _limit_threads(args.threads)
    _print_resolved(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
