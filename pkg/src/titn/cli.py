"""Command-line entry point: ``titn {train,eval,inspect,teacher-check,stats}``.

Option precedence, lowest first: dataset preset, ``--config`` file
(``key=value`` lines), explicit flags. ``train --from-manifest`` replays a
previous run's fully resolved options.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from titn import __version__
from titn.augment import AugmentConfig
from titn.distill import (FileTeacher, LossConfig, OracleTeacher, TeacherFileError,
                          read_teacher_logits)
from titn.model import (CheckpointError, ConfigError, ModelConfig, TitnModel, flops_table,
                        load_checkpoint, parameter_count, layer_table)
from titn.pipeline.data import Dataset, DatasetFormatError, load_cifar, load_mnist, make_synthetic, resize
from titn.pipeline.metrics import CSV_HEADER, MetricsRecord, classification_metrics
from titn.pipeline.train import TrainConfig, evaluate, train

log = logging.getLogger("titn")

PRESETS = {
    "synthetic": dict(image_size=8, patch_size=4, pixel_size=2, dim=32, pixel_dim=8, depth=2,
                      num_classes=3, epochs=20, batch_size=64, lr=0.05, crop_pad=1),
    "mnist": dict(image_size=32, num_classes=10, crop_pad=4),
    "cifar10": dict(image_size=32, num_classes=10, crop_pad=4),
    "cifar100": dict(image_size=32, num_classes=100, crop_pad=4),
}

BASE_DEFAULTS = dict(
    dataset="synthetic", data_dir=None, image_size=32, patch_size=8, pixel_size=2, dim=192,
    pixel_dim=12, depth=12, heads=None, inner_heads=None, mlp_ratio=4, num_classes=None,
    train_size=1500, test_size=300, data_seed=0, epochs=300, batch_size=1024, lr=0.1,
    momentum=0.9, weight_decay=1e-4, cutmix_alpha=0.5, cutmix_prob=1.0, distill_alpha=0.5,
    crop_pad=4, flip_prob=0.5, teacher="none", seed=0, out="runs/latest", dtype="float64",
    eval_batch_size=256, no_clock=False,
)


class UsageError(ValueError):
    pass


# -- option resolution -----------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--image-size", type=int, help="input side length in pixels")
    g.add_argument("--patch-size", type=int, help="outer patch side p (pixels)")
    g.add_argument("--pixel-size", type=int, help="inner pixel-token side m (pixels)")
    g.add_argument("--dim", type=int, help="outer (patch) embedding width")
    g.add_argument("--pixel-dim", type=int, help="inner (pixel) embedding width")
    g.add_argument("--depth", type=int, help="number of inner/outer block pairs")
    g.add_argument("--heads", type=int, help="outer attention heads (default: dim/64, else 2)")
    g.add_argument("--inner-heads", type=int, help="inner attention heads (default 2)")
    g.add_argument("--mlp-ratio", type=int, help="MLP expansion ratio")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=["mnist", "cifar10", "cifar100", "synthetic"])
    g.add_argument("--data-dir", help="directory holding the dataset files")
    g.add_argument("--num-classes", type=int, help="classes of the synthetic set")
    g.add_argument("--train-size", type=int, help="synthetic training samples")
    g.add_argument("--test-size", type=int, help="synthetic test samples")
    g.add_argument("--data-seed", type=int, help="seed of the synthetic generator")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file merged beneath explicit flags")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in BASE_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value: str):
    default = BASE_DEFAULTS[key]
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if key in ("heads", "inner_heads", "num_classes"):
        return int(value)
    return value


def resolve(args: argparse.Namespace) -> dict:
    # identity checks: a literal 0 (e.g. --lr 0) is a real value, only None/False mean "unset"
    explicit = {k: v for k, v in vars(args).items()
                if k in BASE_DEFAULTS and v is not None and v is not False}
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    dataset = explicit.get("dataset") or from_file.get("dataset") or BASE_DEFAULTS["dataset"]
    opts = dict(BASE_DEFAULTS)
    opts.update(PRESETS[dataset])
    opts.update(from_file)
    opts.update(explicit)
    opts["dataset"] = dataset
    if opts["heads"] is None:
        opts["heads"] = opts["dim"] // 64 if opts["dim"] % 64 == 0 else (2 if opts["dim"] % 2 == 0 else 1)
    if opts["inner_heads"] is None:
        opts["inner_heads"] = 2 if opts["pixel_dim"] % 2 == 0 else 1
    return opts


def load_datasets(opts: dict) -> tuple[Dataset, Dataset]:
    name = opts["dataset"]
    if name == "synthetic":
        return make_synthetic(opts["num_classes"], opts["train_size"], opts["test_size"],
                              opts["image_size"], 3, seed=opts["data_seed"])
    if not opts.get("data_dir"):
        raise UsageError(f"--data-dir is required for --dataset {name}")
    if name == "mnist":
        tr, te = (load_mnist(opts["data_dir"], s) for s in ("train", "test"))
        return resize(tr, opts["image_size"]), resize(te, opts["image_size"])
    variant = 10 if name == "cifar10" else 100
    return load_cifar(opts["data_dir"], variant, "train"), load_cifar(opts["data_dir"], variant, "test")


def model_config(opts: dict, channels: int, num_classes: int) -> ModelConfig:
    return ModelConfig(
        image_size=opts["image_size"], in_channels=channels, patch_size=opts["patch_size"],
        pixel_size=opts["pixel_size"], patch_dim=opts["dim"], pixel_dim=opts["pixel_dim"],
        depth=opts["depth"], outer_heads=opts["heads"], inner_heads=opts["inner_heads"],
        mlp_ratio=opts["mlp_ratio"], num_classes=num_classes,
    )


def train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=opts["batch_size"], epochs=opts["epochs"], lr_max=opts["lr"],
        momentum=opts["momentum"], weight_decay=opts["weight_decay"], seed=opts["seed"],
        eval_batch_size=opts["eval_batch_size"], record_time=not opts["no_clock"],
        loss=LossConfig(distill_alpha=opts["distill_alpha"], cutmix_alpha=opts["cutmix_alpha"]),
        augment=AugmentConfig(crop_pad=opts["crop_pad"], flip_prob=opts["flip_prob"],
                              cutmix_alpha=opts["cutmix_alpha"], cutmix_prob=opts["cutmix_prob"]),
    )


def make_teacher(choice: str, train_set: Dataset):
    if choice == "none":
        return None
    if choice == "oracle":
        return OracleTeacher(train_set.labels, train_set.num_classes)
    if choice.startswith("file:"):
        logits = read_teacher_logits(choice[5:], len(train_set), train_set.num_classes)
        log.warning("file-backed teacher scores describe un-augmented samples")
        return FileTeacher(logits)
    raise UsageError(f"--teacher must be none, oracle or file:<path>, got {choice!r}")


# -- commands ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        opts = dict(manifest["options"])
        if args.out:
            opts["out"] = args.out
    else:
        manifest = None
        opts = resolve(args)
    train_set, test_set = load_datasets(opts)
    if manifest is not None:
        for split, ds in (("train", train_set), ("test", test_set)):
            if ds.checksum() != manifest["dataset"][f"{split}_checksum"]:
                raise UsageError(f"{split} split checksum differs from the manifest")
    cfg = model_config(opts, train_set.channels, train_set.num_classes)
    tcfg = train_config(opts)
    teacher = make_teacher(opts["teacher"], train_set)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    mean, std = train_set.channel_stats()
    record = {
        "version": __version__,
        "options": opts,
        "model": cfg.to_dict(),
        "train": tcfg.to_dict(),
        "seed": opts["seed"],
        "dataset": {
            "name": opts["dataset"],
            "data_dir": opts["data_dir"],
            "train_size": len(train_set),
            "test_size": len(test_set),
            "train_checksum": train_set.checksum(),
            "test_checksum": test_set.checksum(),
            "norm_mean": mean,
            "norm_std": std,
        },
        "out": str(out),
    }
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    model = TitnModel.init(cfg, seed=opts["seed"], dtype=np.dtype(opts["dtype"]))

    def report(rec: MetricsRecord):
        if not args.json:
            print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  top1 {rec.top1:.4f}  "
                  f"top5 {rec.top5:.4f}  f1 {rec.f1:.4f}  lr {rec.lr:.5f}", flush=True)

    history = train(model, train_set, test_set, teacher, tcfg, out, norm=(mean, std),
                    on_epoch=report, checkpoint_meta={"dataset": opts["dataset"]})
    if args.json:
        print(json.dumps([h.as_dict() for h in history]))
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    opts = resolve(args)
    opts["image_size"] = model.config.image_size
    if args.num_classes is None and opts["dataset"] == "synthetic":
        opts["num_classes"] = model.config.num_classes
    train_set, test_set = load_datasets(opts)
    ds = test_set if args.split == "test" else train_set
    if ds.num_classes != model.config.num_classes:
        raise UsageError(f"checkpoint predicts {model.config.num_classes} classes but "
                         f"{opts['dataset']} has {ds.num_classes}")
    if ds.channels != model.config.in_channels:
        raise UsageError(f"checkpoint expects {model.config.in_channels} channels, "
                         f"dataset has {ds.channels}")
    if "norm_mean" in meta:
        mean, std = meta["norm_mean"], meta["norm_std"]
    else:
        mean, std = train_set.channel_stats()
    rec = evaluate(model, ds, mean, std, opts["eval_batch_size"])
    rec.epoch = int(meta.get("epoch", 0))
    if args.json:
        print(json.dumps(rec.as_dict()))
    else:
        print(f"top1 {rec.top1:.4f}  top5 {rec.top5:.4f}  precision {rec.precision:.4f}  "
              f"recall {rec.recall:.4f}  f1 {rec.f1:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "eval.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(CSV_HEADER)
            w.writerow(rec.row())
    return 0


def cmd_inspect(args) -> int:
    opts = resolve(args)
    channels = 1 if opts["dataset"] == "mnist" else 3
    cfg = model_config(opts, channels, opts["num_classes"])
    params = {r["name"]: r["params"] for r in layer_table(cfg)}
    flops = {r["name"]: r["flops"] for r in flops_table(cfg)}
    names = list(dict.fromkeys([*params, *flops]))
    rows = [{"name": n, "params": params.get(n, 0), "flops": flops.get(n, 0)} for n in names]
    total = parameter_count(cfg)
    total_flops = sum(flops.values())
    if args.json:
        print(json.dumps({"config": cfg.to_dict(), "total_params": total,
                          "flops_per_image": total_flops, "layers": rows}))
        return 0
    width = max(len(n) for n in names)
    print(f"{'layer':<{width}}  {'params':>10}  {'flops':>12}")
    for r in rows:
        print(f"{r['name']:<{width}}  {r['params']:>10,}  {r['flops']:>12,}")
    print(f"{'total':<{width}}  {total:>10,}  {total_flops:>12,}")
    print(f"parameters: {total / 1e6:.2f}M   forward GFLOPs per image: {total_flops / 1e9:.4f}")
    return 0


def cmd_teacher_check(args) -> int:
    opts = resolve(args)
    train_set, test_set = load_datasets(opts)
    ds = test_set if args.split == "test" else train_set
    logits = read_teacher_logits(args.logits, len(ds), ds.num_classes)
    m = classification_metrics(logits.scores.astype(np.float64), ds.labels, ds.num_classes)
    report = {"file": args.logits, "num_samples": logits.num_samples,
              "num_classes": logits.num_classes, "valid": True, **m}
    if args.json:
        print(json.dumps(report))
    else:
        print(f"{args.logits}: {logits.num_samples} x {logits.num_classes} OK")
        print(f"teacher top1 {m['top1']:.4f}  top5 {m['top5']:.4f}")
    return 0


def cmd_stats(args) -> int:
    opts = resolve(args)
    train_set, _ = load_datasets(opts)
    mean, std = train_set.channel_stats()
    if args.json:
        print(json.dumps({"dataset": opts["dataset"], "mean": mean, "std": std}))
    else:
        print(f"norm_mean = {','.join(f'{v:.4f}' for v in mean)}")
        print(f"norm_std = {','.join(f'{v:.4f}' for v in std)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="titn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"titn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a student and write metrics/checkpoints")
    _add_common(p)
    _add_model_flags(p)
    _add_data_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="initial (peak) learning rate")
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--cutmix-alpha", type=float, help="Beta(a, a) parameter for lambda")
    g.add_argument("--cutmix-prob", type=float, help="probability of CutMix per batch")
    g.add_argument("--distill-alpha", type=float, help="weight of the CutMix term")
    g.add_argument("--crop-pad", type=int, help="zero padding before random crop")
    g.add_argument("--flip-prob", type=float, help="horizontal flip probability")
    g.add_argument("--teacher", help="none | oracle | file:<path to TLOG>")
    g.add_argument("--seed", type=int)
    g.add_argument("--dtype", choices=["float64", "float32"])
    g.add_argument("--eval-batch-size", type=int)
    g.add_argument("--no-clock", action="store_true",
                   help="write 0 in the seconds column so reruns are byte-identical")
    g.add_argument("--out", help="output directory for all artifacts")
    g.add_argument("--from-manifest", help="replay the options recorded in a manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--eval-batch-size", type=int)
    p.add_argument("--out", help="append a metrics row to <out>/eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="parameter count and FLOP estimate")
    _add_common(p)
    _add_model_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("teacher-check", help="validate a TLOG teacher-logits file")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_teacher_check)

    p = sub.add_parser("stats", help="per-channel normalization constants of a training split")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, TeacherFileError, DatasetFormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"titn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
