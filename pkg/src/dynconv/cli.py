"""Command-line entry point: gen-data, train, eval, kfold, gradcheck, flops."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .datasets import (
    IdxFormatError,
    ImageDataset,
    ParseError,
    gen_oriented_bars,
    gen_shapes_seg,
    gen_synth_timeseries,
    load_image_dataset,
    make_timeseries,
    read_ucr_series,
    save_image_dataset,
    stratified_kfold,
    ucr_files,
    write_ucr_tsv,
)
from .dynamic_layers import IMAGE_PRESETS, SERIES_PRESETS, SUPPORTED, Model, ModelSpec, build_model
from .dynamic_layers.modules import Conv, Dense, Flatten, Sequential
from .gradcheck import check_model
from .metrics import FoldResult, FlopReport, flops_model, kfold_stats
from .tensor_core import Prng, ValidationError
from .training import NonFiniteError, TrainConfig, load_model, save_checkpoint, train

log = logging.getLogger("dynconv")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CommandError(Exception):
    """A check or validation failure reported with exit code 1."""


# --- run config -----------------------------------------------------------------


@dataclass
class RunConfig:
    preset: str = "base_cnn"
    task: str = "classify"
    dataset: str = ""
    out: str = "runs/default"
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    dropout: float = 0.2
    seed: int = 0
    augment: bool = False
    loss: str = "categorical_crossentropy"
    k: int = 10
    num_kernels: int = 4
    k_active: int | None = None
    kr_dim: int = 32
    width_multiplier: float = 1.0
    depth: int = 2
    widths: list | None = None
    precision: str = "float32"
    pretrain_epochs: int = 10
    attention_samples: int = 8
    timing: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.train_config()  # validates the training fields
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def train_config(self, **overrides) -> TrainConfig:
        values = dict(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                      dropout=self.dropout, seed=self.seed, augment=self.augment, loss=self.loss)
        values.update(overrides)
        return TrainConfig(**values)

    def model_spec(self, input_shape, num_classes: int, **overrides) -> ModelSpec:
        values = dict(preset=self.preset, task=self.task, num_classes=num_classes, input_shape=tuple(input_shape),
                      width_multiplier=self.width_multiplier, depth=self.depth, num_kernels=self.num_kernels,
                      k_active=self.k_active, kr_dim=self.kr_dim, dropout=self.dropout,
                      precision=self.precision)
        if self.widths is not None:
            values["widths"] = tuple(self.widths)
        values.update(overrides)
        return ModelSpec(**values)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for key in ("preset", "task", "dataset", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    ModelSpec(cfg.preset, cfg.task, input_shape=(1, 16) if cfg.task == "timeseries" else (1, 16, 16))
    if not cfg.dataset:
        raise ValidationError("no dataset given (config key 'dataset' or --dataset)")
    return cfg


# --- io helpers -----------------------------------------------------------------


def _write_json(path: str, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: str, header: list, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _config_echo(cfg: RunConfig) -> dict:
    # the output location is left out so reruns elsewhere stay byte-identical
    echo = asdict(cfg)
    echo.pop("out")
    return echo


def _fmt(v: float) -> str:
    return repr(float(v))


def _prepare_out(path: str, force: bool):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CommandError(f"output directory {path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def _read_manifest(directory: str) -> dict:
    path = os.path.join(directory, "manifest.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    return {}


def load_timeseries_splits(path: str) -> dict:
    """Train/test UCR splits sharing one label table.  Inputs gain a channel axis."""
    files = ucr_files(path)
    if set(files) == {"all"}:
        raise ValidationError(f"{path}: need a directory with *_TRAIN.tsv and *_TEST.tsv")
    parts = {k: read_ucr_series(v) for k, v in sorted(files.items())}
    labels = np.concatenate([p[0] for p in parts.values()])
    if len({p[1].shape[1] for p in parts.values()}) > 1:
        raise ParseError(f"splits in {path} have different series lengths")
    pooled = make_timeseries(labels, np.concatenate([p[1] for p in parts.values()]))
    out, start = {}, 0
    for key, (lab, _) in parts.items():
        sl = slice(start, start + len(lab))
        out[key] = (pooled.series[sl, None, :], pooled.labels[sl])
        start += len(lab)
    out["num_classes"] = pooled.num_classes
    out["label_table"] = pooled.label_table
    return out


def load_task_data(task: str, path: str) -> dict:
    """``{"train": (x, y), "test": (x, y), "num_classes": C}`` for any task."""
    if not os.path.exists(path):
        raise ValidationError(f"dataset {path} not found")
    if task == "timeseries":
        return load_timeseries_splits(path)
    num_classes = int(_read_manifest(path).get("num_classes", 0))
    need_masks = task == "segment"
    splits = {s: load_image_dataset(path, s, num_classes, require_masks=need_masks) for s in ("train", "test")}
    num_classes = max(num_classes, *(ds.num_classes for ds in splits.values()))
    out = {"num_classes": num_classes}
    for s, ds in splits.items():
        out[s] = (ds.images, ds.masks if need_masks else ds.labels)
    return out


# --- gen-data -------------------------------------------------------------------


def _holdout(labels: np.ndarray, seed: int):
    """Stratified 80/20 split: the first of five stratified folds is the test set."""
    train_idx, test_idx = stratified_kfold(labels, k=5, seed=seed)[0]
    return train_idx, test_idx


def _subset(ds: ImageDataset, idx) -> ImageDataset:
    masks = None if ds.masks is None else ds.masks[idx]
    return ImageDataset(ds.images[idx], ds.labels[idx], masks, ds.num_classes)


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = args.out or os.path.join("data", args.kind)
    _prepare_out(out, args.force)
    rng = Prng(seed)
    manifest = {"kind": args.kind, "seed": seed, "schema_version": SCHEMA_VERSION}
    if args.kind == "oriented-bars":
        ds = gen_oriented_bars(args.per_class, args.size, args.classes, rng, noise=args.noise)
        manifest["params"] = {"classes": args.classes, "per_class": args.per_class, "size": args.size,
                              "noise": args.noise}
    elif args.kind == "shapes-seg":
        ds = gen_shapes_seg(args.count, args.size, rng, noise=args.noise)
        manifest["params"] = {"count": args.count, "size": args.size, "noise": args.noise}
    else:
        labels, series = gen_synth_timeseries(args.per_class, args.length, args.classes, rng, noise=args.noise)
        tr, te = _holdout(labels, seed)
        write_ucr_tsv(os.path.join(out, "SYNTH_TRAIN.tsv"), labels[tr], series[tr])
        write_ucr_tsv(os.path.join(out, "SYNTH_TEST.tsv"), labels[te], series[te])
        manifest["params"] = {"classes": args.classes, "per_class": args.per_class, "length": args.length,
                              "noise": args.noise}
        manifest.update(num_classes=args.classes, counts={"train": len(tr), "test": len(te), "total": len(labels)},
                        files=["SYNTH_TEST.tsv", "SYNTH_TRAIN.tsv"])
        _write_json(os.path.join(out, "manifest.json"), manifest)
        print(f"wrote {len(labels)} series ({len(tr)} train / {len(te)} test) to {out}")
        return EXIT_OK
    tr, te = _holdout(ds.labels, seed)
    save_image_dataset(_subset(ds, tr), out, "train")
    save_image_dataset(_subset(ds, te), out, "test")
    manifest.update(num_classes=ds.num_classes, counts={"train": len(tr), "test": len(te), "total": len(ds)},
                    files=sorted(f for f in os.listdir(out) if f.endswith(".idx")))
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(ds)} images ({len(tr)} train / {len(te)} test) to {out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------


def _attention_rows(model: Model, x: np.ndarray):
    rows = []
    for layer, weights in model.attention_maps(x):
        w = weights.reshape(weights.shape[0], -1) if weights.ndim > 1 else weights[None]
        for s in range(w.shape[0]):
            for i, value in enumerate(w[s]):
                rows.append((s, layer, i, _fmt(value)))
    return rows


def run_training(cfg: RunConfig, out: str, data: dict | None = None) -> dict:
    """Train per ``cfg`` and write report.json, curves.csv, checkpoints and attention dumps."""
    started = time.perf_counter()
    data = data or load_task_data(cfg.task, cfg.dataset)
    x_train, y_train = data["train"]
    x_val, y_val = data["test"]
    spec = cfg.model_spec(x_train.shape[1:], data["num_classes"])
    model = build_model(spec, Prng(cfg.seed))
    config = cfg.train_config()
    os.makedirs(out, exist_ok=True)
    attn_x = np.asarray(x_val[: cfg.attention_samples], dtype=model.dtype)

    def hook(epoch, m, record):
        if m.has_attention and len(attn_x):
            _write_csv(os.path.join(out, f"attn_epoch{epoch}.csv"), ["sample", "layer", "index", "weight"],
                       _attention_rows(m, attn_x))

    meta = {"preset": cfg.preset, "task": cfg.task, "seed": cfg.seed}
    history = train(model, (x_train, y_train), (x_val, y_val), config, out_dir=out, epoch_hook=hook,
                    checkpoint_meta=meta)
    final_ckpt = os.path.join(out, "final_model.ckpt")
    save_checkpoint(model, final_ckpt, dict(meta, epoch=len(history.epochs), final=True))
    _write_csv(os.path.join(out, "curves.csv"), ["epoch", "train_loss", "val_loss", "val_metric", "lr"],
               [(e.epoch, _fmt(e.train_loss), _fmt(e.val_loss), _fmt(e.val_metric), _fmt(e.lr))
                for e in history.epochs])
    metric = "miou" if cfg.task == "segment" else "accuracy"
    last = history.epochs[-1]
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "config": _config_echo(cfg),
        "model_spec": spec.to_dict(),
        "metric": metric,
        "epochs": [asdict(e) for e in history.epochs],
        "steps": history.steps,
        "stopped_early": history.stopped_early,
        "final": {"train_loss": last.train_loss, "train_metric": last.train_metric,
                  "val_loss": last.val_loss, "val_metric": last.val_metric},
        "best": {"epoch": history.best_epoch, "val_metric": history.best_val_metric},
        "checkpoints": [os.path.basename(p) for p in history.checkpoints],
        "final_checkpoint": os.path.basename(final_ckpt),
        "num_parameters": model.num_parameters(),
        "flops_total": flops_model(model).total,
    }
    if cfg.timing:
        report["wall_clock_seconds"] = time.perf_counter() - started
    _write_json(os.path.join(out, "report.json"), report)
    return report


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _prepare_out(cfg.out, args.force)
    report = run_training(cfg, cfg.out)
    fin = report["final"]
    print(f"{cfg.preset}/{cfg.task}: {len(report['epochs'])} epochs, train {report['metric']} "
          f"{fin['train_metric']:.4f}, val {report['metric']} {fin['val_metric']:.4f} "
          f"(best {report['best']['val_metric']:.4f} at epoch {report['best']['epoch']})")
    print(f"report written to {os.path.join(cfg.out, 'report.json')}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    model, manifest = load_model(args.checkpoint)
    spec = model.spec
    if args.preset and args.preset != spec.preset:
        raise CommandError(f"checkpoint holds preset {spec.preset!r} but {args.preset!r} was requested")
    if args.task and args.task != spec.task:
        raise CommandError(f"checkpoint holds task {spec.task!r} but {args.task!r} was requested")
    data = load_task_data(spec.task, args.dataset)
    x, y = data[args.split]
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise CommandError(f"dataset input shape {tuple(x.shape[1:])} does not match checkpoint "
                           f"{tuple(spec.input_shape)}")
    loss, value = model.evaluate(x.astype(model.dtype), y)
    metric = "miou" if spec.task == "segment" else "accuracy"
    result = {"schema_version": SCHEMA_VERSION, "command": "eval", "preset": spec.preset, "task": spec.task,
              "split": args.split, "samples": int(len(x)), "loss": loss, metric: value}
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), result)
    return EXIT_OK


# --- kfold ----------------------------------------------------------------------


def _read_folds_file(path: str) -> list:
    """Fold accuracies from JSON (list of numbers or objects) or text/CSV (last column)."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    folds = []
    if isinstance(data, list):
        for i, item in enumerate(data):
            if isinstance(item, dict):
                folds.append(FoldResult(int(item.get("fold", i + 1)), item.get("loss"), float(item["accuracy"])))
            else:
                folds.append(FoldResult(i + 1, None, float(item)))
        return folds
    for line in text.splitlines():
        cells = [c.strip() for c in line.replace("\t", ",").split(",") if c.strip()]
        if not cells:
            continue
        try:
            values = [float(c) for c in cells]
        except ValueError:
            continue  # header
        if len(values) == 1:
            folds.append(FoldResult(len(folds) + 1, None, values[0]))
        elif len(values) == 2:
            folds.append(FoldResult(int(values[0]), None, values[1]))
        else:
            folds.append(FoldResult(int(values[0]), values[1], values[2]))
    if not folds:
        raise ValidationError(f"{path}: no fold accuracies found")
    return folds


def fold_table(folds: list, name: str = "model") -> str:
    lines = [f"{'Fold':>4}  {'Loss':>8}  {'Accuracy':>8}"]
    for f in folds:
        loss = "-" if f.loss is None else f"{f.loss:.4f}"
        lines.append(f"{f.fold_index:>4}  {loss:>8}  {f.accuracy:>8.3f}")
    mean, std = kfold_stats(folds)
    lines += ["", f"{'Model':<10}  {'Mean':>6}  {'Std':>6}", f"{name:<10}  {mean:>6.3f}  {std:>6.3f}"]
    return "\n".join(lines)


def _tile_bank(static: Model, model: Model, rng: Prng, noise: float = 0.01):
    """Copy each K=1 kernel into every slot of the K-kernel bank plus small noise, then freeze it."""
    src = static.parameters()
    for name, arr in model.parameters().items():
        if name.endswith(".bank"):
            arr[...] = src[name][:1] + rng.normal(arr.shape, std=noise).astype(arr.dtype)
        elif name in src and src[name].shape == arr.shape and ".gen_" not in name:
            arr[...] = src[name]
    model.set_bank_frozen(True)


def run_fold(cfg: RunConfig, fold: int, train_xy, test_xy, num_classes: int) -> FoldResult:
    seed = cfg.seed + fold
    shape = train_xy[0].shape[1:]
    spec = cfg.model_spec(shape, num_classes)
    model = build_model(spec, Prng(seed))
    if cfg.preset != "base_cnn" and cfg.pretrain_epochs > 0:
        static = build_model(cfg.model_spec(shape, num_classes, num_kernels=1), Prng(seed))
        train(static, train_xy, test_xy, cfg.train_config(seed=seed, epochs=cfg.pretrain_epochs))
        _tile_bank(static, model, Prng(seed).spawn(1))
    train(model, train_xy, test_xy, cfg.train_config(seed=seed))
    loss, acc = model.evaluate(test_xy[0].astype(model.dtype), test_xy[1])
    return FoldResult(fold + 1, loss, acc)


def cmd_kfold(args) -> int:
    if args.folds_from_file:
        folds = _read_folds_file(args.folds_from_file)
        print(fold_table(folds, args.name or "model"))
        mean, std = kfold_stats(folds)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _write_json(os.path.join(args.out, "kfold.json"),
                        {"schema_version": SCHEMA_VERSION, "command": "kfold", "source": "file",
                         "folds": [asdict(f) for f in folds], "mean": mean, "std": std})
        return EXIT_OK
    cfg = _resolve_config(args)
    if args.k is not None:
        cfg.k = args.k
    if cfg.task != "timeseries":
        raise CommandError(f"kfold runs the timeseries task, config has task {cfg.task!r}")
    _prepare_out(cfg.out, args.force)
    data = load_task_data("timeseries", cfg.dataset)
    x = np.concatenate([data["train"][0], data["test"][0]])
    y = np.concatenate([data["train"][1], data["test"][1]])
    folds = []
    for i, (tr, te) in enumerate(stratified_kfold(y, cfg.k, cfg.seed)):
        result = run_fold(cfg, i, (x[tr], y[tr]), (x[te], y[te]), data["num_classes"])
        log.info("fold %d loss %.4f accuracy %.4f", result.fold_index, result.loss, result.accuracy)
        folds.append(result)
    mean, std = kfold_stats(folds)
    print(fold_table(folds, cfg.preset))
    _write_csv(os.path.join(cfg.out, "folds.csv"), ["fold", "loss", "accuracy"],
               [(f.fold_index, _fmt(f.loss), _fmt(f.accuracy)) for f in folds])
    _write_json(os.path.join(cfg.out, "report.json"),
                {"schema_version": SCHEMA_VERSION, "command": "kfold", "config": _config_echo(cfg),
                 "folds": [asdict(f) for f in folds], "mean": mean, "std": std})
    return EXIT_OK


# --- gradcheck ------------------------------------------------------------------


def gradcheck_model(preset: str, task: str, seed: int) -> tuple[Model, np.ndarray, np.ndarray]:
    """A small 64-bit model and batch for the end-to-end finite-difference check."""
    rng = Prng(seed)
    if task == "timeseries":
        spec = ModelSpec(preset, task, num_classes=3, input_shape=(1, 16), widths=(4, 8), num_kernels=3,
                         dropout=0.0, precision="float64")
        x = rng.normal((2, 1, 16))
        y = rng.integers(3, size=2)
    else:
        spec = ModelSpec(preset, task, num_classes=3, input_shape=(1, 8, 8), widths=(4, 8), depth=1,
                         kr_dim=4, num_kernels=3, dropout=0.0, precision="float64")
        x = rng.normal((2, 1, 8, 8))
        y = rng.integers(3, size=(2, 8, 8) if task == "segment" else 2)
    model = build_model(spec, rng.spawn(1))
    for layer in model.dynamic_layers():
        # the straight-through estimator is not a true gradient; check the smooth surrogate
        layer.soft_surrogate = True
    return model, x, y


def cmd_gradcheck(args) -> int:
    presets = list(SUPPORTED[args.task]) if args.preset == "all" else [args.preset]
    seed0 = args.seed if args.seed is not None else 0
    failed = False
    for preset in presets:
        ModelSpec(preset, args.task, input_shape=(1, 16) if args.task == "timeseries" else (1, 16, 16))
        worst, failures = {}, []
        for s in range(seed0, seed0 + args.seeds):
            model, x, y = gradcheck_model(preset, args.task, s)
            report = check_model(model, x, y, Prng(s).spawn(2), tolerance=args.tolerance)
            for name, err in report.worst.items():
                worst[name] = max(worst.get(name, 0.0), err)
            failures += [(s,) + f for f in report.failures]
        status = "FAIL" if failures else "PASS"
        print(f"{preset} ({args.task}): {status}, {args.seeds} seed(s), tolerance {args.tolerance:g}")
        for name, err in worst.items():
            print(f"  {name:<40} {err:.3e}")
        for s, name, where, analytic, numeric in failures:
            print(f"  FAILED {name} [seed {s}, {where}]: analytic {analytic:.10g} vs numeric {numeric:.10g}")
        failed |= bool(failures)
    return EXIT_FAIL if failed else EXIT_OK


# --- flops ----------------------------------------------------------------------


def two_layer_fixture() -> Model:
    """3x3 same conv (1 -> 2 channels) on 8x8, then a 128 -> 10 dense layer."""
    rng = Prng(0)
    net = Sequential(("conv", Conv(1, 2, 3, 1, 1, rng=rng)), ("flatten", Flatten()),
                     ("dense", Dense(128, 10, rng)))
    return Model(net, "classify", None, input_shape=(1, 8, 8))


def _parse_shape(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise ValidationError(f"bad input shape {text!r}, expected e.g. 1,16,16") from None


def _flops_table(report: FlopReport) -> str:
    lines = [f"{'layer':<32} {'category':<20} {'flops':>14}"]
    for path, category, amount in report.per_layer:
        lines.append(f"{path or '(root)':<32} {category:<20} {amount:>14,d}")
    lines.append("")
    for category, amount in report.breakdown.items():
        lines.append(f"{'total ' + category:<53} {amount:>14,d}")
    lines.append(f"{'total':<53} {report.total:>14,d}")
    return "\n".join(lines)


def cmd_flops(args) -> int:
    result = {"schema_version": SCHEMA_VERSION, "command": "flops"}
    if args.fixture:
        report = flops_model(two_layer_fixture())
        print(_flops_table(report))
        result.update(fixture=args.fixture, report=report.to_dict())
    else:
        default = (1, 64) if args.task == "timeseries" else (1, 16, 16)
        shape = _parse_shape(args.input_shape) if args.input_shape else default
        k_active = args.k_active
        spec_kw = dict(task=args.task, num_classes=args.num_classes, input_shape=shape,
                       num_kernels=args.num_kernels, k_active=k_active, precision="float32")
        model = build_model(ModelSpec(args.preset, **spec_kw), Prng(0))
        report = flops_model(model)
        print(_flops_table(report))
        comparison = []
        for preset in SUPPORTED[args.task]:
            m = build_model(ModelSpec(preset, **spec_kw), Prng(0))
            comparison.append({"preset": preset, "flops": flops_model(m).total, "parameters": m.num_parameters()})
        print()
        print(f"{'preset':<16} {'flops':>14} {'parameters':>12}")
        for row in comparison:
            print(f"{row['preset']:<16} {row['flops']:>14,d} {row['parameters']:>12,d}")
        result.update(preset=args.preset, task=args.task, input_shape=list(shape), report=report.to_dict(),
                      comparison=comparison)
    if args.json:
        _write_json(args.json, result)
    elif args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "flops.json"), result)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="JSON run config")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="random seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--force", action="store_true", default=default,
                        help="write into a non-empty output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynconv", description="Dynamic convolution experiments.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("kind", choices=["oriented-bars", "shapes-seg", "synth-timeseries"])
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--count", type=int, default=100, help="images (shapes-seg)")
    p.add_argument("--length", type=int, default=64, help="series length (synth-timeseries)")
    p.add_argument("--noise", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "train a model"), ("kfold", cmd_kfold, "k-fold experiment")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--preset", choices=sorted(set(IMAGE_PRESETS) | set(SERIES_PRESETS)))
        p.add_argument("--task", choices=sorted(SUPPORTED))
        p.add_argument("--dataset", metavar="PATH")
        p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)
        if name == "kfold":
            p.add_argument("--k", type=int, help="number of folds")
            p.add_argument("--folds-from-file", metavar="PATH",
                           help="summarize fold accuracies from a file instead of training")
            p.add_argument("--name", help="row label for the summary table")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--preset", help="expected preset; must match the checkpoint")
    p.add_argument("--task", choices=sorted(SUPPORTED), help="expected task; must match the checkpoint")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--preset", default="all")
    p.add_argument("--task", choices=sorted(SUPPORTED), default="classify")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", parents=[common], help="FLOPs breakdown and variant comparison")
    p.add_argument("--preset", default="base_cnn")
    p.add_argument("--task", choices=sorted(SUPPORTED), default="classify")
    p.add_argument("--input-shape", help="e.g. 1,16,16")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--num-kernels", type=int, default=4)
    p.add_argument("--k-active", type=int)
    p.add_argument("--fixture", choices=["two-layer"])
    p.add_argument("--json", metavar="PATH", help="write the report as JSON")
    p.set_defaults(func=cmd_flops)
    return parser


_NOISE_DEFAULTS = {"oriented-bars": 0.05, "shapes-seg": 0.05, "synth-timeseries": 0.3}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "kind", None) and args.noise is None:
        args.noise = _NOISE_DEFAULTS[args.kind]
    try:
        return args.func(args)
    except (CommandError, ValidationError, ParseError, IdxFormatError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
