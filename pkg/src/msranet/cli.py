"""Command-line entry point: synth, split, train, evaluate, explain, gradcheck."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (
    FoldPlan,
    SynthSpec,
    decode_image,
    load_images,
    normalize,
    resize_to,
    scan_dataset,
    stratified_splits,
    synth_dataset,
    write_dataset,
)
from .errors import ConfigError, IOFailure, MsraError
from .metrics import confusion_csv, evaluate_predictions, report

log = logging.getLogger("msranet")


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _overrides(args, mapping: dict[str, str]) -> dict[str, str]:
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


_GLOBAL = {"seed": "seed", "out": "out"}
_TRAIN_FLAGS = {
    "root": "data.root",
    "plan": "data.plan",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "patience": "train.early_stop_patience",
    "variant": "model.variant",
}


def _load_config(args, extra: dict[str, str] | None = None) -> cfgmod.RunConfig:
    flags = _overrides(args, {**_GLOBAL, **(extra or {})})
    cfg = cfgmod.load(args.config, flags)
    cfgmod.validate(cfg)
    return cfg


# --------------------------------------------------------------------------- data helpers


class _Data:
    """Images, labels and class names for a run, from disk or the synthetic generator."""

    def __init__(self, cfg: cfgmod.RunConfig):
        size = cfg.model.input_size
        if cfg.data.root:
            index = scan_dataset(cfg.data.root)
            self.class_names = index.class_names
            self.labels = np.array(index.labels)
            self.names = [Path(p).stem for p, _ in index.samples]
            self.images = load_images(index, size)
        else:
            spec = replace(cfg.synth, size=size)
            ds = synth_dataset(spec, cfg.seed)
            self.class_names = ds.class_names
            self.labels = ds.labels
            self.names = [f"{ds.class_names[c]}_{i:05d}" for i, c in enumerate(ds.labels)]
            self.images = ds.normalized()
        if len(self.class_names) != cfg.model.n_classes:
            raise ConfigError(
                f"model.n_classes = {cfg.model.n_classes} but the dataset has {len(self.class_names)} classes"
            )


def _plan(cfg: cfgmod.RunConfig, labels: np.ndarray) -> FoldPlan:
    if cfg.data.plan:
        plan = FoldPlan.read(cfg.data.plan)
        if plan.labels.size != labels.size or (plan.labels != labels).any():
            raise ConfigError(f"data.plan {cfg.data.plan} does not match the dataset labels")
        return plan
    return stratified_splits(labels, cfg.data.folds, cfg.seed)


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        planted=not args.no_planted,
        quadrant=args.quadrant,
        background=args.background,
    )
    seed = args.seed if args.seed is not None else 0
    ds = synth_dataset(spec, seed)
    root = Path(args.out or "synth")
    paths = write_dataset(ds, root)
    rows = ["path,class_id,region"]
    rows += [f"{p.relative_to(root).as_posix()},{int(c)},{int(q)}" for p, c, q in zip(paths, ds.labels, ds.regions)]
    _write(root / "manifest.csv", "\n".join(rows) + "\n")
    for c, name in enumerate(ds.class_names):
        print(f"{name}\t{int((ds.labels == c).sum())}")
    print(f"wrote {len(paths)} images to {root}")
    return 0


def cmd_split(args) -> int:
    if args.k < 2:
        raise ConfigError(f"k must be at least 2, got {args.k}")
    index = scan_dataset(args.root)
    plan = stratified_splits(index.labels, args.k, args.seed if args.seed is not None else 0)
    out = Path(args.out or ".") / "folds.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.write(out)
    for f in range(plan.k):
        sizes = "/".join(str(plan.subset(f, s).size) for s in ("train", "val", "test"))
        print(f"fold {f}: train/val/test = {sizes}")
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    from .model import build
    from .serialize import save_weights
    from .train import FoldData, predict, train_fold

    cfg = _load_config(args, _TRAIN_FLAGS)
    out = Path(cfg.out)
    data = _Data(cfg)
    plan = _plan(cfg, data.labels)
    folds = _fold_list(args.folds, plan.k)
    tcfg = cfgmod.resolved_train(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "run.cfg", cfgmod.dump(cfg))
    plan.write(out / "folds.txt")

    log_lines: list[str] = []
    test_reports, val_reports = [], []
    x, y = data.images, data.labels
    for f in folds:
        tr, va, te = (plan.subset(f, s) for s in ("train", "val", "test"))
        model = build(cfg.model, cfg.seed, fold=f)
        _, history = train_fold(model, FoldData(x[tr], y[tr], x[va], y[va]), tcfg, fold=f,
                                on_epoch=lambda rec: log_lines.append(rec.to_json()))
        save_weights(model, out / f"fold{f}.msrw")
        for subset, idx, bucket in (("test", te, test_reports), ("val", va, val_reports)):
            rep = evaluate_predictions(y[idx], predict(model, x[idx]), data.class_names, fold=f)
            bucket.append(rep)
            _write(out / f"fold{f}_{subset}_confusion.csv", confusion_csv(rep.cm, data.class_names))
        best = min(history, key=lambda r: r.val_loss)
        print(f"fold {f}: {len(history)} epochs, best epoch {best.epoch}, "
              f"val acc {val_reports[-1].accuracy:.4f}, test acc {test_reports[-1].accuracy:.4f}")
        _write(out / "train_log.jsonl", "\n".join(log_lines) + "\n")

    csv_text, table, _ = report(test_reports)
    _write(out / "metrics.csv", csv_text)
    _write(out / "metrics_val.csv", report(val_reports)[0])
    _write(out / "report.txt", table + "\n")
    print(table)
    return 0


def _fold_list(spec: str | None, k: int) -> list[int]:
    if not spec:
        return list(range(k))
    try:
        folds = [int(s) for s in spec.split(",")]
    except ValueError:
        raise ConfigError(f"--folds expects comma-separated integers, got {spec!r}") from None
    bad = [f for f in folds if not 0 <= f < k]
    if bad:
        raise ConfigError(f"--folds: fold {bad[0]} out of range [0, {k})")
    return folds


def cmd_evaluate(args) -> int:
    from .serialize import load_weights
    from .train import predict

    cfg = _load_config(args, {"root": "data.root", "plan": "data.plan"})
    data = _Data(cfg)
    plan = _plan(cfg, data.labels)
    if not 0 <= args.fold < plan.k:
        raise ConfigError(f"--fold {args.fold} out of range [0, {plan.k})")
    model = load_weights(args.weights, cfg.model)
    idx = plan.subset(args.fold, args.subset)
    rep = evaluate_predictions(data.labels[idx], predict(model, data.images[idx]), data.class_names, fold=args.fold)
    csv_text, table, _ = report([rep])
    out = Path(args.out or cfg.out)
    stem = f"eval_fold{args.fold}_{args.subset}"
    _write(out / f"{stem}_metrics.csv", csv_text)
    _write(out / f"{stem}_confusion.csv", confusion_csv(rep.cm, data.class_names))
    print(table)
    return 0


def cmd_explain(args) -> int:
    from .gradcam import colormap, colormap_overlay, heatmap, quantize, triptych_names, write_png
    from .serialize import load_weights

    cfg = _load_config(args)
    model = load_weights(args.weights, cfg.model)
    size = cfg.model.input_size
    img = normalize(np.clip(np.rint(resize_to(decode_image(args.image), size)), 0, 255))
    hm = heatmap(model, img, args.class_id, args.layer)
    label = f"c{hm.class_id}" if args.class_id is not None else f"argmax{hm.class_id}"
    names = triptych_names(Path(args.image).stem, label, hm.layer)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(quantize(img), out / names["orig"])
    write_png(quantize(colormap(hm.values)), out / names["heat"])
    write_png(colormap_overlay(img, hm, args.alpha), out / names["overlay"])
    for kind in ("orig", "heat", "overlay"):
        print(out / names[kind])
    return 0


def cmd_gradcheck(args) -> int:
    from . import tensor
    from .gradcheck import run_suite

    for item in args.inject_fault or []:
        op, _, factor = item.partition("=")
        tensor._FAULTS[op] = float(factor) if factor else 1.5
    try:
        results = run_suite(instances=args.instances, seed=args.seed if args.seed is not None else 0)
    finally:
        for item in args.inject_fault or []:
            tensor._FAULTS.pop(item.partition("=")[0], None)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} ops passed, {failed} failed")
    return 1 if failed else 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="run seed (all random streams derive from it)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for byte-identical runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msranet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic texture dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--quadrant", type=int, default=0, choices=range(4))
    s.add_argument("--background", type=float, default=SynthSpec.background)
    s.add_argument("--no-planted", action="store_true", help="fill the whole frame with the class texture")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", parents=[common], help="write a stratified fold plan")
    s.add_argument("--root", required=True)
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="cross-validated training")
    s.add_argument("--root")
    s.add_argument("--plan")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--variant", choices=("full", "f1_only"))
    s.add_argument("--folds", help="comma-separated fold indices (default: all)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="metrics for one fold from saved weights")
    s.add_argument("--weights", required=True)
    s.add_argument("--root")
    s.add_argument("--plan")
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--subset", choices=("test", "val", "train"), default="test")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", parents=[common], help="Grad-CAM triptych for one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--class", dest="class_id", type=int)
    s.add_argument("--layer", default="F_merged")
    s.add_argument("--alpha", type=float, default=0.4)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--inject-fault", action="append", metavar="OP[=FACTOR]", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    try:
        with limiter:
            return args.func(args)
    except MsraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IOFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
