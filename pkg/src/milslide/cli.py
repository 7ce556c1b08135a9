"""Command-line front end for the whole pipeline.

Subcommands: gen-data, train, eval, sweep, ensemble, embed. Training-style
commands read a UTF-8 key=value run-config file; unknown keys are rejected
and every referenced path is checked before any work starts. All outputs
land inside the chosen output directory and are deterministic for a fixed
seed (CSV byte-identical; SVG without timestamps).

Exit codes: 0 on success, 2 for malformed configs or CSV inputs (with a
line diagnostic when one applies), 1 for any other failure.
"""

import argparse
import os
import statistics
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import embed as em
from . import ensemble as en
from . import eval as ev
from . import mil
from . import slide as sl
from . import svgplot
from .errors import ArgumentError, ConfigError, DataError, MilError
from .numerics import ModelConfig, load_checkpoint, save_checkpoint

WORKERS_ENV = "MILPATH_WORKERS"

DEFAULT_PREVALENCE = 0.199
DEFAULT_W1_VALUES = (0.5, 0.7, 0.9, 0.95, 0.99)
DEFAULT_SIZES = (25, 50, 100, 200, 400)
DEFAULT_REPEATS = 5

TRAIN_KEYS = ("epochs", "batch_size", "lr", "w1", "seed", "augment", "threshold",
              "magnification", "selection_metric", "workers")
MODEL_KEYS = ("input_side", "channels", "conv_layers", "pool", "hidden_units",
              "outputs")
PATH_KEYS = ("manifest", "out")
SWEEP_KEYS = ("w1_values", "sizes", "magnifications", "repeats")


@dataclass
class RunConfig:
    """Parsed run-config file: training settings plus paths and sweep values."""

    train: mil.TrainConfig
    manifest: Path = None
    out: Path = None
    w1_values: tuple = None
    sizes: tuple = None
    magnifications: tuple = None
    repeats: int = None
    source: Path = None
    lines: dict = field(default_factory=dict)   # key -> line number


def _read_kv_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path} line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{path} line {lineno}: duplicate key {key!r}")
        entries[key] = (lineno, value)
    return entries


def _parse_listed(path, lineno, key, value, cast):
    items = [item.strip() for item in value.split(",") if item.strip()]
    if not items:
        raise ConfigError(f"{path} line {lineno}: {key} must list at least one value")
    try:
        return tuple(cast(item) for item in items)
    except ValueError as exc:
        raise ConfigError(f"{path} line {lineno}: bad {key} entry: {exc}") from exc


def parse_run_config(path):
    """Load and fully validate a run-config file; unknown keys are fatal."""
    entries = _read_kv_lines(path)
    cfg = RunConfig(train=mil.TrainConfig(), source=Path(path),
                    lines={k: ln for k, (ln, _) in entries.items()})
    model_kv = {}
    for key, (lineno, value) in entries.items():
        if key in TRAIN_KEYS:
            try:
                cfg.train = mil.config_from_mapping({key: value}, base=cfg.train)
            except ConfigError as exc:
                raise ConfigError(f"{path} line {lineno}: {exc}") from exc
        elif key in MODEL_KEYS:
            model_kv[key] = value
        elif key == "manifest":
            cfg.manifest = Path(value)
        elif key == "out":
            cfg.out = Path(value)
        elif key == "w1_values":
            cfg.w1_values = _parse_listed(path, lineno, key, value, float)
        elif key == "sizes":
            cfg.sizes = _parse_listed(path, lineno, key, value, int)
        elif key == "magnifications":
            cfg.magnifications = _parse_listed(path, lineno, key, value, str)
        elif key == "repeats":
            try:
                cfg.repeats = int(value)
            except ValueError as exc:
                raise ConfigError(f"{path} line {lineno}: bad repeats: {value!r}") from exc
        else:
            raise ConfigError(f"{path} line {lineno}: unknown config key {key!r}")
    if model_kv:
        defaults = dict(line.split("=", 1) for line in cfg.train.model.to_lines())
        defaults.update(model_kv)
        where = ", ".join(str(entries[k][0]) for k in model_kv)
        try:
            model = ModelConfig.from_lines([f"{k}={v}" for k, v in defaults.items()])
        except (ConfigError, DataError) as exc:
            raise ConfigError(f"{path} line(s) {where}: {exc}") from exc
        cfg.train = replace(cfg.train, model=model)
    cfg.train.validate()
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if getattr(cfg, key) is None:
            raise ConfigError(f"{cfg.source}: missing required key {key!r}")
    if cfg.manifest is not None and not cfg.manifest.is_file():
        raise ConfigError(f"{cfg.source}: manifest {cfg.manifest} does not exist")


def _resolve_workers(flag_value, config_workers=1):
    if flag_value is not None:
        workers = flag_value
    elif os.environ.get(WORKERS_ENV):
        raw = os.environ[WORKERS_ENV]
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    else:
        workers = config_workers
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    return workers


def _prepare_out(out):
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    path.write_text(text, encoding="utf-8")


def _score_rows(model, bags, workers):
    scores = mil.inference_pass(model, bags, workers=workers)
    return [(b.slide_id, b.label, s.top_prob) for b, s in zip(bags, scores)]


def _metrics_csv(curve, cm, threshold):
    lines = ["metric,value", f"auc,{curve.auc:.10g}"]
    lines += [f"balanced_error,{ev.balanced_error(cm):.10g}",
              f"fnr,{ev.fnr(cm):.10g}", f"fpr,{ev.fpr(cm):.10g}"]
    lines += [f"tp,{cm.tp}", f"fp,{cm.fp}", f"tn,{cm.tn}", f"fn,{cm.fn}",
              f"threshold,{threshold:.10g}"]
    return "\n".join(lines) + "\n"


def _roc_csv(curve):
    lines = ["threshold,fpr,tpr"]
    lines += [f"{t:.10g},{f:.10g},{p:.10g}" for t, f, p in curve.points]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.slides < 10:
        raise ArgumentError(f"--slides must be at least 10, got {args.slides}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ArgumentError(f"{out} exists and is not empty; pass --force to replace it")
    entries = sl.generate_corpus(str(out), n_slides=args.slides,
                                 prevalence=args.prevalence, seed=args.seed,
                                 side=args.side, lesion_fraction=args.lesion_fraction,
                                 force=True)
    positives = sum(e.label for e in entries)
    counts = {split: sum(1 for e in entries if e.split == split)
              for split in sl.SPLITS}
    print(f"wrote {len(entries)} slides to {out} ({positives} positive)")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def cmd_train(args):
    cfg = parse_run_config(args.config)
    _require(cfg, "manifest", "out")
    workers = _resolve_workers(args.workers, cfg.train.workers)
    train_cfg = replace(cfg.train, workers=workers)
    entries = sl.read_manifest(cfg.manifest)
    out = _prepare_out(cfg.out)

    result = mil.train(train_cfg, entries)
    save_checkpoint(out / "checkpoint.milc", result.model, result.adam)
    _write(out / "history.csv", mil.history_csv(result.history))
    if result.history:
        epochs = [row[0] for row in result.history]
        series = [("val balanced error", list(zip(epochs, (r[2] for r in result.history)))),
                  ("val fnr", list(zip(epochs, (r[3] for r in result.history)))),
                  ("val fpr", list(zip(epochs, (r[4] for r in result.history))))]
        _write(out / "history.svg", svgplot.line_chart(
            series, title="validation error by epoch", x_label="epoch", y_label="rate"))
    print(f"best epoch {result.best_epoch}: "
          f"val balanced error {result.best_val_balanced_error:.4f}")
    print(f"checkpoint: {out / 'checkpoint.milc'}")
    return 0


def cmd_eval(args):
    out = _prepare_out(Path(args.out))
    if args.scores:
        rows = ev.read_scores_csv(args.scores)
        labels = [r[1] for r in rows]
        values = [r[2] for r in rows]
    else:
        if not (args.checkpoint and args.manifest):
            raise ConfigError("eval needs either --scores or --checkpoint with --manifest")
        if not Path(args.manifest).is_file():
            raise ConfigError(f"manifest {args.manifest} does not exist")
        workers = _resolve_workers(args.workers)
        model, _ = load_checkpoint(args.checkpoint)
        entries = sl.read_manifest(args.manifest)
        bags = sl.bags_from_manifest(entries, magnification=args.magnification,
                                     tile_size=model.config.input_side,
                                     splits=(args.split,))
        if not bags:
            raise DataError(f"manifest has no slides in split {args.split!r}")
        score_rows = _score_rows(model, bags, workers)
        _write(out / "scores.csv", ev.scores_csv(score_rows, args.magnification))
        labels = [r[1] for r in score_rows]
        values = [r[2] for r in score_rows]

    curve = ev.roc_auc(values, labels)
    cm = ev.confusion(values, labels, args.threshold)
    _write(out / "metrics.csv", _metrics_csv(curve, cm, args.threshold))
    _write(out / "roc.csv", _roc_csv(curve))
    _write(out / "roc.svg", svgplot.roc_chart(curve.points, curve.auc))
    print(f"AUC {curve.auc:.3f}")
    print(f"balanced error {ev.balanced_error(cm):.3f} at threshold {args.threshold:g}")
    return 0


def _sweep_chart(rows, kind):
    """Median best validation balanced error per sweep value."""
    by_param = {}
    for row in rows:
        if row.best_val_balanced_error is not None:
            by_param.setdefault(row.param, []).append(row.best_val_balanced_error)
    numeric = kind in ("weight", "size")
    points = []
    for i, (param, errs) in enumerate(by_param.items()):
        x = float(param) if numeric else float(i)
        points.append((x, statistics.median(errs)))
    if not points:
        return None
    label = {"weight": "positive-class weight", "size": "training slides",
             "magnification": "magnification index", "augment": "augmentation index"}[kind]
    return svgplot.line_chart([("median best val balanced error", points)],
                              title=f"{kind} sweep", x_label=label,
                              y_label="balanced error")


def cmd_sweep(args):
    cfg = parse_run_config(args.config)
    _require(cfg, "manifest", "out")
    workers = _resolve_workers(args.workers, cfg.train.workers)
    base = replace(cfg.train, workers=workers)
    entries = sl.read_manifest(cfg.manifest)
    out = _prepare_out(cfg.out)
    repeats = cfg.repeats if cfg.repeats is not None else DEFAULT_REPEATS
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")

    scores = None
    if args.kind == "magnification":
        mags = cfg.magnifications or tuple(sl.MAGNIFICATIONS)
        result, scores = ev.run_magnification_sweep(base, mags, entries)
    else:
        tile = base.model.input_side
        train_bags = sl.bags_from_manifest(entries, magnification=base.magnification,
                                           tile_size=tile, splits=("train",))
        val_bags = sl.bags_from_manifest(entries, magnification=base.magnification,
                                         tile_size=tile, splits=("val",))
        if args.kind == "weight":
            values = cfg.w1_values or DEFAULT_W1_VALUES
            result = ev.run_weight_sweep(base, values, repeats, train_bags, val_bags)
        elif args.kind == "size":
            sizes = cfg.sizes or DEFAULT_SIZES
            result = ev.run_size_sweep(base, sizes, repeats, train_bags, val_bags)
        else:
            result = ev.run_augmentation_sweep(base, repeats, train_bags, val_bags)

    _write(out / f"sweep_{args.kind}.csv", result.csv())
    chart = _sweep_chart(result.rows, args.kind)
    if chart is not None:
        _write(out / f"sweep_{args.kind}.svg", chart)
    if scores is not None:
        for (mag, split), rows in scores.items():
            _write(out / f"scores_{mag}_{split}.csv", ev.scores_csv(rows, mag))
    done = sum(1 for r in result.rows if r.best_val_balanced_error is not None)
    print(f"{args.kind} sweep: {done}/{len(result.rows)} cells completed")
    for param, repeat, message in result.failures:
        print(f"  failed {param!r} repeat {repeat}: {message}", file=sys.stderr)
    return 0


def cmd_ensemble(args):
    out = _prepare_out(Path(args.out))
    tables = [ev.read_scores_csv(path) for path in args.scores]
    score_set = en.build_score_set(tables)
    rows = en.combine(score_set, args.mode)
    _write(out / "combined.csv",
           en.combined_csv(rows, score_set.magnifications, args.mode))
    curve = ev.roc_auc([v for _, _, v in rows], [y for _, y, _ in rows])
    _write(out / "roc.csv", _roc_csv(curve))
    _write(out / "roc.svg", svgplot.roc_chart(
        curve.points, curve.auc,
        title=f"ensemble ({args.mode} over {'+'.join(score_set.magnifications)})"))
    print(f"AUC {curve.auc:.3f}")
    return 0


def cmd_embed(args):
    out = _prepare_out(Path(args.out))
    if not Path(args.manifest).is_file():
        raise ConfigError(f"manifest {args.manifest} does not exist")
    workers = _resolve_workers(args.workers)
    model, _ = load_checkpoint(args.checkpoint)
    entries = sl.read_manifest(args.manifest)
    bags = sl.bags_from_manifest(entries, magnification=args.magnification,
                                 tile_size=model.config.input_side,
                                 splits=(args.split,))
    if not bags:
        raise DataError(f"manifest has no slides in split {args.split!r}")
    scores = mil.inference_pass(model, bags, workers=workers)
    table = em.extract_features(model, bags, scores, seed=args.seed)
    pca = em.fit_pca_2d(table.features)
    coords = em.project(pca, table.features)
    _write(out / "embedding.csv", em.embedding_csv(table, coords))

    groups = {"positive top": [], "positive sampled": [],
              "negative top": [], "negative sampled": []}
    for row, (x, y) in zip(table.rows, coords):
        name = (("positive" if row.label == 1 else "negative")
                + (" top" if row.is_top else " sampled"))
        groups[name].append((float(x), float(y)))
    _write(out / "embedding.svg", svgplot.scatter_chart(
        [(name, pts) for name, pts in groups.items() if pts],
        title="tile features (2-D projection)", x_label="component 1",
        y_label="component 2"))
    print(f"embedded {len(table.rows)} tiles from {len(bags)} slides")
    print(f"explained variances: {pca.variances[0]:.4g}, {pca.variances[1]:.4g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="milslide",
        description="Weakly supervised slide classification on synthetic data.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic slide corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--slides", type=int, required=True, help="number of slides (>= 10)")
    p.add_argument("--prevalence", type=float, default=DEFAULT_PREVALENCE,
                   help=f"positive fraction (default {DEFAULT_PREVALENCE})")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--side", type=int, default=512, help="slide side in pixels")
    p.add_argument("--lesion-fraction", type=float, default=0.05,
                   help="lesion area as a fraction of tissue (positives)")
    p.add_argument("--force", action="store_true",
                   help="replace an existing non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run-config file")
    p.add_argument("--config", required=True, help="key=value run-config file")
    p.add_argument("--workers", type=int, default=None,
                   help=f"inference threads (fallback: ${WORKERS_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a scores CSV")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--manifest", help="corpus manifest CSV")
    p.add_argument("--split", default="test", choices=sl.SPLITS)
    p.add_argument("--magnification", default="20x", choices=tuple(sl.MAGNIFICATIONS))
    p.add_argument("--scores", help="evaluate an exported scores CSV instead")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a parameter sweep from a run-config file")
    p.add_argument("--kind", required=True,
                   choices=("weight", "size", "magnification", "augment"))
    p.add_argument("--config", required=True, help="key=value run-config file")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ensemble", help="combine score exports from several scales")
    p.add_argument("--scores", nargs="+", required=True,
                   help="two or more score CSVs (or one, which passes through)")
    p.add_argument("--mode", default="max", choices=en.MODES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("embed", help="project tile features of a split to 2-D")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=sl.SPLITS)
    p.add_argument("--magnification", default="20x", choices=tuple(sl.MAGNIFICATIONS))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
