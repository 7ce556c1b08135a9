"""Slide-level metrics and the experiment sweep runners.

Metrics are pure float64 functions. The sweeps re-run full trainings per
cell with an explicit per-cell seed, so any row can be reproduced in
isolation; a failed cell is recorded and the sweep carries on.
"""

from dataclasses import dataclass, replace
import io
import math

import numpy as np

from .errors import ArgumentError, DataError, MetricError, MilError, UsageError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold):
    """Counts at `threshold`; score >= threshold means predicted positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ArgumentError("confusion needs at least one score")
    if s.shape != y.shape:
        raise UsageError(f"scores shape {s.shape} != labels shape {y.shape}")
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(tp=int(np.sum(pred & pos)),
                           fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)),
                           fn=int(np.sum(~pred & pos)))


def fnr(cm):
    if cm.tp + cm.fn == 0:
        raise MetricError("false-negative rate undefined without positives")
    return cm.fn / (cm.tp + cm.fn)


def fpr(cm):
    if cm.fp + cm.tn == 0:
        raise MetricError("false-positive rate undefined without negatives")
    return cm.fp / (cm.fp + cm.tn)


def balanced_error(cm):
    """Mean of the two error rates; needs both classes present."""
    return 0.5 * (fnr(cm) + fpr(cm))


@dataclass(frozen=True)
class RocCurve:
    points: tuple   # ((threshold, fpr, tpr), ...) with +/-inf sentinels
    auc: float


def roc_auc(scores, labels):
    """ROC over every distinct score, with trapezoidal AUC.

    The trapezoid over these points is algebraically the Mann-Whitney
    concordance with ties at half credit; tests hold the two to 1e-12.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise UsageError(f"scores shape {s.shape} != labels shape {y.shape}")
    if s.size == 0:
        raise ArgumentError("roc_auc needs at least one score")
    if not np.isfinite(s).all():
        raise ArgumentError("scores must be finite")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC undefined with a single class")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(np.sum(y_sorted[i:j] == 1))
        fp += int(np.sum(y_sorted[i:j] == 0))
        points.append((float(s_sorted[i]), fp / n_neg, tp / n_pos))
        i = j
    points.append((-math.inf, 1.0, 1.0))

    auc = 0.0
    for (_, fpr0, tpr0), (_, fpr1, tpr1) in zip(points, points[1:]):
        auc += 0.5 * (tpr0 + tpr1) * (fpr1 - fpr0)
    return RocCurve(points=tuple(points), auc=auc)


# ---------------------------------------------------------------------------
# score export format: slide_id,label,score,magnification


SCORES_HEADER = "slide_id,label,score,magnification"


def scores_csv(rows, magnification):
    """rows: (slide_id, label, score) triples."""
    buf = io.StringIO()
    buf.write(SCORES_HEADER + "\n")
    for slide_id, label, score in rows:
        buf.write(f"{slide_id},{label},{score:.10g},{magnification}\n")
    return buf.getvalue()


def read_scores_csv(path):
    """Parse a score export; returns (slide_id, label, score, magnification) rows."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read scores {path}: {exc}") from exc
    if not lines or lines[0] != SCORES_HEADER:
        raise DataError(f"{path} line 1: header must be {SCORES_HEADER}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path} line {lineno}: expected 4 fields, got {len(parts)}")
        slide_id, label_s, score_s, mag = parts
        if label_s not in ("0", "1"):
            raise DataError(f"{path} line {lineno}: label must be 0 or 1")
        try:
            score = float(score_s)
        except ValueError as exc:
            raise DataError(f"{path} line {lineno}: bad score {score_s!r}") from exc
        if not math.isfinite(score):
            raise DataError(f"{path} line {lineno}: non-finite score")
        rows.append((slide_id, int(label_s), score, mag))
    if not rows:
        raise DataError(f"{path}: no score rows")
    return rows


# ---------------------------------------------------------------------------
# sweeps


SWEEP_HEADER = "sweep_param,repeat,seed,best_val_balanced_error,best_epoch"


@dataclass(frozen=True)
class SweepRow:
    param: str
    repeat: int
    seed: int
    best_val_balanced_error: float = None   # None when the cell failed
    best_epoch: int = None


@dataclass
class SweepResult:
    rows: list
    failures: list  # (param, repeat, message)

    def csv(self):
        buf = io.StringIO()
        buf.write(SWEEP_HEADER + "\n")
        for r in self.rows:
            if r.best_val_balanced_error is None:
                buf.write(f"{r.param},{r.repeat},{r.seed},,\n")
            else:
                buf.write(f"{r.param},{r.repeat},{r.seed},"
                          f"{r.best_val_balanced_error:.10g},{r.best_epoch}\n")
        return buf.getvalue()


def _run_cell(result_rows, failures, param, repeat, config, train_bags, val_bags):
    from . import mil
    try:
        res = mil.train_on_bags(config, train_bags, val_bags)
    except MilError as exc:
        failures.append((param, repeat, str(exc)))
        result_rows.append(SweepRow(param=param, repeat=repeat, seed=config.seed))
        return None
    result_rows.append(SweepRow(param=param, repeat=repeat, seed=config.seed,
                                best_val_balanced_error=res.best_val_balanced_error,
                                best_epoch=res.best_epoch))
    return res


def run_weight_sweep(base_config, w1_values, repeats, train_bags, val_bags):
    """Full training per (w1, repeat); seed = base seed + repeat."""
    if not w1_values:
        raise ArgumentError("weight sweep needs at least one w1 value")
    result = SweepResult(rows=[], failures=[])
    for w1 in w1_values:
        for repeat in range(repeats):
            cfg = replace(base_config, w1=w1, seed=base_config.seed + repeat)
            _run_cell(result.rows, result.failures, f"{w1:g}", repeat, cfg,
                      train_bags, val_bags)
    return result


def nested_subsets(n, sizes, seed):
    """Index arrays for the size sweep; each subset contains the previous one."""
    order = np.random.default_rng([seed, 313]).permutation(n)
    return [order[:size].copy() for size in sizes]


def run_size_sweep(base_config, sizes, repeats, train_bags, val_bags):
    """Training-set-size sweep on nested seeded subsets of the train split."""
    if not sizes:
        raise ArgumentError("size sweep needs at least one size")
    if list(sizes) != sorted(sizes):
        raise ArgumentError("sizes must be ascending")
    if sizes[0] < 1 or sizes[-1] > len(train_bags):
        raise ArgumentError(f"sizes must fit in 1..{len(train_bags)}")
    subsets = nested_subsets(len(train_bags), sizes, base_config.seed)
    result = SweepResult(rows=[], failures=[])
    for size, subset in zip(sizes, subsets):
        picked = [train_bags[i] for i in subset]
        for repeat in range(repeats):
            cfg = replace(base_config, seed=base_config.seed + repeat)
            _run_cell(result.rows, result.failures, str(size), repeat, cfg,
                      picked, val_bags)
    return result


def run_magnification_sweep(base_config, magnifications, manifest_entries):
    """One model per magnification; exports val/test slide scores for ensembling.

    Returns (SweepResult, scores) where scores maps (magnification, split)
    to (slide_id, label, score) rows aligned with the manifest order.
    """
    from . import mil
    from .slide import bags_from_manifest
    if not magnifications:
        raise ArgumentError("magnification sweep needs at least one magnification")
    result = SweepResult(rows=[], failures=[])
    scores = {}
    for mag in magnifications:
        cfg = replace(base_config, magnification=mag)
        try:
            split_bags = {split: bags_from_manifest(manifest_entries,
                                                    magnification=mag,
                                                    splits=(split,))
                          for split in ("train", "val", "test")}
            res = mil.train_on_bags(cfg, split_bags["train"], split_bags["val"])
        except MilError as exc:
            result.failures.append((mag, 0, str(exc)))
            result.rows.append(SweepRow(param=mag, repeat=0, seed=cfg.seed))
            continue
        result.rows.append(SweepRow(param=mag, repeat=0, seed=cfg.seed,
                                    best_val_balanced_error=res.best_val_balanced_error,
                                    best_epoch=res.best_epoch))
        for split in ("val", "test"):
            bags = split_bags[split]
            slide_scores, labels, _ = mil.evaluate_bags(res.model, bags,
                                                        cfg.threshold,
                                                        workers=cfg.workers)
            scores[(mag, split)] = [(b.slide_id, int(y), float(v))
                                    for b, y, v in zip(bags, labels, slide_scores)]
    return result, scores


def run_augmentation_sweep(base_config, repeats, train_bags, val_bags):
    """Paired runs with augmentation off and on; seed = base seed + repeat."""
    result = SweepResult(rows=[], failures=[])
    for flag, name in ((False, "off"), (True, "on")):
        for repeat in range(repeats):
            cfg = replace(base_config, augment=flag, seed=base_config.seed + repeat)
            _run_cell(result.rows, result.failures, name, repeat, cfg,
                      train_bags, val_bags)
    return result
