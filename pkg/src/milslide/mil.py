"""Weakly supervised training loop over bags of tiles.

Each epoch: score every tile of every training bag with the frozen
current model, pick the highest-scoring tile per bag (ties to the
smallest index), then run minibatch updates on just those tiles with the
slide labels as targets. Model selection tracks validation balanced
error after each epoch. Slide-level prediction is the max tile
probability against a threshold.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import io

import numpy as np

from . import eval as ev
from .errors import ArgumentError, ConfigError, NumericError, UsageError
from .numerics import (AdamState, ModelConfig, TileCnn, adam_step,
                       weighted_cross_entropy)
from .slide import MAGNIFICATIONS, bags_from_manifest

# tiles per forward chunk during inference; fixed so float results never
# depend on bag size or worker count
INFERENCE_CHUNK = 256

AUGMENTATIONS = 6  # identity, rot90, rot180, rot270, hflip, vflip


@dataclass(frozen=True)
class SlideScores:
    """Per-tile positive probabilities for one bag, plus the top pick."""

    slide_id: str
    probs: np.ndarray   # (m,) float32, bag order
    top_index: int      # smallest index attaining the max
    top_prob: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    w1: float = 0.9
    seed: int = 2
    augment: bool = False
    threshold: float = 0.5
    magnification: str = "20x"
    selection_metric: str = "balanced_error"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def w0(self):
        return 1.0 - self.w1

    def validate(self):
        if not 0.0 < self.w1 < 1.0:
            raise ConfigError(f"w1 must be in (0, 1), got {self.w1}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.workers < 1:
            raise ConfigError("epochs/batch_size/lr/workers out of range")
        if self.magnification not in MAGNIFICATIONS:
            raise ConfigError(f"unknown magnification {self.magnification!r}")
        if self.selection_metric != "balanced_error":
            raise ConfigError(f"unsupported selection metric {self.selection_metric!r}")
        self.model.validate()
        return self


def score_bag(model, bag):
    """Positive-class probability of every tile, in bag order."""
    out = np.empty(len(bag), dtype=np.float32)
    for start in range(0, len(bag), INFERENCE_CHUNK):
        stop = min(start + INFERENCE_CHUNK, len(bag))
        out[start:stop] = model.forward(bag.batch(start, stop))[:, 1]
    return out


def inference_pass(model, bags, workers=1):
    """Score all bags; the result is identical for any worker count."""
    if not bags:
        raise ArgumentError("inference_pass needs at least one bag")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_probs = list(pool.map(lambda b: score_bag(model, b), bags))
    else:
        all_probs = [score_bag(model, bag) for bag in bags]
    scores = []
    for bag, probs in zip(bags, all_probs):
        k = int(np.argmax(probs))  # first max wins
        scores.append(SlideScores(slide_id=bag.slide_id, probs=probs,
                                  top_index=k, top_prob=float(probs[k])))
    return scores


def select_top_instances(scores, bags):
    """One (tile, slide label) pair per bag, picked by the current ranking."""
    if len(scores) != len(bags):
        raise UsageError("scores and bags differ in length")
    tiles = []
    labels = np.empty(len(bags), dtype=np.int64)
    for i, (sc, bag) in enumerate(zip(scores, bags)):
        if sc.slide_id != bag.slide_id:
            raise UsageError(f"scores[{i}] is for {sc.slide_id!r}, bag is {bag.slide_id!r}")
        tiles.append(bag.tiles[sc.top_index])
        labels[i] = bag.label
    return np.stack(tiles), labels


def augment_tile(tile_chw, choice):
    """One of six lossless dihedral transforms of a (C, H, W) tile."""
    if choice == 0:
        return tile_chw
    if choice in (1, 2, 3):
        return np.rot90(tile_chw, k=choice, axes=(1, 2))
    if choice == 4:
        return tile_chw[:, :, ::-1]
    if choice == 5:
        return tile_chw[:, ::-1, :]
    raise ArgumentError(f"augmentation choice must be 0..5, got {choice}")


def train_epoch(model, train_bags, config, adam, epoch_index):
    """One pass: rank tiles, pick top-1 per bag, shuffled minibatch updates.

    Returns the mean minibatch loss over the epoch.
    """
    scores = inference_pass(model, train_bags, workers=config.workers)
    tiles, labels = select_top_instances(scores, train_bags)
    n = len(labels)
    order = np.random.default_rng([config.seed, epoch_index, 101]).permutation(n)
    if config.augment:
        aug_rng = np.random.default_rng([config.seed, epoch_index, 202])
        choices = aug_rng.integers(0, AUGMENTATIONS, size=n)
        tiles = np.stack([augment_tile(t, int(c)) for t, c in zip(tiles, choices)])

    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        x = tiles[idx].astype(np.float32) / 255.0
        model.zero_grad()
        try:
            probs = model.forward_train(x)
            loss = weighted_cross_entropy(probs, labels[idx], config.w0, config.w1)
            loss.backward()
        except NumericError as exc:
            raise NumericError(f"epoch {epoch_index}, batch at instance {start}: {exc}") from exc
        adam_step(model.params, adam)
        total += loss.item() * len(idx)
    return total / n


def predict_slide(model, bag, threshold=0.5):
    """(decision, slide score): positive iff the best tile clears the threshold."""
    if len(bag) == 0:
        raise ArgumentError(f"bag {bag.slide_id!r} has no tiles")
    score = float(score_bag(model, bag).max())
    return int(score >= threshold), score


def evaluate_bags(model, bags, threshold, workers=1):
    """Slide scores + labels + confusion-derived rates for a bag list."""
    scores = inference_pass(model, bags, workers=workers)
    slide_scores = np.array([s.top_prob for s in scores], dtype=np.float64)
    labels = np.array([b.label for b in bags], dtype=np.int64)
    cm = ev.confusion(slide_scores, labels, threshold)
    return slide_scores, labels, cm


@dataclass
class TrainResult:
    model: TileCnn
    adam: AdamState
    config: TrainConfig
    history: list              # rows: (epoch, train_loss, val_bal_err, val_fnr, val_fpr)
    best_epoch: int            # 0 when epochs == 0 (initial model kept)
    best_val_balanced_error: float


def train_on_bags(config, train_bags, val_bags):
    """Full training run on prebuilt bags; keeps the best-validation model.

    The checkpointed model minimizes validation balanced error, ties going
    to the earlier epoch. epochs=0 returns the freshly initialized model
    with an empty history.
    """
    config.validate()
    if config.epochs > 0 and (not train_bags or not val_bags):
        raise ConfigError("training requires non-empty train and val bag lists")
    model = TileCnn.initialize(config.model, seed=config.seed)
    adam = AdamState.for_params(model.params, lr=config.lr)
    history = []
    best_epoch = 0
    best_err = float("inf")
    best_state = model.state_copy()
    best_adam = adam.copy()
    for epoch in range(1, config.epochs + 1):
        train_loss = train_epoch(model, train_bags, config, adam, epoch)
        _, _, cm = evaluate_bags(model, val_bags, config.threshold,
                                 workers=config.workers)
        val_err = ev.balanced_error(cm)
        history.append((epoch, train_loss, val_err, ev.fnr(cm), ev.fpr(cm)))
        if val_err < best_err:
            best_err = val_err
            best_epoch = epoch
            best_state = model.state_copy()
            best_adam = adam.copy()
    model.load_state(best_state)
    return TrainResult(model=model, adam=best_adam, config=config, history=history,
                       best_epoch=best_epoch,
                       best_val_balanced_error=(best_err if history else float("nan")))


def train(config, manifest_entries):
    """Train from a manifest: builds bags for the train/val splits, then runs."""
    tile = config.model.input_side
    train_bags = bags_from_manifest(manifest_entries, magnification=config.magnification,
                                    tile_size=tile, splits=("train",))
    val_bags = bags_from_manifest(manifest_entries, magnification=config.magnification,
                                  tile_size=tile, splits=("val",))
    if not train_bags or not val_bags:
        raise ConfigError("manifest must provide non-empty train and val splits")
    return train_on_bags(config, train_bags, val_bags)


HISTORY_HEADER = "epoch,train_loss,val_balanced_error,val_fnr,val_fpr"


def history_csv(history):
    """Render the per-epoch history with stable float formatting."""
    buf = io.StringIO()
    buf.write(HISTORY_HEADER + "\n")
    for epoch, loss, err, fnr_v, fpr_v in history:
        buf.write(f"{epoch},{loss:.10g},{err:.10g},{fnr_v:.10g},{fpr_v:.10g}\n")
    return buf.getvalue()


def config_to_lines(config):
    """TrainConfig as key=value lines (model architecture travels separately)."""
    return [
        f"epochs={config.epochs}",
        f"batch_size={config.batch_size}",
        f"lr={config.lr:.10g}",
        f"w1={config.w1:.10g}",
        f"seed={config.seed}",
        f"augment={'true' if config.augment else 'false'}",
        f"threshold={config.threshold:.10g}",
        f"magnification={config.magnification}",
        f"selection_metric={config.selection_metric}",
        f"workers={config.workers}",
    ]


def config_from_mapping(kv, base=None):
    """Build a TrainConfig from a str->str mapping, rejecting unknown keys."""
    config = base or TrainConfig()
    casts = {
        "epochs": int, "batch_size": int, "lr": float, "w1": float, "seed": int,
        "threshold": float, "magnification": str, "selection_metric": str,
        "workers": int,
    }
    updates = {}
    for key, raw in kv.items():
        if key == "augment":
            if raw not in ("true", "false"):
                raise ConfigError(f"augment must be true or false, got {raw!r}")
            updates[key] = raw == "true"
        elif key in casts:
            try:
                updates[key] = casts[key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(config, **updates).validate()
