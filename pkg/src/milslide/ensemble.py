"""Post-hoc combination of slide scores from models at different scales.

Operates purely on exported score tables: scores are joined by slide_id
and combined per slide with max or arithmetic mean. No model is loaded.
"""

from dataclasses import dataclass
import io

from .errors import ArgumentError, DataError

MODES = ("max", "avg")


@dataclass
class ScoreSet:
    """Scores joined by slide: slide_id -> label and one score per source."""

    slide_ids: list            # first-seen order, from the first source
    labels: dict               # slide_id -> label
    scores: dict               # slide_id -> {magnification: score}
    magnifications: tuple


def build_score_set(row_lists):
    """Join several score exports (rows of slide_id,label,score,magnification).

    Every listed slide must appear in every source with a consistent label.
    """
    if not row_lists:
        raise ArgumentError("need at least one score table")
    mags = []
    labels = {}
    scores = {}
    slide_ids = []
    for rows in row_lists:
        table_mags = {m for _, _, _, m in rows}
        if len(table_mags) != 1:
            raise DataError(f"one score table mixes magnifications: {sorted(table_mags)}")
        mag = table_mags.pop()
        if mag in mags:
            raise DataError(f"duplicate score table for magnification {mag}")
        mags.append(mag)
        seen = set()
        for slide_id, label, score, _ in rows:
            if slide_id in seen:
                raise DataError(f"{mag} scores list {slide_id!r} twice")
            seen.add(slide_id)
            if slide_id not in labels:
                labels[slide_id] = label
                scores[slide_id] = {}
                slide_ids.append(slide_id)
            elif labels[slide_id] != label:
                raise DataError(f"label for {slide_id!r} differs between sources")
            scores[slide_id][mag] = score
    for slide_id in slide_ids:
        missing = [m for m in mags if m not in scores[slide_id]]
        if missing:
            raise DataError(f"{slide_id!r} has no score for {missing}")
    return ScoreSet(slide_ids=slide_ids, labels=labels, scores=scores,
                    magnifications=tuple(mags))


def combine(score_set, mode, magnifications=None):
    """Per-slide max or mean over the chosen sources; returns (id, label, score) rows."""
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    mags = score_set.magnifications if magnifications is None else tuple(magnifications)
    if not mags:
        raise ArgumentError("need at least one magnification to combine")
    for mag in mags:
        if mag not in score_set.magnifications:
            raise DataError(f"score set has no magnification {mag!r}")
    out = []
    for slide_id in score_set.slide_ids:
        values = [score_set.scores[slide_id][m] for m in mags]
        combined = max(values) if mode == "max" else sum(values) / len(values)
        out.append((slide_id, score_set.labels[slide_id], combined))
    return out


def combined_csv(rows, magnifications, mode):
    """Score-export format plus a mode column."""
    buf = io.StringIO()
    buf.write("slide_id,label,score,magnification,mode\n")
    source = "+".join(magnifications)
    for slide_id, label, score in rows:
        buf.write(f"{slide_id},{label},{score:.10g},{source},{mode}\n")
    return buf.getvalue()
