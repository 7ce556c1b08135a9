"""Hidden-layer feature extraction and a 2-D PCA of sampled tiles.

The features are the activations feeding the final classifier layer. Per
slide we keep the top-ranked tile plus up to 50 others sampled without
replacement, fit PCA on that table, and project to two coordinates.
"""

from dataclasses import dataclass
import io

import numpy as np

from .errors import ArgumentError, ConfigError, DegenerateDataError, UsageError

SAMPLES_PER_SLIDE = 50
POWER_TOL = 1e-9
POWER_MAX_ITERS = 10000


@dataclass(frozen=True)
class EmbeddingRow:
    slide_id: str
    row: int
    col: int
    is_top: bool
    label: int


@dataclass
class EmbeddingTable:
    rows: list            # EmbeddingRow per feature vector
    features: np.ndarray  # (n, hidden_units) float32


def sample_tile_indices(bag, top_index, seed, per_slide=SAMPLES_PER_SLIDE):
    """Tile indices to embed for one bag: the top tile first, then a sample.

    The sample is drawn without replacement from the non-top tiles; when
    the bag is small everything is taken. Deterministic given the seed.
    """
    m = len(bag)
    others = np.array([i for i in range(m) if i != top_index], dtype=np.int64)
    if len(others) > per_slide:
        rng = np.random.default_rng(seed)
        others = others[np.sort(rng.choice(len(others), size=per_slide, replace=False))]
    return [int(top_index)] + [int(i) for i in others]


def extract_features(model, bags, scores, seed=0, per_slide=SAMPLES_PER_SLIDE):
    """Embed each bag's top tile plus a per-slide sample; one table for all."""
    if model.config.hidden_units < 1:
        raise ConfigError("model has no hidden layer to embed")
    if len(bags) != len(scores):
        raise UsageError("bags and scores differ in length")
    rows = []
    chunks = []
    for b, (bag, sc) in enumerate(zip(bags, scores)):
        if sc.slide_id != bag.slide_id:
            raise UsageError(f"scores[{b}] is for {sc.slide_id!r}, bag is {bag.slide_id!r}")
        picks = sample_tile_indices(bag, sc.top_index, seed=[seed, b],
                                    per_slide=per_slide)
        batch = bag.tiles[picks].astype(np.float32) / 255.0
        chunks.append(model.features_raw(batch))
        for rank, i in enumerate(picks):
            rows.append(EmbeddingRow(slide_id=bag.slide_id,
                                     row=int(bag.rowcols[i, 0]),
                                     col=int(bag.rowcols[i, 1]),
                                     is_top=rank == 0,
                                     label=bag.label))
    features = np.concatenate(chunks, axis=0)
    if features.shape[1] != model.config.hidden_units:
        raise ConfigError("feature width does not match the hidden layer")
    return EmbeddingTable(rows=rows, features=features)


# ---------------------------------------------------------------------------
# PCA via power iteration


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray        # (d,)
    axes: np.ndarray        # (2, d), orthonormal rows
    variances: np.ndarray   # (2,), descending, non-negative


def _orient(v):
    """Sign convention: the largest-magnitude coordinate is positive."""
    peak = int(np.argmax(np.abs(v)))
    return -v if v[peak] < 0 else v


def _power_iterate(cov, start):
    v = start / np.linalg.norm(start)
    for _ in range(POWER_MAX_ITERS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return None, 0.0  # start vector is in the null space
        w /= norm
        # step norm is linear in the angle still to go, so this tolerance
        # carries through to the axis itself (the matrix is PSD: no sign flips)
        done = bool(np.linalg.norm(w - v) < POWER_TOL)
        v = w
        if done:
            break
    value = float(v @ cov @ v)
    return v, value


def _unit_orthogonal_to(v):
    """Deterministic unit vector orthogonal to v (for rank-1 data)."""
    basis = np.zeros_like(v)
    basis[int(np.argmin(np.abs(v)))] = 1.0
    w = basis - (basis @ v) * v
    return w / np.linalg.norm(w)


def fit_pca_2d(features):
    """Top-2 principal axes of the sample covariance (divisor n-1)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ArgumentError("PCA needs a 2-d table with at least 3 rows")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    scale = float(np.abs(cov).max())
    if scale == 0.0:
        raise DegenerateDataError("features have zero variance; nothing to embed")

    d = cov.shape[0]
    start = np.ones(d) + np.arange(d) / d  # fixed start, no RNG
    v1, lam1 = _power_iterate(cov, start)
    if v1 is None:
        raise DegenerateDataError("power iteration collapsed on the start vector")
    v1 = _orient(v1)

    deflated = cov - lam1 * np.outer(v1, v1)
    if float(np.abs(deflated).max()) <= POWER_TOL * scale:
        v2, lam2 = _unit_orthogonal_to(v1), 0.0
    else:
        v2, lam2 = _power_iterate(deflated, start)
        if v2 is None:
            v2, lam2 = _unit_orthogonal_to(v1), 0.0
        v2 = v2 - (v2 @ v1) * v1  # re-orthogonalize against roundoff drift
        v2 /= np.linalg.norm(v2)
    v2 = _orient(v2)
    return PcaModel(mean=mean, axes=np.stack([v1, v2]),
                    variances=np.array([max(lam1, 0.0), max(lam2, 0.0)]))


def project(pca, features):
    """2-D coordinates of each row: axes . (feature - mean)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pca.mean.shape[0]:
        raise UsageError(f"feature width {x.shape} does not match PCA dimension "
                         f"{pca.mean.shape[0]}")
    return (x - pca.mean) @ pca.axes.T


def centroid_separation(points_a, points_b):
    """Distance between group centroids in units of the pooled within-group SD."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ArgumentError("need at least two points per group")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    scatter = (np.sum((a - ca) ** 2) + np.sum((b - cb) ** 2))
    pooled = np.sqrt(scatter / (len(a) + len(b) - 2))
    if pooled == 0.0:
        raise DegenerateDataError("zero within-group scatter")
    return float(np.linalg.norm(ca - cb) / pooled)


EMBEDDING_HEADER = "slide_id,row,col,is_top,label,x,y"


def embedding_csv(table, coords):
    """CSV of the sampled tiles with their 2-D coordinates."""
    if len(table.rows) != coords.shape[0]:
        raise UsageError("coordinate count does not match table rows")
    buf = io.StringIO()
    buf.write(EMBEDDING_HEADER + "\n")
    for row, (x, y) in zip(table.rows, coords):
        buf.write(f"{row.slide_id},{row.row},{row.col},{int(row.is_top)},"
                  f"{row.label},{x:.10g},{y:.10g}\n")
    return buf.getvalue()
