"""Slide rasters: binary container, synthetic corpus generator, tiling, bags.

A slide is an RGB8 raster with a binary label and, for positives, a
pixel-level lesion mask kept only for diagnostics (training never reads
it). Slides live in a small "MILS" container: magic, version, dimensions,
label, raw pixels, bit-packed mask. Tiles are cut on a regular grid,
background tiles are dropped, and the survivors form the slide's bag.
"""

import csv
from dataclasses import dataclass
import math
import os
import struct

import numpy as np

from .errors import ArgumentError, DataError, EmptyBagError, GenerationError

SLIDE_MAGIC = b"MILS"
SLIDE_VERSION = 1

# a pixel counts as background when its darkest channel is still brighter
# than this; a tile is background when background pixels exceed
# 1 - TISSUE_FRACTION of its area
BACKGROUND_MIN = 0.86
TISSUE_FRACTION = 0.25

# downsample factors relative to the native scan
MAGNIFICATIONS = {"20x": 1, "10x": 2, "5x": 4}

DEFAULT_TILE_SIZE = 32


def default_overlap(magnification):
    """Tile overlap used when the caller does not pick one: 50% only at 5x."""
    if magnification not in MAGNIFICATIONS:
        raise ArgumentError(f"unknown magnification {magnification!r}")
    return 0.5 if magnification == "5x" else 0.0


@dataclass
class SlideRaster:
    """One slide: RGB8 pixels, slide label, optional lesion mask."""

    pixels: np.ndarray          # (H, W, 3) uint8
    label: int                  # 0 or 1
    mask: np.ndarray = None     # (H, W) bool, or None

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Tile:
    """One retained tile: where it sits and its pixels as floats in [0, 1]."""

    slide_id: str
    row: int
    col: int
    x: int                 # origin in magnification pixels
    y: int
    magnification: str
    pixels: np.ndarray     # (t, t, 3) float32 in [0, 1]


@dataclass
class Bag:
    """All retained tiles of one slide at one magnification.

    Tiles are stored as one uint8 array (NCHW) rather than objects so a
    whole corpus fits in memory; tile(i) materializes the record form.
    """

    slide_id: str
    label: int
    magnification: str
    tile_size: int
    stride: int
    tiles: np.ndarray      # (N, 3, t, t) uint8
    origins: np.ndarray    # (N, 2) int32, (x, y) in magnification pixels
    rowcols: np.ndarray    # (N, 2) int32, (row, col) grid position
    grid: tuple            # (rows, cols) of the full grid before filtering

    def __len__(self):
        return self.tiles.shape[0]

    def batch(self, start, stop):
        """Tiles [start:stop) as float32 in [0, 1], NCHW."""
        return self.tiles[start:stop].astype(np.float32) / 255.0

    def tile(self, i):
        return Tile(slide_id=self.slide_id, row=int(self.rowcols[i, 0]),
                    col=int(self.rowcols[i, 1]), x=int(self.origins[i, 0]),
                    y=int(self.origins[i, 1]), magnification=self.magnification,
                    pixels=self.tiles[i].transpose(1, 2, 0).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# container i/o


def save_slide(path, slide):
    if slide.pixels.dtype != np.uint8 or slide.pixels.ndim != 3 or slide.pixels.shape[2] != 3:
        raise ArgumentError("slide pixels must be (H, W, 3) uint8")
    if slide.label not in (0, 1):
        raise ArgumentError(f"slide label must be 0 or 1, got {slide.label}")
    h, w = slide.pixels.shape[:2]
    parts = [SLIDE_MAGIC,
             struct.pack("<IIIBB", SLIDE_VERSION, w, h, slide.label,
                         0 if slide.mask is None else 1),
             np.ascontiguousarray(slide.pixels).tobytes()]
    if slide.mask is not None:
        if slide.mask.shape != (h, w):
            raise ArgumentError("mask shape must match the pixel raster")
        parts.append(np.packbits(slide.mask.reshape(-1).astype(np.uint8)).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_slide(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read slide {path}: {exc}") from exc
    if len(blob) < 18 or blob[:4] != SLIDE_MAGIC:
        raise DataError(f"{path}: not a slide container (bad magic)")
    version, w, h, label, has_mask = struct.unpack("<IIIBB", blob[4:18])
    if version != SLIDE_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    if label not in (0, 1) or has_mask not in (0, 1):
        raise DataError(f"{path}: corrupt header")
    need = 18 + h * w * 3 + (has_mask and (h * w + 7) // 8)
    if len(blob) != need:
        raise DataError(f"{path}: wrong payload size ({len(blob)} vs {need} bytes)")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=18)
    pixels = pixels.reshape(h, w, 3).copy()
    mask = None
    if has_mask:
        packed = np.frombuffer(blob, dtype=np.uint8, offset=18 + h * w * 3)
        mask = np.unpackbits(packed, count=h * w).reshape(h, w).astype(bool)
    return SlideRaster(pixels=pixels, label=int(label), mask=mask)


# ---------------------------------------------------------------------------
# tiling


def tile_stride(tile_size, overlap):
    """Grid step for a given fractional overlap, at least one pixel."""
    if tile_size < 1:
        raise ArgumentError("tile_size must be positive")
    if not 0.0 <= overlap < 1.0:
        raise ArgumentError(f"overlap must be in [0, 1), got {overlap}")
    return max(1, int(math.floor(tile_size * (1.0 - overlap) + 0.5)))


def tile_grid(width, height, tile_size, overlap):
    """Row-major (x, y) origins of every fully inside tile, plus stride and grid shape.

    Origins sit at multiples of the stride starting from the slide origin;
    a final partial tile is never emitted.
    """
    stride = tile_stride(tile_size, overlap)
    if tile_size > min(width, height):
        raise ArgumentError(f"tile size {tile_size} exceeds raster {width}x{height}")
    cols = (width - tile_size) // stride + 1
    rows = (height - tile_size) // stride + 1
    xs = np.arange(cols, dtype=np.int32) * stride
    ys = np.arange(rows, dtype=np.int32) * stride
    gx, gy = np.meshgrid(xs, ys)  # row-major: y varies slowest
    origins = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    return origins, stride, (rows, cols)


def is_background(tile_u8, background_min=BACKGROUND_MIN, tissue_fraction=TISSUE_FRACTION):
    """True when too few pixels look like tissue.

    tile_u8 is (t, t, 3) uint8; a pixel is background when min(R,G,B)/255
    exceeds background_min, and the tile is background when that fraction
    exceeds 1 - tissue_fraction.
    """
    darkest = tile_u8.min(axis=2).astype(np.float64) / 255.0
    bg_frac = float(np.mean(darkest > background_min))
    return bg_frac > 1.0 - tissue_fraction


def area_downsample(pixels_u8, factor):
    """Box-average downsample by an integer factor; trailing remainder is cropped.

    Returns float64 block means (exact for uint8 inputs); quantize_u8
    turns them back into a raster.
    """
    if factor < 1:
        raise ArgumentError("downsample factor must be >= 1")
    if factor == 1:
        return pixels_u8.astype(np.float64)
    h = pixels_u8.shape[0] // factor
    w = pixels_u8.shape[1] // factor
    crop = pixels_u8[:h * factor, :w * factor].astype(np.float64)
    return crop.reshape(h, factor, w, factor, 3).mean(axis=(1, 3))


def quantize_u8(pixels_f64):
    return np.round(np.clip(pixels_f64, 0.0, 255.0)).astype(np.uint8)


def raster_at(slide, magnification):
    """The slide's pixels at the requested magnification, uint8."""
    factor = MAGNIFICATIONS.get(magnification)
    if factor is None:
        raise ArgumentError(f"unknown magnification {magnification!r}")
    if factor == 1:
        return slide.pixels
    return quantize_u8(area_downsample(slide.pixels, factor))


def build_bag(slide, slide_id, magnification="20x", tile_size=DEFAULT_TILE_SIZE,
              overlap=None):
    """Cut the slide into tiles at one magnification and keep the tissue ones."""
    if overlap is None:
        overlap = default_overlap(magnification)
    raster = raster_at(slide, magnification)
    origins, stride, grid = tile_grid(raster.shape[1], raster.shape[0], tile_size, overlap)
    keep_tiles = []
    keep_origins = []
    keep_rowcols = []
    cols = grid[1]
    for idx, (x, y) in enumerate(origins):
        patch = raster[y:y + tile_size, x:x + tile_size]
        if is_background(patch):
            continue
        keep_tiles.append(patch.transpose(2, 0, 1))
        keep_origins.append((x, y))
        keep_rowcols.append((idx // cols, idx % cols))
    if not keep_tiles:
        raise EmptyBagError(f"slide {slide_id}: every tile was background")
    return Bag(slide_id=slide_id, label=slide.label, magnification=magnification,
               tile_size=tile_size, stride=stride,
               tiles=np.ascontiguousarray(np.stack(keep_tiles)),
               origins=np.array(keep_origins, dtype=np.int32),
               rowcols=np.array(keep_rowcols, dtype=np.int32),
               grid=grid)


# ---------------------------------------------------------------------------
# synthetic slides


BG_LEVEL = 0.96
BG_JITTER = 0.02
TISSUE_RGB = (0.74, 0.50, 0.66)
COARSE_CELL = 16          # side of one low-frequency noise cell, in pixels
COARSE_AMPLITUDE = 0.06
SPECKLE_SIGMA = 0.025
NUCLEI_PROB = 0.02
NUCLEI_DIM = 0.55
DOT_PERIOD = 3            # lesion texture lattice step
DOT_RADIUS = 1.2
DOT_DIM = 0.22
LESION_MARGIN = 20.0      # keeps the lesion away from its host ellipse's rim
LESION_FOCI = (0.7, 0.15, 0.15)   # area budget split: one main disk, two satellites
MIMICKER_RATE = 1.0       # Poisson mean per slide
MIMICKER_PERIOD = 4       # sparser lattice than a lesion
MIMICKER_KEEP = 0.3       # fraction of mimicker lattice sites actually dotted
MIMICKER_DIM = 0.62       # mimicker dots stay far lighter than lesion dots


def _coarse_field(rng, side):
    """Low-frequency per-channel color jitter, bilinearly upsampled."""
    cells = side // COARSE_CELL + 2
    grid = rng.uniform(-COARSE_AMPLITUDE, COARSE_AMPLITUDE, size=(cells, cells, 3))
    pos = np.arange(side) / COARSE_CELL
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    top = grid[i0][:, i0] * (1 - frac)[None, :, None] + grid[i0][:, i0 + 1] * frac[None, :, None]
    bot = grid[i0 + 1][:, i0] * (1 - frac)[None, :, None] + grid[i0 + 1][:, i0 + 1] * frac[None, :, None]
    return top * (1 - frac)[:, None, None] + bot * frac[:, None, None]


def _ellipse_mask(side, cx, cy, a, b, theta):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    return u * u + v * v <= 1.0


def _paint_dots(rng, region, keep_prob, period=DOT_PERIOD):
    """Jittered dot lattice inside `region`; returns the dotted pixel mask."""
    side = region.shape[0]
    ys, xs = np.nonzero(region)
    out = np.zeros_like(region)
    if ys.size == 0:
        return out
    for gy in range(int(ys.min()), int(ys.max()) + 1, period):
        for gx in range(int(xs.min()), int(xs.max()) + 1, period):
            if rng.random() >= keep_prob:
                continue
            cy = gy + rng.uniform(-1.0, 1.0)
            cx = gx + rng.uniform(-1.0, 1.0)
            y0, y1 = max(0, int(cy - DOT_RADIUS)), min(side - 1, int(cy + DOT_RADIUS) + 1)
            x0, x1 = max(0, int(cx - DOT_RADIUS)), min(side - 1, int(cx + DOT_RADIUS) + 1)
            if y1 < y0 or x1 < x0:
                continue
            py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            hit = (py - cy) ** 2 + (px - cx) ** 2 <= DOT_RADIUS ** 2
            out[y0:y1 + 1, x0:x1 + 1] |= hit
    out &= region
    return out


def generate_synthetic_slide(side, label, lesion_fraction, rng, tissue_blobs=None):
    """One synthetic slide: bright background, tissue blobs, optional lesion.

    The lesion is a few densely dotted disks inside the larger tissue
    ellipses, kept at most `lesion_fraction` of the tissue area. Slides of
    both classes may also carry small sparse dotted clusters (mimickers),
    so mere presence of dots does not give the label away; the lesion is
    set apart by its dot density and much darker dots.
    """
    if side < 8 * DEFAULT_TILE_SIZE:
        raise GenerationError(f"side must be at least {8 * DEFAULT_TILE_SIZE} pixels")
    if label not in (0, 1):
        raise GenerationError("label must be 0 or 1")
    if label == 1 and not 0.0 < lesion_fraction <= 0.1:
        raise GenerationError("lesion_fraction must be in (0, 0.1] for positives")

    canvas = np.repeat(BG_LEVEL + rng.uniform(-BG_JITTER, BG_JITTER, (side, side, 1)),
                       3, axis=2)

    tissue = np.zeros((side, side), dtype=bool)
    ellipses = []
    blobs = int(rng.integers(2, 4)) if tissue_blobs is None else int(tissue_blobs)
    for _ in range(blobs):
        cx, cy = rng.uniform(0.25, 0.75, size=2) * side
        a, b = rng.uniform(0.14, 0.24, size=2) * side
        theta = rng.uniform(0.0, math.pi)
        ellipses.append((cx, cy, a, b))
        tissue |= _ellipse_mask(side, cx, cy, a, b, theta)
    if not tissue.any():
        raise GenerationError("slide parameters produced no tissue")

    tissue_rgb = (np.array(TISSUE_RGB) + _coarse_field(rng, side)
                  + rng.normal(0.0, SPECKLE_SIGMA, (side, side, 3)))
    canvas[tissue] = tissue_rgb[tissue]
    nuclei = (rng.random((side, side)) < NUCLEI_PROB) & tissue
    canvas[nuclei] *= NUCLEI_DIM

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    lesion = np.zeros((side, side), dtype=bool)
    if label == 1:
        budget = lesion_fraction * int(tissue.sum())
        hosts = sorted(ellipses, key=lambda e: min(e[2], e[3]), reverse=True)
        disks = []
        for i, weight in enumerate(LESION_FOCI):
            cx, cy, a, b = hosts[i % len(hosts)]
            short = min(a, b)
            r = min(math.sqrt(weight * budget / math.pi),
                    max(short - LESION_MARGIN, 0.35 * short))
            # staying inside the host's inscribed circle keeps the focus
            # on tissue for any ellipse orientation
            slack = max(short - LESION_MARGIN - r, 0.0)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            off = rng.uniform(0.0, slack)
            disks.append((cx + off * math.cos(ang), cy + off * math.sin(ang), r))
        shrink = 1.0
        while True:
            lesion[:] = False
            for cx, cy, r in disks:
                lesion |= (xx - cx) ** 2 + (yy - cy) ** 2 <= (shrink * r) ** 2
            lesion &= tissue
            if lesion.sum() <= budget or shrink < 0.05:
                break
            shrink *= 0.97
        if not lesion.any() or lesion.sum() > budget:
            raise GenerationError("cannot fit a lesion within the requested "
                                  "fraction; raise lesion_fraction or the slide side")
        canvas[_paint_dots(rng, lesion, keep_prob=1.0)] *= DOT_DIM

    plain = tissue & ~lesion
    ys, xs = np.nonzero(plain)
    for _ in range(rng.poisson(MIMICKER_RATE)):
        if ys.size == 0:
            break
        pick = int(rng.integers(ys.size))
        mcx, mcy = float(xs[pick]), float(ys[pick])
        mr = rng.uniform(4.5, 7.0)
        cluster = ((xx - mcx) ** 2 + (yy - mcy) ** 2 <= mr * mr) & plain
        canvas[_paint_dots(rng, cluster, keep_prob=MIMICKER_KEEP,
                           period=MIMICKER_PERIOD)] *= MIMICKER_DIM

    pixels = quantize_u8(np.clip(canvas, 0.0, 1.0) * 255.0)
    return SlideRaster(pixels=pixels, label=label, mask=lesion if label == 1 else None)


# ---------------------------------------------------------------------------
# manifest + corpus


MANIFEST_HEADER = ["slide_id", "path", "label", "split"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    path: str       # absolute, resolved against the manifest's directory
    label: int
    split: str


def write_manifest(path, rows):
    """rows: (slide_id, relative_path, label, split) tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(row)


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DataError(f"{path} line 1: header must be {','.join(MANIFEST_HEADER)}")
    entries = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path} line {lineno}: expected 4 fields, got {len(row)}")
        slide_id, rel, label_s, split = row
        if not slide_id or not rel:
            raise DataError(f"{path} line {lineno}: empty slide_id or path")
        if slide_id in seen:
            raise DataError(f"{path} line {lineno}: duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        if label_s not in ("0", "1"):
            raise DataError(f"{path} line {lineno}: label must be 0 or 1, got {label_s!r}")
        if split not in SPLITS:
            raise DataError(f"{path} line {lineno}: split must be one of {SPLITS}")
        entries.append(ManifestEntry(slide_id=slide_id,
                                     path=os.path.normpath(os.path.join(base, rel)),
                                     label=int(label_s), split=split))
    if not entries:
        raise DataError(f"{path}: manifest lists no slides")
    return entries


def split_counts(n):
    """70/15/15 split sizes (train gets the rounding slack)."""
    n_val = int(round(0.15 * n))
    n_test = int(round(0.15 * n))
    return n - n_val - n_test, n_val, n_test


def generate_corpus(out_dir, n_slides, prevalence, seed, side, lesion_fraction,
                    force=False):
    """Write n_slides synthetic slides plus a manifest under out_dir.

    Labels: round(n_slides * prevalence) positives. Splits: a seeded
    shuffle into 70/15/15 train/val/test, unstratified. Everything is a
    pure function of the arguments; nothing outside out_dir is touched.
    """
    if n_slides < 3:
        raise GenerationError("need at least 3 slides for a 3-way split")
    if not 0.0 < prevalence < 1.0:
        raise GenerationError("prevalence must be in (0, 1)")
    manifest_path = os.path.join(out_dir, "manifest.csv")
    if os.path.exists(manifest_path) and not force:
        raise GenerationError(f"{manifest_path} exists; pass force to overwrite")
    os.makedirs(os.path.join(out_dir, "slides"), exist_ok=True)

    n_pos = int(round(n_slides * prevalence))
    labels = np.zeros(n_slides, dtype=np.int64)
    labels[:n_pos] = 1
    n_train, n_val, _ = split_counts(n_slides)
    order = np.random.default_rng([seed, 991]).permutation(n_slides)
    splits = {}
    for rank, idx in enumerate(order):
        splits[int(idx)] = ("train" if rank < n_train
                            else "val" if rank < n_train + n_val else "test")

    rows = []
    for i in range(n_slides):
        slide = generate_synthetic_slide(side, int(labels[i]), lesion_fraction,
                                         np.random.default_rng([seed, i]))
        slide_id = f"slide_{i:04d}"
        rel = os.path.join("slides", f"{slide_id}.mils")
        save_slide(os.path.join(out_dir, rel), slide)
        rows.append((slide_id, rel, int(labels[i]), splits[i]))
    write_manifest(manifest_path, rows)
    return read_manifest(manifest_path)


def bags_from_manifest(entries, magnification="20x", tile_size=DEFAULT_TILE_SIZE,
                       overlap=None, splits=None):
    """Load every listed slide and build its bag; returns bags in manifest order."""
    bags = []
    for entry in entries:
        if splits is not None and entry.split not in splits:
            continue
        slide = load_slide(entry.path)
        if slide.label != entry.label:
            raise DataError(f"{entry.path}: stored label {slide.label} "
                            f"contradicts manifest label {entry.label}")
        bags.append(build_bag(slide, entry.slide_id, magnification=magnification,
                              tile_size=tile_size, overlap=overlap))
    return bags
