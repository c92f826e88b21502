"""Blocked gradient histograms, blocked gray histograms and RAW downsampling."""

import csv
import functools
import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path

import numpy as np
from scipy import ndimage

from bottlecheck.imaging import Image, quantize_8bit

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Sobel templates as correlation windows; a rising ramp gives positive gx
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

DEFAULT_BHOG_BINS = 9
DEFAULT_BGH_BINS = 16


class FeatureError(ValueError):
    """Raised when a feature spec is invalid or does not fit an image."""

    pass


class FeatureKind(StrEnum):
    BHOG = "bhog"
    BGH = "bgh"
    RAW = "raw"


@dataclass(frozen=True)
class FeatureSpec:
    """Declarative extractor configuration.

    rows/cols/n_bins apply to the histogram kinds, scale to RAW only.
    """

    kind: FeatureKind
    rows: int = 1
    cols: int = 1
    n_bins: int = DEFAULT_BHOG_BINS
    scale: float = 1.0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", FeatureKind(self.kind))
        except ValueError as e:
            raise FeatureError(f"Unknown feature kind: {self.kind!r}") from e
        if self.rows < 1 or self.cols < 1:
            raise FeatureError(f"Block grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.kind is not FeatureKind.RAW and self.n_bins < 2:
            raise FeatureError(f"Histogram features need n_bins >= 2, got {self.n_bins}")
        if self.kind is FeatureKind.BGH and self.n_bins > 256:
            raise FeatureError(f"BGH supports at most 256 bins, got {self.n_bins}")
        if not 0.0 < self.scale <= 1.0:
            raise FeatureError(f"RAW scale must lie in (0, 1], got {self.scale}")

    @classmethod
    def bhog(cls, rows: int = 11, cols: int = 11, n_bins: int = DEFAULT_BHOG_BINS) -> "FeatureSpec":
        return cls(FeatureKind.BHOG, rows=rows, cols=cols, n_bins=n_bins)

    @classmethod
    def bgh(cls, rows: int = 10, cols: int = 10, n_bins: int = DEFAULT_BGH_BINS) -> "FeatureSpec":
        return cls(FeatureKind.BGH, rows=rows, cols=cols, n_bins=n_bins)

    @classmethod
    def raw(cls, scale: float = 0.6) -> "FeatureSpec":
        return cls(FeatureKind.RAW, scale=scale)

    @property
    def label(self) -> str:
        if self.kind is FeatureKind.RAW:
            return f"raw-{self.scale:g}"
        return f"{self.kind.value}-{self.rows}x{self.cols}x{self.n_bins}"

    def raw_shape(self, height: int, width: int) -> tuple[int, int]:
        """Target (m, n) = (floor(scale * H), floor(scale * W))."""
        # epsilon guards products such as 0.6 * 150 landing just below an integer
        return (
            math.floor(self.scale * height + 1e-9),
            math.floor(self.scale * width + 1e-9),
        )

    def dim(self, height: int, width: int) -> int:
        """Length of the feature vector this spec produces for an image size."""
        if self.kind is FeatureKind.RAW:
            m, n = self.raw_shape(height, width)
            return m * n
        return self.rows * self.cols * self.n_bins

    def to_dict(self) -> dict:
        if self.kind is FeatureKind.RAW:
            return {"kind": self.kind.value, "scale": self.scale}
        return {"kind": self.kind.value, "rows": self.rows, "cols": self.cols, "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSpec":
        allowed = {"kind", "rows", "cols", "n_bins", "scale"}
        unknown = set(data) - allowed
        if unknown:
            raise FeatureError(f"Unknown feature spec keys: {', '.join(sorted(unknown))}")
        if "kind" not in data:
            raise FeatureError("Feature spec needs a 'kind'")
        kind = FeatureKind(data["kind"])
        defaults = {
            FeatureKind.BHOG: {"rows": 11, "cols": 11, "n_bins": DEFAULT_BHOG_BINS},
            FeatureKind.BGH: {"rows": 10, "cols": 10, "n_bins": DEFAULT_BGH_BINS},
            FeatureKind.RAW: {"scale": 0.6},
        }[kind]
        merged = {**defaults, **{k: v for k, v in data.items() if k != "kind"}}
        return cls(kind, **merged)


def default_feature_grid() -> list[FeatureSpec]:
    """Square BHoG and BGH block grids plus a RAW scale list, for the feature sweep."""
    return [
        *(FeatureSpec.bhog(n, n) for n in (5, 7, 9, 11, 13)),
        *(FeatureSpec.bgh(n, n) for n in (6, 8, 10, 12, 14)),
        *(FeatureSpec.raw(s) for s in (0.2, 0.4, 0.6, 0.8, 1.0)),
    ]


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Flat real-valued output of one extractor."""

    values: np.ndarray
    spec: FeatureSpec

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True, eq=False)
class HistogramLUT:
    """256-entry map from 8-bit gray level to histogram bin index."""

    n_bins: int
    table: np.ndarray


def sobel_gradients(img: Image) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses with replicate-edge borders; output has the image's size."""
    if img.height < 3 or img.width < 3:
        raise FeatureError(f"Sobel needs at least a 3x3 image, got {img.width}x{img.height}")
    data = np.asarray(img.data, dtype=np.float64)
    # separable form: the difference is taken first, so flat regions are exactly 0
    gx = ndimage.sobel(data, axis=1, mode="nearest")
    gy = ndimage.sobel(data, axis=0, mode="nearest")
    return gx, gy


def gradient_polar(gx: np.ndarray, gy: np.ndarray) -> GradientField:
    """Magnitude sqrt(gx^2 + gy^2) and full-circle orientation in [0, 2*pi)."""
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise FeatureError(f"Gradient rasters differ in size: {gx.shape} vs {gy.shape}")
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx)
    orientation = np.where(orientation < 0.0, orientation + TWO_PI, orientation)
    # -tiny + 2*pi rounds to 2*pi; keep the half-open range
    orientation = np.minimum(orientation, np.nextafter(TWO_PI, 0.0))
    return GradientField(gx=gx, gy=gy, magnitude=magnitude, orientation=orientation)


def block_edges(length: int, parts: int) -> np.ndarray:
    """Block boundaries: parts blocks of floor(length / parts), last absorbs the rest."""
    size = length // parts
    edges = np.arange(parts + 1) * size
    edges[-1] = length
    return edges


def _block_index(height: int, width: int, rows: int, cols: int) -> np.ndarray:
    """Row-major block number of every pixel."""
    if rows > height or cols > width:
        raise FeatureError(f"Block grid {rows}x{cols} larger than image {width}x{height}")
    row_of = np.repeat(np.arange(rows), np.diff(block_edges(height, rows)))
    col_of = np.repeat(np.arange(cols), np.diff(block_edges(width, cols)))
    return row_of[:, None] * cols + col_of[None, :]


def _blocked_histogram(
    bins: np.ndarray, weights: np.ndarray | None, rows: int, cols: int, n_bins: int
) -> np.ndarray:
    height, width = bins.shape
    flat = _block_index(height, width, rows, cols) * n_bins + bins
    counts = np.bincount(
        flat.ravel(),
        weights=None if weights is None else weights.ravel(),
        minlength=rows * cols * n_bins,
    )
    return counts.astype(np.float64)


def _require_kind(spec: FeatureSpec, kind: FeatureKind) -> None:
    if spec.kind is not kind:
        raise FeatureError(f"Expected a {kind.value} spec, got {spec.kind.value}")


def orientation_bins(orientation: np.ndarray, n_bins: int) -> np.ndarray:
    """floor(theta / (2*pi / n_bins)), clamped to n_bins - 1."""
    delta = TWO_PI / n_bins
    return np.minimum((orientation / delta).astype(np.int64), n_bins - 1)


def bhog(img: Image, spec: FeatureSpec) -> FeatureVector:
    """Blocked histogram of gradient: per-block orientation bins weighted by magnitude."""
    _require_kind(spec, FeatureKind.BHOG)
    field = gradient_polar(*sobel_gradients(img))
    bins = orientation_bins(field.orientation, spec.n_bins)
    values = _blocked_histogram(bins, field.magnitude, spec.rows, spec.cols, spec.n_bins)
    return FeatureVector(values, spec)


@functools.lru_cache(maxsize=None)
def build_lut(n_bins: int) -> HistogramLUT:
    """Gray level -> bin table, table[v] = floor(v * n_bins / 256)."""
    if not 2 <= n_bins <= 256:
        raise FeatureError(f"LUT needs 2 <= n_bins <= 256, got {n_bins}")
    table = (np.arange(256, dtype=np.int64) * n_bins) // 256
    table.setflags(write=False)
    return HistogramLUT(n_bins=n_bins, table=table)


def bgh(img: Image, spec: FeatureSpec, lut: HistogramLUT | None = None) -> FeatureVector:
    """Blocked gray histogram using the lookup table."""
    _require_kind(spec, FeatureKind.BGH)
    lut = lut if lut is not None else build_lut(spec.n_bins)
    if lut.n_bins != spec.n_bins:
        raise FeatureError(f"LUT has {lut.n_bins} bins, spec wants {spec.n_bins}")
    bins = lut.table[quantize_8bit(img.data)]
    return FeatureVector(_blocked_histogram(bins, None, spec.rows, spec.cols, spec.n_bins), spec)


def bgh_direct(img: Image, spec: FeatureSpec) -> FeatureVector:
    """Blocked gray histogram by direct division and one-hot accumulation.

    Slow reference path; bgh() must agree with it exactly.
    """
    _require_kind(spec, FeatureKind.BGH)
    gray = quantize_8bit(img.data).astype(np.float64)
    delta = 256.0 / spec.n_bins
    bins = np.floor(gray / delta).astype(np.int64)
    block = _block_index(img.height, img.width, spec.rows, spec.cols)
    values = np.zeros((spec.rows * spec.cols, spec.n_bins))
    # each pixel adds its one-hot indicator row to its block
    np.add.at(values, (block.ravel(), bins.ravel()), 1.0)
    return FeatureVector(values.ravel(), spec)


def raw_feature(img: Image, spec: FeatureSpec) -> FeatureVector:
    """Area-average downsample to floor(scale * H) x floor(scale * W), flattened row-major."""
    _require_kind(spec, FeatureKind.RAW)
    m, n = spec.raw_shape(img.height, img.width)
    if m < 1 or n < 1:
        raise FeatureError(f"RAW scale {spec.scale} gives an empty {m}x{n} target")
    row_edges = (np.arange(m + 1) * img.height) // m
    col_edges = (np.arange(n + 1) * img.width) // n
    sums = np.add.reduceat(np.add.reduceat(img.data, row_edges[:-1], axis=0), col_edges[:-1], axis=1)
    counts = np.outer(np.diff(row_edges), np.diff(col_edges))
    return FeatureVector((sums / counts).ravel(), spec)


def extract(img: Image, spec: FeatureSpec) -> FeatureVector:
    """Dispatch to the extractor named by spec.kind."""
    if spec.kind is FeatureKind.BHOG:
        return bhog(img, spec)
    if spec.kind is FeatureKind.BGH:
        return bgh(img, spec, build_lut(spec.n_bins))
    return raw_feature(img, spec)


def extract_batch(images: Sequence[Image], spec: FeatureSpec, workers: int = 1) -> np.ndarray:
    """Extract one spec from many images into an (n_images, dim) matrix."""
    if not images:
        raise FeatureError("No images to extract features from")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda im: extract(im, spec).values, images))
    else:
        rows = [extract(im, spec).values for im in images]
    return np.stack(rows)


def write_feature_csv(path: Path, vectors: Iterable[FeatureVector]) -> int:
    """Write one CSV row per vector (spec label, then values). Returns rows written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for vector in vectors:
            writer.writerow([vector.spec.label, *(repr(float(v)) for v in vector.values)])
            count += 1
    logger.debug(f"Wrote {count} feature rows to {path}")
    return count
