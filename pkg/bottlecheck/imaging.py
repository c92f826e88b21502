"""Image representation, background-difference soft trigger and gray-mean normalization."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

logger = logging.getLogger(__name__)


class ImagingError(ValueError):
    """Raised when an image operation receives invalid input."""

    pass


class DegenerateFrameError(ImagingError):
    """Raised for frames that cannot be normalized (zero total intensity)."""

    pass


class PGMFormatError(ImagingError):
    """Raised when a file is not an 8-bit binary PGM."""

    pass


def quantize_8bit(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to 8-bit gray levels with round(v * 255)."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel gray raster, row-major, intensities in [0, 1].

    The pixel array is copied on construction and made read-only.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ImagingError(f"Image data must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ImagingError("Image data contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ImagingError(
                f"Image intensities must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_uint8(cls, pixels: np.ndarray) -> "Image":
        """Build an image from 8-bit gray levels (b -> b / 255)."""
        return cls(np.asarray(pixels, dtype=np.float64) / 255.0)

    @classmethod
    def filled(cls, height: int, width: int, value: float) -> "Image":
        return cls(np.full((height, width), value, dtype=np.float64))

    def to_uint8(self) -> np.ndarray:
        return quantize_8bit(self.data)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Patch:
    """Axis-aligned rectangle: top-left (x, y), size w x h in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise ImagingError(f"Patch origin must be non-negative: {self}")
        if self.w < 1 or self.h < 1:
            raise ImagingError(f"Patch must cover at least one pixel: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def slices(self) -> tuple[slice, slice]:
        """Row and column slices selecting this patch from a (height, width) array."""
        return (slice(self.y, self.y + self.h), slice(self.x, self.x + self.w))

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "Patch":
        if len(values) != 4:
            raise ImagingError(f"Patch needs [x, y, w, h], got {list(values)}")
        x, y, w, h = (int(v) for v in values)
        return cls(x, y, w, h)


# Geometry of the prototype machine: ROI and the three difference regions at the
# bottom of the bottle.
DEFAULT_ROI = Patch(405, 39, 150, 356)
DEFAULT_DIFFERENCE_PATCHES = (
    Patch(430, 320, 26, 30),
    Patch(460, 320, 26, 30),
    Patch(490, 320, 26, 30),
)
# 15% mean absolute deviation per patch pixel
DEFAULT_THETA_FRACTION = 0.15
DEFAULT_BACKGROUND_FRAMES = 20


@dataclass(frozen=True)
class TriggerConfig:
    """Difference patches, energy threshold and background frame count."""

    patches: tuple[Patch, ...]
    theta_thres: float
    n_background_frames: int = DEFAULT_BACKGROUND_FRAMES

    def __post_init__(self) -> None:
        object.__setattr__(self, "patches", tuple(self.patches))
        if not self.patches:
            raise ImagingError("TriggerConfig needs at least one patch")
        if not np.isfinite(self.theta_thres) or self.theta_thres < 0:
            raise ImagingError(f"theta_thres must be >= 0, got {self.theta_thres}")
        if self.n_background_frames < 1:
            raise ImagingError(
                f"n_background_frames must be >= 1, got {self.n_background_frames}"
            )


def default_trigger_config() -> TriggerConfig:
    """Trigger over the default difference patches with theta = 0.15 * w * h."""
    first = DEFAULT_DIFFERENCE_PATCHES[0]
    return TriggerConfig(
        patches=DEFAULT_DIFFERENCE_PATCHES,
        theta_thres=DEFAULT_THETA_FRACTION * first.area,
        n_background_frames=DEFAULT_BACKGROUND_FRAMES,
    )


@dataclass(frozen=True)
class TriggerState:
    """Last frame's presence bit."""

    prev: int = 0

    def __post_init__(self) -> None:
        if self.prev not in (0, 1):
            raise ImagingError(f"TriggerState.prev must be 0 or 1, got {self.prev}")


def _require_patch_inside(p: Patch, img: Image) -> None:
    if not p.fits(img.width, img.height):
        raise ImagingError(f"Patch {p} lies outside image of size {img.width}x{img.height}")


def _require_same_shape(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise ImagingError(f"Image dimensions differ: {a.shape} vs {b.shape}")


def mean_background(frames: Sequence[Image]) -> Image:
    """Per-pixel arithmetic mean of background frames."""
    if not frames:
        raise ImagingError("no frames")
    first = frames[0]
    for frame in frames[1:]:
        _require_same_shape(first, frame)
    stack = np.stack([frame.data for frame in frames])
    return Image(np.clip(stack.mean(axis=0), 0.0, 1.0))


def patch_energy(bg: Image, cur: Image, p: Patch) -> float:
    """Sum of absolute per-pixel differences over one patch."""
    _require_same_shape(bg, cur)
    _require_patch_inside(p, bg)
    rows, cols = p.slices
    return float(np.abs(bg.data[rows, cols] - cur.data[rows, cols]).sum())


def bottle_present(bg: Image, cur: Image, cfg: TriggerConfig) -> int:
    """Return 1 iff every patch energy strictly exceeds theta_thres, else 0."""
    for p in cfg.patches:
        if patch_energy(bg, cur, p) <= cfg.theta_thres:
            return 0
    return 1


def trigger_edge(state: TriggerState, s_b: int) -> tuple[TriggerState, bool]:
    """Fire only on a 0 -> 1 transition of the presence bit."""
    if s_b not in (0, 1):
        raise ImagingError(f"Presence bit must be 0 or 1, got {s_b}")
    fire = state.prev == 0 and s_b == 1
    return TriggerState(prev=s_b), fire


class SoftTrigger:
    """Stateful soft switch over a frame stream.

    Owns the mean background and the previous presence bit; frames must be fed
    in capture order.
    """

    def __init__(self, background: Image, config: TriggerConfig):
        for p in config.patches:
            _require_patch_inside(p, background)
        self.background = background
        self.config = config
        self._state = TriggerState()

    @classmethod
    def from_frames(cls, frames: Sequence[Image], config: TriggerConfig) -> "SoftTrigger":
        """Build the background from the first n_background_frames frames."""
        lead = list(frames[: config.n_background_frames])
        if len(lead) < config.n_background_frames:
            raise ImagingError(
                f"Need {config.n_background_frames} background frames, got {len(lead)}"
            )
        return cls(mean_background(lead), config)

    @property
    def state(self) -> TriggerState:
        return self._state

    def feed(self, frame: Image) -> tuple[int, bool]:
        """Process one frame; return (presence bit, fire)."""
        s_b = bottle_present(self.background, frame, self.config)
        self._state, fire = trigger_edge(self._state, s_b)
        return s_b, fire

    def reset(self) -> None:
        self._state = TriggerState()


def gray_mean_scale(img: Image, lambda_avg: float = 0.5) -> float:
    """Return the factor lambda_avg * N / sum(I) that fixes the mean intensity."""
    if not 0.0 < lambda_avg < 1.0:
        raise ImagingError(f"lambda_avg must lie in (0, 1), got {lambda_avg}")
    total = float(img.data.sum())
    if total <= 0.0:
        raise DegenerateFrameError("degenerate frame")
    return lambda_avg * img.data.size / total


def normalize_gray_mean(img: Image, lambda_avg: float = 0.5) -> Image:
    """Scale intensities so their mean becomes lambda_avg, then clamp to [0, 1]."""
    scale = gray_mean_scale(img, lambda_avg)
    return Image(np.clip(img.data * scale, 0.0, 1.0))


def crop_roi(img: Image, p: Patch) -> Image:
    """Copy of the sub-image covered by p."""
    _require_patch_inside(p, img)
    rows, cols = p.slices
    return Image(img.data[rows, cols])


def read_pgm(path: Path) -> Image:
    """Read an 8-bit binary (P5) PGM file; byte b maps to b / 255."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic != b"P5":
        raise PGMFormatError(f"{path} is not a binary PGM (magic {magic!r})")
    try:
        with PILImage.open(path) as pil:
            if pil.mode != "L":
                raise PGMFormatError(f"{path} is not an 8-bit PGM (mode {pil.mode})")
            pixels = np.asarray(pil, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise PGMFormatError(f"Failed to read {path}: {e}") from e
    return Image.from_uint8(pixels)


def write_pgm(img: Image | np.ndarray, path: Path) -> None:
    """Write an image as 8-bit binary PGM (v -> round(v * 255)).

    A uint8 array is written as-is.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = img.to_uint8() if isinstance(img, Image) else np.asarray(img, dtype=np.uint8)
    PILImage.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    logger.debug(f"Wrote {pixels.shape[1]}x{pixels.shape[0]} PGM to {path}")
