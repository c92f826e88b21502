"""Deterministic synthetic backlit bottle frames, datasets and conveyor streams.

Every output is a pure function of (SceneSpec, seed). Geometry, defect kind,
defect shape and sensor noise use separate derived generators, so rendering the
same seed with kind "none" gives the defect-free twin of a defective frame.
"""

import json
import logging
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from bottlecheck.dataset import (
    DEFECTIVE,
    QUALIFIED,
    DatasetItem,
    LabeledDataset,
    relabel,
)
from bottlecheck.imaging import DEFAULT_ROI, Image, Patch, crop_roi, read_pgm, write_pgm
from bottlecheck.seeds import derive_seed, make_rng

logger = logging.getLogger(__name__)

DEFECT_KINDS = ("crack", "fragment", "deform", "stain", "impurity")
ALL_KINDS = (*DEFECT_KINDS, "none")
STREAM_META = "stream.json"


class SceneError(ValueError):
    """Raised for invalid scene or generator parameters."""

    pass


def _default_mix() -> dict[str, float]:
    return {"none": 0.5, **{kind: 0.1 for kind in DEFECT_KINDS}}


@dataclass(frozen=True)
class SceneSpec:
    """Camera frame, ROI and bottle geometry in pixels; intensities in [0, 1]."""

    frame_w: int = 752
    frame_h: int = 480
    roi: Patch = DEFAULT_ROI
    center_x: int = 480
    body_width: int = 110
    neck_width: int = 40
    neck_top: int = 60
    shoulder_top: int = 130
    body_top: int = 170
    body_bottom: int = 390
    wall_thickness: int = 6
    rim_height: int = 5
    liquid_top: int = 250
    backlight: float = 0.7
    glass_level: float = 0.30
    wall_level: float = 0.15
    liquid_level: float = 0.22
    position_jitter: int = 1
    liquid_jitter: int = 3
    illumination_drift: tuple[float, float] = (0.85, 1.15)
    noise_sigma: float = 0.02
    defect_mix: Mapping[str, float] = field(default_factory=_default_mix)

    def __post_init__(self) -> None:
        object.__setattr__(self, "illumination_drift", tuple(self.illumination_drift))
        object.__setattr__(self, "defect_mix", dict(self.defect_mix))
        if not self.roi.fits(self.frame_w, self.frame_h):
            raise SceneError(f"ROI {self.roi} lies outside the {self.frame_w}x{self.frame_h} frame")
        unknown = set(self.defect_mix) - set(ALL_KINDS)
        if unknown:
            raise SceneError(f"Unknown defect kinds: {', '.join(sorted(unknown))}")
        if any(p < 0 for p in self.defect_mix.values()):
            raise SceneError("Defect probabilities must be non-negative")
        if abs(sum(self.defect_mix.values()) - 1.0) > 1e-9:
            raise SceneError(f"Defect probabilities must sum to 1, got {sum(self.defect_mix.values())}")
        lo, hi = self.illumination_drift
        if not 0 < lo <= hi:
            raise SceneError(f"Invalid illumination drift range {self.illumination_drift}")
        if self.noise_sigma < 0:
            raise SceneError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("backlight", "glass_level", "wall_level", "liquid_level"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SceneError(f"{name} must lie in [0, 1]")
        if not (self.neck_top < self.shoulder_top <= self.body_top < self.liquid_top < self.body_bottom):
            raise SceneError("Bottle rows must satisfy neck_top < shoulder_top <= body_top < liquid_top < body_bottom")
        if not 0 < self.neck_width <= self.body_width or 2 * self.wall_thickness >= self.neck_width:
            raise SceneError("Bottle widths must satisfy 2 * wall < neck_width <= body_width")
        half = self.body_width / 2 + self.position_jitter
        r = self.roi
        if self.center_x - half < r.x or self.center_x + half > r.x + r.w:
            raise SceneError("Bottle body (with jitter) does not fit the ROI horizontally")
        if self.neck_top < r.y or self.body_bottom >= r.y + r.h:
            raise SceneError("Bottle does not fit the ROI vertically")

    @property
    def defect_kinds(self) -> list[str]:
        """Defect kinds with non-zero probability."""
        return [k for k in DEFECT_KINDS if self.defect_mix.get(k, 0.0) > 0]

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["roi"] = self.roi.to_list()
        data["illumination_drift"] = list(self.illumination_drift)
        data["defect_mix"] = dict(self.defect_mix)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SceneSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise SceneError(f"Unknown scene keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "roi" in values:
            values["roi"] = Patch.from_list(values["roi"])
        if "illumination_drift" in values:
            values["illumination_drift"] = tuple(values["illumination_drift"])
        return cls(**values)


@dataclass(frozen=True, eq=False)
class Frame:
    """A full camera frame with its ground truth."""

    image: Image
    label: int
    defect_kind: str
    defect_box: Patch | None = None


# --- rendering ------------------------------------------------------------------


def _half_widths(spec: SceneSpec) -> np.ndarray:
    """Per-row bottle half width; NaN on rows without glass."""
    ys = np.arange(spec.frame_h)
    hw = np.full(spec.frame_h, np.nan)
    hw[(ys >= spec.neck_top) & (ys < spec.shoulder_top)] = spec.neck_width / 2
    shoulder = (ys >= spec.shoulder_top) & (ys < spec.body_top)
    t = (ys[shoulder] - spec.shoulder_top) / max(spec.body_top - spec.shoulder_top, 1)
    hw[shoulder] = spec.neck_width / 2 + t * (spec.body_width - spec.neck_width) / 2
    hw[(ys >= spec.body_top) & (ys <= spec.body_bottom)] = spec.body_width / 2
    return hw


@dataclass
class _Geometry:
    left: np.ndarray
    right: np.ndarray
    liquid_top: int


def _geometry(spec: SceneSpec, rng: np.random.Generator, offset: float) -> _Geometry:
    j = spec.position_jitter
    cx = spec.center_x + offset + (rng.integers(-j, j + 1) if j else 0)
    lj = spec.liquid_jitter
    liquid_top = spec.liquid_top + (int(rng.integers(-lj, lj + 1)) if lj else 0)
    hw = _half_widths(spec)
    return _Geometry(cx - hw, cx + hw, liquid_top)


def _masks(spec: SceneSpec, g: _Geometry) -> tuple[np.ndarray, np.ndarray]:
    """(glass, interior) boolean masks for a geometry."""
    xs = np.arange(spec.frame_w)[None, :] + 0.5
    ys = np.arange(spec.frame_h)[:, None]
    left = g.left[:, None]
    right = g.right[:, None]
    with np.errstate(invalid="ignore"):
        glass = (xs >= left) & (xs <= right)
        w = spec.wall_thickness
        interior = (
            (xs >= left + w)
            & (xs <= right - w)
            & (ys >= spec.neck_top + spec.rim_height)
            & (ys <= spec.body_bottom - w)
        )
    return glass, interior


def _paint(spec: SceneSpec, g: _Geometry) -> np.ndarray:
    glass, interior = _masks(spec, g)
    ys = np.arange(spec.frame_h)[:, None]
    data = np.full((spec.frame_h, spec.frame_w), spec.backlight)
    data[glass] = spec.wall_level
    data[interior] = spec.glass_level
    data[interior & (ys >= g.liquid_top)] = spec.liquid_level
    return data


def _draw_mask(spec: SceneSpec, draw: Any) -> np.ndarray:
    canvas = PILImage.new("L", (spec.frame_w, spec.frame_h), 0)
    draw(ImageDraw.Draw(canvas))
    return np.asarray(canvas) > 0


def _body_point(spec: SceneSpec, g: _Geometry, rng: np.random.Generator, y_lo: int, y_hi: int, margin: float) -> tuple[float, float]:
    y = int(rng.integers(y_lo, y_hi))
    x = rng.uniform(g.left[y] + margin, g.right[y] - margin)
    return float(x), float(y)


def _apply_defect(
    spec: SceneSpec, g: _Geometry, data: np.ndarray, kind: str, rng: np.random.Generator
) -> np.ndarray:
    """Return the defective rendering; data is the clean one and is not modified."""
    glass, interior = _masks(spec, g)
    out = data.copy()
    w = spec.wall_thickness
    if kind == "crack":
        # runs down the inner face of one wall
        length = int(rng.integers(40, 81))
        y = int(rng.integers(spec.body_top + 10, spec.body_bottom - w - length))
        on_left = rng.random() < 0.5
        edge = g.left if on_left else g.right
        inset = w if on_left else -w
        points = []
        for yy in range(y, y + length + 1, 8):
            x = edge[yy] + inset + rng.uniform(-1.5, 1.5)
            points.append((float(x), float(yy)))
        mask = _draw_mask(spec, lambda d: d.line(points, fill=255, width=3)) & glass
        out[mask] = 0.02
    elif kind == "fragment":
        y = spec.neck_top
        x = g.left[y] if rng.random() < 0.5 else g.right[y]
        rx, ry = rng.uniform(10, 14), rng.uniform(16, 24)
        mask = _draw_mask(spec, lambda d: d.ellipse([x - rx, y - ry, x + rx, y + ry], fill=255)) & glass
        out[mask] = spec.backlight
    elif kind == "deform":
        length = int(rng.integers(40, 71))
        y0 = int(rng.integers(spec.body_top + 5, spec.body_bottom - length - 5))
        amp = rng.uniform(10, 14) * (1 if rng.random() < 0.5 else -1)
        bump = amp * np.sin(np.pi * np.arange(length) / length)
        right = g.right.copy()
        right[y0 : y0 + length] += bump
        out = _paint(spec, _Geometry(g.left, right, g.liquid_top))
    elif kind == "stain":
        x, y = _body_point(spec, g, rng, spec.body_top + 30, spec.body_bottom - 30, w + 20)
        rx, ry = rng.uniform(20, 28), rng.uniform(20, 28)
        mask = _draw_mask(spec, lambda d: d.ellipse([x - rx, y - ry, x + rx, y + ry], fill=255)) & interior
        out[mask] = np.maximum(out[mask] - 0.14, 0.0)
    elif kind == "impurity":
        # sediment: settles on the bottom of the liquid
        r = rng.uniform(3, 5)
        y = spec.body_bottom - w - r - rng.uniform(0, 2)
        x = rng.uniform(g.left[int(y)] + w + r, g.right[int(y)] - w - r)
        mask = _draw_mask(spec, lambda d: d.ellipse([x - r, y - r, x + r, y + r], fill=255)) & interior
        out[mask] = 0.02
    else:
        raise SceneError(f"Unknown defect kind: {kind!r}")
    return out


def _bounding_patch(mask: np.ndarray) -> Patch | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Patch(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def _finish(spec: SceneSpec, data: np.ndarray, rng: np.random.Generator) -> Image:
    """Global illumination factor and sensor noise, then clamp."""
    lo, hi = spec.illumination_drift
    drift = rng.uniform(lo, hi)
    noise = rng.normal(0.0, spec.noise_sigma, data.shape) if spec.noise_sigma > 0 else 0.0
    return Image(np.clip(data * drift + noise, 0.0, 1.0))


def render_frame(
    spec: SceneSpec,
    seed: int,
    defect_kind: str = "none",
    offset: float = 0.0,
    noise_seed: int | None = None,
) -> Frame:
    """Render one frame with an explicit defect kind and horizontal offset.

    Geometry and defect shape derive from seed; noise and drift from noise_seed
    (default: seed).
    """
    if defect_kind not in ALL_KINDS:
        raise SceneError(f"Unknown defect kind: {defect_kind!r}")
    g = _geometry(spec, make_rng(seed, "geometry"), offset)
    clean = _paint(spec, g)
    box = None
    data = clean
    if defect_kind != "none":
        data = _apply_defect(spec, g, clean, defect_kind, make_rng(seed, "defect", defect_kind))
        box = _bounding_patch(data != clean)
    noise_rng = make_rng(seed if noise_seed is None else noise_seed, "noise")
    label = QUALIFIED if defect_kind == "none" else DEFECTIVE
    return Frame(_finish(spec, data, noise_rng), label, defect_kind, box)


def render_background(spec: SceneSpec, seed: int) -> Image:
    """Empty backlit frame with drift and noise."""
    data = np.full((spec.frame_h, spec.frame_w), spec.backlight)
    return _finish(spec, data, make_rng(seed, "noise"))


def _draw_kind(mix: Mapping[str, float], rng: np.random.Generator) -> str:
    kinds = sorted(mix)
    probs = np.array([mix[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]


def gen_frame(spec: SceneSpec, seed: int) -> tuple[Image, int, str]:
    """Full frame with a defect kind drawn from spec.defect_mix."""
    kind = _draw_kind(spec.defect_mix, make_rng(seed, "kind"))
    frame = render_frame(spec, seed, kind)
    return frame.image, frame.label, frame.defect_kind


# --- datasets -------------------------------------------------------------------


def gen_dataset(
    spec: SceneSpec,
    n: int,
    defective_fraction: float,
    seed: int,
    lambda_avg: float = 0.5,
    workers: int = 1,
) -> LabeledDataset:
    """n ROI crops of which round(defective_fraction * n) are defective.

    Defect kinds of defective items follow spec.defect_mix restricted to defects.
    """
    if n < 2:
        raise SceneError(f"Dataset needs at least 2 items, got {n}")
    if not 0.0 <= defective_fraction <= 1.0:
        raise SceneError(f"defective_fraction must lie in [0, 1], got {defective_fraction}")
    n_defective = math.floor(defective_fraction * n + 0.5)
    defect_mix = {k: spec.defect_mix[k] for k in spec.defect_kinds}
    if n_defective and not defect_mix:
        raise SceneError("Requested defective items but defect_mix has no defect kinds")

    rng = make_rng(seed, "dataset")
    defective = set(rng.permutation(n)[:n_defective].tolist())
    kinds = [
        _draw_kind(defect_mix, make_rng(seed, "item", i, "kind")) if i in defective else "none"
        for i in range(n)
    ]

    def render(i: int) -> np.ndarray:
        frame = render_frame(spec, derive_seed(seed, "item", i), kinds[i])
        return crop_roi(frame.image, spec.roi).to_uint8()

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pixels = list(pool.map(render, range(n)))
    items = [
        DatasetItem(
            path=f"img_{i:05d}.pgm",
            label=DEFECTIVE if kinds[i] != "none" else QUALIFIED,
            defect_kind=kinds[i],
        )
        for i in range(n)
    ]
    logger.info(f"Generated {n} items ({n_defective} defective) with seed {seed}")
    return LabeledDataset(items, pixels, lambda_avg=lambda_avg, workers=workers)


def inject_label_noise(d: LabeledDataset, ratio: float, seed: int) -> LabeledDataset:
    """Flip exactly floor(ratio * n) labels chosen without replacement.

    Returns a new dataset sharing d's images; d itself is untouched. Applying the
    same (ratio, seed) twice restores the original labels.
    """
    if not 0.0 <= ratio <= 1.0:
        raise SceneError(f"Noise ratio must lie in [0, 1], got {ratio}")
    n = len(d)
    k = math.floor(ratio * n + 1e-9)
    flipped = set(make_rng(seed, "label-noise").choice(n, size=k, replace=False).tolist())
    logger.debug(f"Flipping {k} of {n} labels")
    return d.with_items([relabel(item, i in flipped) for i, item in enumerate(d.items)])


# --- conveyor streams -----------------------------------------------------------


@dataclass(frozen=True)
class ScheduleEntry:
    """One stream frame: background (bottle None) or a bottle at an x offset."""

    bottle: int | None = None
    offset: float = 0.0
    centered: bool = False


@dataclass(frozen=True, eq=False)
class Stream:
    frames: list[Image]
    presence: list[int]
    schedule: list[ScheduleEntry]
    bottle_labels: list[int]
    bottle_kinds: list[str]


PARTIAL_OFFSETS = (-100.0, -60.0)


def conveyor_schedule(
    n_frames: int,
    n_bottles: int,
    seed: int,
    crossing_frames: int = 12,
    leading_background: int = 20,
    jitter: int = 3,
) -> list[ScheduleEntry]:
    """Evenly spaced crossings after a background lead-in.

    A crossing enters with two partial frames, stays centered (with jitter) and
    leaves with two partial frames.
    """
    if crossing_frames < len(PARTIAL_OFFSETS) * 2 + 1:
        raise SceneError(f"crossing_frames must be >= 5, got {crossing_frames}")
    if n_bottles < 0 or leading_background < 0:
        raise SceneError("n_bottles and leading_background must be non-negative")
    available = n_frames - leading_background
    if n_bottles * crossing_frames > available:
        raise SceneError(
            f"{n_bottles} crossings of {crossing_frames} frames do not fit in {available} frames"
        )
    schedule = [ScheduleEntry() for _ in range(n_frames)]
    if n_bottles == 0:
        return schedule
    rng = make_rng(seed, "schedule")
    gap = (available - n_bottles * crossing_frames) // n_bottles
    n_centered = crossing_frames - 2 * len(PARTIAL_OFFSETS)
    for b in range(n_bottles):
        start = leading_background + b * (crossing_frames + gap) + gap // 2
        offsets = [
            *PARTIAL_OFFSETS,
            *(float(rng.integers(-jitter, jitter + 1)) if jitter else 0.0 for _ in range(n_centered)),
            *(-o for o in reversed(PARTIAL_OFFSETS)),
        ]
        for k, offset in enumerate(offsets):
            centered = len(PARTIAL_OFFSETS) <= k < len(PARTIAL_OFFSETS) + n_centered
            schedule[start + k] = ScheduleEntry(bottle=b, offset=offset, centered=centered)
    return schedule


def gen_stream(spec: SceneSpec, n_frames: int, schedule: Sequence[ScheduleEntry], seed: int) -> Stream:
    """Render a schedule; presence is 1 exactly on centered frames."""
    if len(schedule) != n_frames:
        raise SceneError(f"Schedule has {len(schedule)} entries for {n_frames} frames")
    n_bottles = 1 + max((e.bottle for e in schedule if e.bottle is not None), default=-1)
    kinds = [_draw_kind(spec.defect_mix, make_rng(seed, "bottle", b, "kind")) for b in range(n_bottles)]
    # centered frames carry no extra jitter: the schedule offset already has it
    centered_spec = replace(spec, position_jitter=0)
    frames = []
    for i, entry in enumerate(schedule):
        frame_seed = derive_seed(seed, "frame", i)
        if entry.bottle is None:
            frames.append(render_background(spec, frame_seed))
            continue
        bottle_seed = derive_seed(seed, "bottle", entry.bottle)
        frame = render_frame(
            centered_spec, bottle_seed, kinds[entry.bottle], entry.offset, noise_seed=frame_seed
        )
        frames.append(frame.image)
    presence = [1 if e.centered else 0 for e in schedule]
    labels = [QUALIFIED if k == "none" else DEFECTIVE for k in kinds]
    logger.info(f"Generated stream of {n_frames} frames with {n_bottles} bottles")
    return Stream(frames, presence, list(schedule), labels, kinds)


def write_stream(stream: Stream, directory: Path) -> Path:
    """PGM frames plus a JSON file with presence mask and bottle ground truth."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(stream.frames):
        name = f"frame_{i:05d}.pgm"
        write_pgm(frame, directory / name)
        names.append(name)
    meta = {
        "frames": names,
        "presence": stream.presence,
        "schedule": [asdict(e) for e in stream.schedule],
        "bottle_labels": stream.bottle_labels,
        "bottle_kinds": stream.bottle_kinds,
    }
    path = directory / STREAM_META
    path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_stream(directory: Path) -> Stream:
    directory = Path(directory)
    path = directory / STREAM_META
    if not path.exists():
        raise SceneError(f"No {STREAM_META} in {directory}")
    try:
        meta = json.loads(path.read_text())
        schedule = [ScheduleEntry(**e) for e in meta["schedule"]]
        frames = [read_pgm(directory / name) for name in meta["frames"]]
        return Stream(
            frames,
            [int(v) for v in meta["presence"]],
            schedule,
            [int(v) for v in meta["bottle_labels"]],
            [str(v) for v in meta["bottle_kinds"]],
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SceneError(f"Malformed stream metadata {path}: {e}") from e
