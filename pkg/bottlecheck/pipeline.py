"""Metrics, the inspection loop over a frame stream, and experiment sweeps.

Class convention: defective (label -1) is the positive class. A false positive
rejects a qualified bottle; a false negative lets a defective bottle pass.
"""

import csv
import json
import logging
import time
from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from bottlecheck.classifiers import ClassifierConfig, fit
from bottlecheck.config import PipelineConfig
from bottlecheck.dataset import DEFECTIVE, QUALIFIED, DatasetError, LabeledDataset
from bottlecheck.ensemble import (
    EnsembleBuildError,
    EnsembleModel,
    EnsembleParams,
    build_ensemble_with_diagnostics,
    member_votes,
    predict_dataset,
)
from bottlecheck.features import FeatureKind, FeatureSpec
from bottlecheck.imaging import (
    DegenerateFrameError,
    Image,
    SoftTrigger,
    crop_roi,
    normalize_gray_mean,
)
from bottlecheck.seeds import derive_seed, make_rng
from bottlecheck.synthgen import inject_label_noise

logger = logging.getLogger(__name__)

# Held-out fraction for the T and label-noise sweeps.
SWEEP_TEST_FRACTION = 0.3


@dataclass(frozen=True)
class Metrics:
    """Counts and rates; a rate is None when its class is absent."""

    n_total: int
    n_qualified: int
    n_defective: int
    n_fp: int
    n_fn: int
    fp_rate: float | None
    fn_rate: float | None
    error_rate: float
    precision: float
    misses_by_kind: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def compute_metrics(
    labels: np.ndarray, predictions: np.ndarray, kinds: Sequence[str] | None = None
) -> Metrics:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.size == 0:
        raise DatasetError("Cannot evaluate on an empty dataset")
    if labels.shape != predictions.shape:
        raise DatasetError(f"{labels.size} labels but {predictions.size} predictions")
    qualified = labels == QUALIFIED
    defective = labels == DEFECTIVE
    fp = qualified & (predictions == DEFECTIVE)
    fn = defective & (predictions == QUALIFIED)
    n_q, n_d = int(qualified.sum()), int(defective.sum())
    n_fp, n_fn = int(fp.sum()), int(fn.sum())
    error_rate = (n_fp + n_fn) / labels.size
    misses: Counter = Counter()
    if kinds is not None:
        for i in np.flatnonzero(fp | fn):
            misses[kinds[i]] += 1
    return Metrics(
        n_total=int(labels.size),
        n_qualified=n_q,
        n_defective=n_d,
        n_fp=n_fp,
        n_fn=n_fn,
        fp_rate=n_fp / n_q if n_q else None,
        fn_rate=n_fn / n_d if n_d else None,
        error_rate=error_rate,
        precision=1.0 - error_rate,
        misses_by_kind=dict(sorted(misses.items())),
    )


def evaluate(m: EnsembleModel, d: LabeledDataset) -> Metrics:
    """Score the ensemble against the manifest labels of d."""
    if len(d) == 0:
        raise DatasetError("Cannot evaluate on an empty dataset")
    predictions = predict_dataset(m, d)
    return compute_metrics(d.labels, predictions, [item.defect_kind for item in d.items])


# --- inspection loop ------------------------------------------------------------


@dataclass(frozen=True)
class InspectionEvent:
    """One fired trigger: a verdict with member votes, or a skip."""

    frame_index: int
    kind: str
    verdict: int | None = None
    votes: tuple[int, ...] = ()
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "votes": list(self.votes)}


def run_inspection(
    frames: Sequence[Image], bg: Image, model: EnsembleModel, cfg: PipelineConfig
) -> list[InspectionEvent]:
    """Classify the ROI of every frame on which the trigger fires."""
    trigger = SoftTrigger(bg, cfg.trigger)
    events: list[InspectionEvent] = []
    for i, frame in enumerate(frames):
        _, fire = trigger.feed(frame)
        if not fire:
            continue
        try:
            roi = normalize_gray_mean(crop_roi(frame, cfg.roi), model.lambda_avg)
        except DegenerateFrameError as e:
            logger.warning(f"Frame {i}: skipped ({e})")
            events.append(InspectionEvent(i, "skip", reason=str(e)))
            continue
        votes = member_votes(model, roi)
        verdict = 1 if int(votes.sum()) > 0 else -1
        events.append(InspectionEvent(i, "verdict", verdict, tuple(int(v) for v in votes)))
        logger.info(f"Frame {i}: {'qualified' if verdict == QUALIFIED else 'REJECT'}")
    return events


def write_events(path: Path, events: Sequence[InspectionEvent]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for event in events:
            f.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class TriggerReport:
    n_bottles: int
    n_fires: int
    n_matched: int
    n_missed: int
    n_spurious: int


def _runs(mask: Sequence[int]) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of 1s."""
    runs = []
    start = None
    for i, v in enumerate([*mask, 0]):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    return runs


def evaluate_trigger(fires: Sequence[int], presence: Sequence[int]) -> TriggerReport:
    """Match fire frame indices to ground-truth presence runs, one fire per run."""
    runs = _runs(presence)
    matched: set[int] = set()
    spurious = 0
    for f in fires:
        hit = next((r for r, (a, b) in enumerate(runs) if a <= f < b), None)
        if hit is None or hit in matched:
            spurious += 1
        else:
            matched.add(hit)
    return TriggerReport(len(runs), len(fires), len(matched), len(runs) - len(matched), spurious)


# --- sweeps ---------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSweepRow:
    kind: str
    rows: int
    cols: int
    n_bins: int
    scale: float
    family: str
    precision: float | None
    status: str
    seed: int


@dataclass(frozen=True)
class TSweepRow:
    T: int
    error_rate: float | None
    precision: float | None
    fp_rate: float | None
    fn_rate: float | None
    draws: int
    status: str
    seed: int


@dataclass(frozen=True)
class TTimingRow:
    T: int
    train_seconds: float
    time_ratio: float | None
    seed: int


@dataclass(frozen=True)
class NoiseSweepRow:
    ratio: float
    n_flipped: int
    precision: float | None
    error_rate: float | None
    fp_rate: float | None
    fn_rate: float | None
    status: str
    seed: int


def sweep_feature_params(
    d: LabeledDataset,
    grid: Sequence[FeatureSpec],
    classifiers: Sequence[ClassifierConfig],
    p: EnsembleParams,
) -> list[FeatureSweepRow]:
    """Held-out precision of one sub-classifier per (feature spec, family) cell.

    A failing cell is recorded with its error and the sweep continues.
    """
    if not grid or not classifiers:
        raise DatasetError("Feature sweep needs a non-empty grid and classifier list")
    train_idx, test_idx = d.split(p.alpha_train, p.alpha_test, make_rng(p.seed, "sweep-features"))
    y = d.labels
    rows = []
    for spec in grid:
        for cfg in classifiers:
            precision = None
            try:
                X = d.features(spec)
                model = fit(
                    cfg.with_seed(derive_seed(p.seed, "sweep-features", cfg.label, spec.label)),
                    X[train_idx],
                    y[train_idx],
                )
                precision = float(np.mean(model.predict_batch(X[test_idx]) == y[test_idx]))
                status = "ok"
            except ValueError as e:
                status = f"failed: {e}"
            logger.info(f"Feature sweep {spec.label} {cfg.label}: {status} precision={precision}")
            rows.append(
                FeatureSweepRow(
                    kind=spec.kind.value,
                    rows=spec.rows if spec.kind is not FeatureKind.RAW else 0,
                    cols=spec.cols if spec.kind is not FeatureKind.RAW else 0,
                    n_bins=spec.n_bins if spec.kind is not FeatureKind.RAW else 0,
                    scale=spec.scale if spec.kind is FeatureKind.RAW else 0.0,
                    family=cfg.label,
                    precision=precision,
                    status=status,
                    seed=p.seed,
                )
            )
    return rows


def _holdout(d: LabeledDataset, seed: int, label: str) -> tuple[LabeledDataset, LabeledDataset]:
    rng = make_rng(seed, label, "holdout")
    order = rng.permutation(len(d))
    n_test = max(1, int(round(SWEEP_TEST_FRACTION * len(d))))
    return d.subset(np.sort(order[n_test:])), d.subset(np.sort(order[:n_test]))


def sweep_t(
    d: LabeledDataset,
    Ts: Sequence[int],
    pool: Sequence[tuple[ClassifierConfig, FeatureSpec]],
    p: EnsembleParams,
) -> tuple[list[TSweepRow], list[TTimingRow]]:
    """Build and evaluate one ensemble per T on a fixed held-out split.

    Timing rows are returned separately so the main report stays reproducible.
    """
    if not Ts or any(T < 1 or T % 2 == 0 for T in Ts):
        raise DatasetError(f"T values must be positive odd integers, got {list(Ts)}")
    train, test = _holdout(d, p.seed, "sweep-t")
    rows, timings = [], []
    base_seconds = None
    for T in sorted(Ts):
        params = EnsembleParams(**{**asdict(p), "T": T})
        start = time.perf_counter()
        try:
            model, diag = build_ensemble_with_diagnostics(train, pool, params)
            seconds = time.perf_counter() - start
            metrics = evaluate(model, test)
            rows.append(
                TSweepRow(T, metrics.error_rate, metrics.precision, metrics.fp_rate,
                          metrics.fn_rate, diag.draws, "ok", p.seed)
            )
        except EnsembleBuildError as e:
            seconds = time.perf_counter() - start
            rows.append(TSweepRow(T, None, None, None, None, e.diagnostics.draws, f"failed: {e}", p.seed))
        if base_seconds is None:
            base_seconds = seconds
        ratio = seconds / base_seconds if base_seconds > 0 else None
        timings.append(TTimingRow(T, seconds, ratio, p.seed))
        logger.info(f"T sweep T={T}: {rows[-1].status} error={rows[-1].error_rate} ({seconds:.2f}s)")
    return rows, timings


def sweep_label_noise(
    d: LabeledDataset,
    ratios: Sequence[float],
    pool: Sequence[tuple[ClassifierConfig, FeatureSpec]],
    p: EnsembleParams,
) -> list[NoiseSweepRow]:
    """Corrupt labels of the training portion only, build, evaluate on clean held-out data."""
    if not ratios:
        raise DatasetError("Noise sweep needs at least one ratio")
    train, test = _holdout(d, p.seed, "sweep-noise")
    rows = []
    for ratio in ratios:
        noisy = inject_label_noise(train, ratio, derive_seed(p.seed, "sweep-noise", ratio))
        n_flipped = int(noisy.noise_mask.sum())
        try:
            model, _ = build_ensemble_with_diagnostics(noisy, pool, p)
            m = evaluate(model, test)
            row = NoiseSweepRow(ratio, n_flipped, m.precision, m.error_rate, m.fp_rate,
                                m.fn_rate, "ok", p.seed)
        except EnsembleBuildError as e:
            row = NoiseSweepRow(ratio, n_flipped, None, None, None, None, f"failed: {e}", p.seed)
        logger.info(f"Noise sweep ratio={ratio}: {row.status} precision={row.precision}")
        rows.append(row)
    return rows


def _format(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return value


def write_rows_csv(path: Path, rows: Sequence[Any]) -> int:
    """Write dataclass rows as CSV with a header; returns the row count."""
    if not rows:
        raise DatasetError("No rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(rows[0])]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for row in rows:
            writer.writerow([_format(getattr(row, name)) for name in names])
    return len(rows)
