"""Majority-vote ensembles of independent sub-classifiers.

Covers the vote itself, the binomial precision model for T equal-error voters,
the pairwise independence test (expected vs observed disagreement) and the
selection loop that assembles T members from a pool of (classifier, feature)
candidates.
"""

import csv
import json
import logging
import math
import pickle
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path

import joblib
import numpy as np

from bottlecheck.classifiers import (
    ClassifierConfig,
    DegenerateTrainingSetError,
    TrainedClassifier,
    fit,
)
from bottlecheck.dataset import LabeledDataset
from bottlecheck.features import FeatureSpec, extract
from bottlecheck.imaging import Image
from bottlecheck.seeds import derive_seed, make_rng

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
MIN_IT_SAMPLES = 200


class EnsembleError(ValueError):
    """Raised for invalid ensemble parameters or inputs."""

    pass


class RejectionReason(StrEnum):
    ERROR_TOO_LOW = "error-gate-low"
    ERROR_TOO_HIGH = "error-gate-high"
    DEGENERATE_SPLIT = "degenerate-split"
    IT_FAIL = "it-fail"


@dataclass(frozen=True, eq=False)
class SubClassifier:
    """A trained classifier, its feature extractor and held-out statistics."""

    model: TrainedClassifier
    feature: FeatureSpec
    delta_false: float
    p_correct: float
    p_wrong: float

    def __post_init__(self) -> None:
        for name in ("delta_false", "p_correct", "p_wrong"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise EnsembleError(f"{name} must lie in [0, 1], got {value}")
        if abs(self.p_correct + self.p_wrong - 1.0) > 1e-9:
            raise EnsembleError("p_correct + p_wrong must equal 1")
        if abs(self.delta_false - self.p_wrong) > 1e-9:
            raise EnsembleError("delta_false must equal p_wrong")

    @classmethod
    def from_error(
        cls, model: TrainedClassifier, feature: FeatureSpec, error: float
    ) -> "SubClassifier":
        return cls(model, feature, delta_false=error, p_correct=1.0 - error, p_wrong=error)

    @property
    def label(self) -> str:
        return f"{self.model.config.label}/{self.feature.label}"


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """T sub-classifiers combined by an unweighted majority vote; T is odd."""

    members: tuple[SubClassifier, ...]
    lambda_avg: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members or len(self.members) % 2 == 0:
            raise EnsembleError(f"Ensemble needs an odd number of members, got {len(self.members)}")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def features(self) -> list[FeatureSpec]:
        """Distinct feature specs in first-use order."""
        return list(dict.fromkeys(m.feature for m in self.members))


@dataclass(frozen=True)
class EnsembleParams:
    """Selection loop inputs."""

    T: int = 7
    theta_it: float = 0.05
    delta_low: float = 0.001
    delta_up: float = 0.5
    alpha_train: float = 0.6
    alpha_test: float = 0.4
    beta: float = 0.3
    n_max_pool: int = 100
    seed: int = 0
    min_it_samples: int = MIN_IT_SAMPLES
    it_from_held_out: bool = True

    def __post_init__(self) -> None:
        if self.T < 1 or self.T % 2 == 0:
            raise EnsembleError(f"T must be a positive odd integer, got {self.T}")
        if not self.theta_it > 0:
            raise EnsembleError(f"theta_it must be positive, got {self.theta_it}")
        if not 0.0 <= self.delta_low < self.delta_up <= 0.5:
            raise EnsembleError(
                f"Need 0 <= delta_low < delta_up <= 0.5, got {self.delta_low}, {self.delta_up}"
            )
        if not (0 < self.alpha_train < 1 and 0 < self.alpha_test < 1):
            raise EnsembleError("alpha_train and alpha_test must lie in (0, 1)")
        if self.alpha_train + self.alpha_test > 1 + 1e-12:
            raise EnsembleError("alpha_train + alpha_test must not exceed 1")
        if not 0 < self.beta <= 1:
            raise EnsembleError(f"beta must lie in (0, 1], got {self.beta}")
        if self.n_max_pool < 1:
            raise EnsembleError(f"n_max_pool must be >= 1, got {self.n_max_pool}")
        if self.seed < 0:
            raise EnsembleError(f"seed must be >= 0, got {self.seed}")
        if self.min_it_samples < 1:
            raise EnsembleError(f"min_it_samples must be >= 1, got {self.min_it_samples}")


@dataclass(frozen=True)
class DisagreementStats:
    empirical: float
    expected: float
    statistic: float


@dataclass(frozen=True)
class Rejection:
    """A candidate that did not make it into the ensemble."""

    label: str
    reason: RejectionReason
    detail: str = ""


@dataclass(frozen=True)
class ITResult:
    """One pairwise independence comparison made during a build."""

    candidate: str
    member_index: int
    stats: DisagreementStats
    passed: bool
    subset_size: int
    train_overlap: float


@dataclass
class BuildDiagnostics:
    draws: int = 0
    accepted: list[str] = field(default_factory=list)
    rejections: Counter = field(default_factory=Counter)
    it_log: list[ITResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "draws": self.draws,
            "accepted": list(self.accepted),
            "rejections": {str(k): v for k, v in sorted(self.rejections.items())},
            "it_checks": len(self.it_log),
            "it_failures": sum(1 for r in self.it_log if not r.passed),
        }


class EnsembleBuildError(RuntimeError):
    """The pool was exhausted before T members were accepted."""

    def __init__(self, message: str, members: Sequence[SubClassifier], diagnostics: BuildDiagnostics):
        super().__init__(message)
        self.members = list(members)
        self.diagnostics = diagnostics
        self.rejections = dict(diagnostics.rejections)


# --- voting ---------------------------------------------------------------------


def member_votes(m: EnsembleModel, img: Image) -> np.ndarray:
    """Each member's label for one (already normalized) ROI image."""
    vectors = {spec: extract(img, spec) for spec in m.features}
    return np.array([s.model.predict(vectors[s.feature]) for s in m.members], dtype=np.int64)


def majority_vote(m: EnsembleModel, img: Image) -> int:
    """sgn of the summed member votes; T odd keeps the sum nonzero."""
    return 1 if int(member_votes(m, img).sum()) > 0 else -1


def vote_matrix(m: EnsembleModel, d: LabeledDataset) -> np.ndarray:
    """(T, len(d)) matrix of member predictions."""
    return np.stack([s.model.predict_batch(d.features(s.feature)) for s in m.members])


def predict_dataset(m: EnsembleModel, d: LabeledDataset) -> np.ndarray:
    """Ensemble labels for every item of d, using the dataset feature cache."""
    votes = vote_matrix(m, d).sum(axis=0)
    return np.where(votes > 0, 1, -1).astype(np.int64)


# --- precision model ------------------------------------------------------------


def _require_odd(T: int) -> None:
    if T < 1 or T % 2 == 0:
        raise EnsembleError(f"T must be a positive odd integer, got {T}")


def analytic_precision(epsilon: float, T: int) -> float:
    """Precision of a majority of T independent voters that each err with epsilon."""
    if not 0.0 <= epsilon <= 1.0:
        raise EnsembleError(f"epsilon must lie in [0, 1], got {epsilon}")
    _require_odd(T)
    error = sum(
        math.comb(T, k) * (1.0 - epsilon) ** k * epsilon ** (T - k) for k in range(T // 2 + 1)
    )
    return 1.0 - error


def precision_curve(epsilons: Sequence[float], Ts: Sequence[int]) -> list[tuple[float, int, float]]:
    return [(float(e), int(T), analytic_precision(e, T)) for e in epsilons for T in Ts]


def simulate_precision(epsilon: float, T: int, trials: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo estimate of analytic_precision from T independent error coins."""
    if not 0.0 <= epsilon <= 1.0:
        raise EnsembleError(f"epsilon must lie in [0, 1], got {epsilon}")
    _require_odd(T)
    if trials < 1:
        raise EnsembleError(f"trials must be >= 1, got {trials}")
    rng = make_rng(seed, "simulate-precision", epsilon, T)
    correct = (rng.random((trials, T)) >= epsilon).sum(axis=1)
    return float((correct > T // 2).mean())


def write_curve_csv(
    path: Path, rows: Sequence[tuple[float, int, float]], simulated: Sequence[float] | None = None
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["epsilon", "T", "precision"]
        if simulated is not None:
            header.append("simulated")
        writer.writerow(header)
        for i, (eps, T, prec) in enumerate(rows):
            row: list = [f"{eps:.6g}", T, f"{prec:.10f}"]
            if simulated is not None:
                row.append(f"{simulated[i]:.6f}")
            writer.writerow(row)


# --- independence test ----------------------------------------------------------


def expected_disagreement(a: SubClassifier, b: SubClassifier) -> float:
    """P(a != b) if the two err independently."""
    return a.p_wrong * b.p_correct + a.p_correct * b.p_wrong


def disagreement_stats(
    pred_a: np.ndarray, pred_b: np.ndarray, p_a: float, p_b: float
) -> DisagreementStats:
    """Compare observed disagreement of two prediction arrays with the independent case.

    p_a and p_b are the accuracies (p_correct) of the two predictors.
    """
    pred_a = np.asarray(pred_a)
    pred_b = np.asarray(pred_b)
    if pred_a.shape != pred_b.shape or pred_a.ndim != 1:
        raise EnsembleError(f"Prediction arrays differ in shape: {pred_a.shape} vs {pred_b.shape}")
    if pred_a.size == 0:
        raise EnsembleError("Cannot measure disagreement on an empty set")
    empirical = float(np.mean(pred_a != pred_b))
    expected = (1.0 - p_a) * p_b + p_a * (1.0 - p_b)
    return DisagreementStats(empirical, expected, abs(expected - empirical))


def empirical_disagreement(a: SubClassifier, b: SubClassifier, d_it: LabeledDataset) -> float:
    if len(d_it) == 0:
        raise EnsembleError("Cannot measure disagreement on an empty set")
    pred_a = a.model.predict_batch(d_it.features(a.feature))
    pred_b = b.model.predict_batch(d_it.features(b.feature))
    return float(np.mean(pred_a != pred_b))


def _pair_stats(a: SubClassifier, b: SubClassifier, d_it: LabeledDataset) -> DisagreementStats:
    if len(d_it) == 0:
        raise EnsembleError("Cannot run the independence test on an empty set")
    return disagreement_stats(
        a.model.predict_batch(d_it.features(a.feature)),
        b.model.predict_batch(d_it.features(b.feature)),
        a.p_correct,
        b.p_correct,
    )


def independence_test(
    a: SubClassifier, b: SubClassifier, d_it: LabeledDataset, theta_it: float
) -> bool:
    """Pass iff |expected - empirical| disagreement < theta_it."""
    return _pair_stats(a, b, d_it).statistic < theta_it


# --- selection ------------------------------------------------------------------


def _candidate_key(cfg: ClassifierConfig, spec: FeatureSpec) -> str:
    return f"{json.dumps(cfg.to_dict(), sort_keys=True)}|{spec.label}"


def _train(
    cfg: ClassifierConfig, spec: FeatureSpec, d: LabeledDataset, p: EnsembleParams
) -> tuple[SubClassifier | Rejection, np.ndarray]:
    key = _candidate_key(cfg, spec)
    label = f"{cfg.label}/{spec.label}"
    train_idx, test_idx = d.split(p.alpha_train, p.alpha_test, make_rng(p.seed, "split", key))
    X = d.features(spec)
    y = d.labels
    seeded = cfg.with_seed(derive_seed(p.seed, "fit", key))
    try:
        model = fit(seeded, X[train_idx], y[train_idx])
    except DegenerateTrainingSetError as e:
        return Rejection(label, RejectionReason.DEGENERATE_SPLIT, str(e)), train_idx
    error = float(np.mean(model.predict_batch(X[test_idx]) != y[test_idx]))
    if not error > p.delta_low:
        return Rejection(label, RejectionReason.ERROR_TOO_LOW, f"error {error:.4f}"), train_idx
    if not error < p.delta_up:
        return Rejection(label, RejectionReason.ERROR_TOO_HIGH, f"error {error:.4f}"), train_idx
    return SubClassifier.from_error(model, spec, error), train_idx


def train_candidate(
    cfg: ClassifierConfig, spec: FeatureSpec, d: LabeledDataset, p: EnsembleParams
) -> SubClassifier | Rejection:
    """Fit on the alpha_train split and gate on the alpha_test error.

    Split and classifier seed derive from (p.seed, cfg, spec), so drawing the
    same pool entry twice yields the same sub-classifier.
    """
    return _train(cfg, spec, d, p)[0]


def _it_subset(
    d: LabeledDataset,
    p: EnsembleParams,
    rng: np.random.Generator,
    candidate_train: np.ndarray,
    member_train: np.ndarray,
) -> np.ndarray:
    """Rows for one pairwise comparison, outside both training splits when configured.

    Falls back to the whole dataset when the two splits leave nothing over.
    """
    if p.it_from_held_out:
        held_out = np.setdiff1d(np.arange(len(d)), np.union1d(candidate_train, member_train))
        if held_out.size:
            return d.sample(p.beta, rng, min_size=p.min_it_samples, among=held_out)
        logger.warning("Training splits cover the dataset; drawing the IT subset from all rows")
    return d.sample(p.beta, rng, min_size=p.min_it_samples)


def build_ensemble_with_diagnostics(
    d: LabeledDataset,
    pool: Sequence[tuple[ClassifierConfig, FeatureSpec]],
    p: EnsembleParams,
) -> tuple[EnsembleModel, BuildDiagnostics]:
    """Draw pool entries until T members pass the error gate and pairwise independence.

    Raises:
        EnsembleBuildError: fewer than T members after n_max_pool draws.
    """
    if not pool:
        raise EnsembleError("Candidate pool is empty")
    if len(d) == 0:
        raise EnsembleError("Dataset is empty")
    rng = make_rng(p.seed, "pool")
    diag = BuildDiagnostics()
    members: list[SubClassifier] = []
    train_indices: list[np.ndarray] = []
    trained: dict[str, tuple[SubClassifier | Rejection, np.ndarray]] = {}

    while len(members) < p.T and diag.draws < p.n_max_pool:
        cfg, spec = pool[int(rng.integers(len(pool)))]
        diag.draws += 1
        key = _candidate_key(cfg, spec)
        if key not in trained:
            trained[key] = _train(cfg, spec, d, p)
        result, train_idx = trained[key]
        if isinstance(result, Rejection):
            diag.rejections[result.reason] += 1
            logger.debug(f"Draw {diag.draws}: rejected {result.label} ({result.reason}, {result.detail})")
            continue

        passed_all = True
        for i, member in enumerate(members):
            it_idx = _it_subset(d, p, rng, train_idx, train_indices[i])
            stats = _pair_stats(result, member, d.subset(it_idx))
            overlap = float(np.isin(it_idx, train_indices[i]).mean())
            passed = stats.statistic < p.theta_it
            diag.it_log.append(ITResult(result.label, i, stats, passed, len(it_idx), overlap))
            logger.debug(
                f"IT {result.label} vs member {i}: expected {stats.expected:.4f} "
                f"empirical {stats.empirical:.4f} -> {'pass' if passed else 'fail'}"
            )
            if not passed:
                passed_all = False
                break
        if not passed_all:
            diag.rejections[RejectionReason.IT_FAIL] += 1
            continue

        members.append(result)
        train_indices.append(train_idx)
        diag.accepted.append(result.label)
        logger.info(
            f"Accepted member {len(members)}/{p.T}: {result.label} "
            f"(held-out error {result.delta_false:.4f})"
        )

    if len(members) < p.T:
        counts = ", ".join(f"{k}={v}" for k, v in sorted(diag.rejections.items())) or "none"
        raise EnsembleBuildError(
            f"Only {len(members)} of {p.T} members accepted after {diag.draws} draws "
            f"(rejections: {counts})",
            members,
            diag,
        )
    return EnsembleModel(tuple(members), lambda_avg=d.lambda_avg), diag


def build_ensemble(
    d: LabeledDataset,
    pool: Sequence[tuple[ClassifierConfig, FeatureSpec]],
    p: EnsembleParams,
) -> EnsembleModel:
    return build_ensemble_with_diagnostics(d, pool, p)[0]


# --- artifact I/O ---------------------------------------------------------------


def save_model(m: EnsembleModel, path: Path) -> Path:
    """Write the ensemble as one joblib file: fitted estimators plus their metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "lambda_avg": m.lambda_avg,
        "members": [
            {
                "classifier": s.model.config.to_dict(),
                "feature_dim": s.model.feature_dim,
                "estimator": s.model.estimator,
                "feature": s.feature.to_dict(),
                "delta_false": s.delta_false,
                "p_correct": s.p_correct,
                "p_wrong": s.p_wrong,
            }
            for s in m.members
        ],
    }
    joblib.dump(payload, path, compress=3)
    logger.info(f"Saved {m.size}-member ensemble to {path}")
    return path


def load_model(path: Path) -> EnsembleModel:
    path = Path(path)
    if not path.exists():
        raise EnsembleError(f"Model file not found: {path}")
    try:
        payload = joblib.load(path)
    except (EOFError, KeyError, IndexError, ValueError, pickle.UnpicklingError) as e:
        raise EnsembleError(f"{path} is not an ensemble model: {e}") from e
    if not isinstance(payload, dict) or "members" not in payload:
        raise EnsembleError(f"{path} is not an ensemble model (no metadata)")
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise EnsembleError(
            f"Unsupported model format {payload.get('format_version')!r} in {path}"
        )
    members = []
    for entry in payload["members"]:
        classifier = TrainedClassifier(
            config=ClassifierConfig.from_dict(entry["classifier"]),
            estimator=entry["estimator"],
            feature_dim=int(entry["feature_dim"]),
        )
        members.append(
            SubClassifier(
                model=classifier,
                feature=FeatureSpec.from_dict(entry["feature"]),
                delta_false=float(entry["delta_false"]),
                p_correct=float(entry["p_correct"]),
                p_wrong=float(entry["p_wrong"]),
            )
        )
    logger.info(f"Loaded {len(members)}-member ensemble from {path}")
    return EnsembleModel(tuple(members), lambda_avg=float(payload["lambda_avg"]))
