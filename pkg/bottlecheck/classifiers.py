"""Candidate sub-classifier families: random forest, GBDT, linear SVM and k-NN.

The estimators come from scikit-learn; this module pins their hyperparameters to
a small validated config and wraps them in one contract: fit() on a feature
matrix with labels in {-1, +1} returns a TrainedClassifier whose predictions are
exactly -1 or +1. Every random choice is drawn from the config's seed.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from typing import Any, Protocol

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.ensemble import HistGradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import SGDClassifier
from sklearn.metrics import pairwise_distances
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from bottlecheck.features import FeatureVector

logger = logging.getLogger(__name__)


class ClassifierError(ValueError):
    """Raised for invalid classifier configs or inputs."""

    pass


class DegenerateTrainingSetError(ClassifierError):
    """Raised when training data carries no usable signal."""

    pass


class Family(StrEnum):
    RF = "RF"
    GBDT = "GBDT"
    SVM = "SVM"
    KNN = "KNN"


FAMILY_DEFAULTS: dict[Family, dict[str, float | int]] = {
    Family.RF: {
        "n_trees": 31,
        "max_depth": 12,
        "feature_fraction": 0.05,
        "min_samples_leaf": 1,
        "seed": 0,
    },
    Family.GBDT: {
        "n_rounds": 100,
        "learning_rate": 0.1,
        "max_depth": 3,
        "feature_fraction": 0.2,
        "min_samples_leaf": 5,
        "seed": 0,
    },
    Family.SVM: {
        "c": 1.0,
        "epochs": 50,
        "seed": 0,
    },
    Family.KNN: {
        "k": 5,
    },
}

_INTEGER_PARAMS = {
    "n_trees",
    "max_depth",
    "min_samples_leaf",
    "n_rounds",
    "epochs",
    "k",
    "seed",
}


@dataclass(frozen=True)
class ClassifierConfig:
    """Family plus its hyperparameters, merged over FAMILY_DEFAULTS.

    Hyperparameters are stored as a sorted tuple of items so configs are hashable;
    use .params for a dict view.
    """

    family: Family
    hyperparameters: Any = field(default_factory=dict)

    def __post_init__(self) -> None:
        try:
            family = Family(self.family)
        except ValueError as e:
            raise ClassifierError(f"Unknown classifier family: {self.family!r}") from e
        given = dict(self.hyperparameters)
        defaults = FAMILY_DEFAULTS[family]
        unknown = set(given) - set(defaults)
        if unknown:
            raise ClassifierError(
                f"Unknown {family.value} hyperparameters: {', '.join(sorted(unknown))}"
            )
        merged: dict[str, float | int] = {**defaults, **given}
        for key, value in merged.items():
            if key in _INTEGER_PARAMS:
                if int(value) != value:
                    raise ClassifierError(f"{family.value}.{key} must be an integer, got {value}")
                merged[key] = int(value)
            if key == "seed":
                if value < 0:
                    raise ClassifierError(f"{family.value}.seed must be >= 0, got {value}")
            elif not value > 0:
                raise ClassifierError(f"{family.value}.{key} must be positive, got {value}")
        if family is Family.KNN and merged["k"] % 2 == 0:
            raise ClassifierError(f"KNN k must be odd, got {merged['k']}")
        if family is Family.RF and merged["n_trees"] % 2 == 0:
            raise ClassifierError(f"RF n_trees must be odd, got {merged['n_trees']}")
        if "feature_fraction" in merged and merged["feature_fraction"] > 1:
            raise ClassifierError(
                f"{family.value}.feature_fraction must be <= 1, got {merged['feature_fraction']}"
            )
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "hyperparameters", tuple(sorted(merged.items())))

    @property
    def params(self) -> dict[str, Any]:
        return dict(self.hyperparameters)

    @property
    def seed(self) -> int:
        return int(self.params.get("seed", 0))

    def with_seed(self, seed: int) -> "ClassifierConfig":
        """Same config with a different seed (no-op for seedless families)."""
        if "seed" not in FAMILY_DEFAULTS[self.family]:
            return self
        return replace(self, hyperparameters={**self.params, "seed": seed})

    @property
    def label(self) -> str:
        return self.family.value

    def to_dict(self) -> dict:
        return {"family": self.family.value, "hyperparameters": self.params}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClassifierConfig":
        unknown = set(data) - {"family", "hyperparameters"}
        if unknown:
            raise ClassifierError(f"Unknown classifier config keys: {', '.join(sorted(unknown))}")
        return cls(data["family"], data.get("hyperparameters", {}))


class _Estimator(Protocol):
    def predict(self, X: np.ndarray) -> np.ndarray: ...


def _sign(scores: np.ndarray) -> np.ndarray:
    """Map real scores to {-1, +1}; a score of exactly 0 maps to +1."""
    return np.where(np.asarray(scores) >= 0, 1, -1).astype(np.int64)


class StableNearestNeighbors(ClassifierMixin, BaseEstimator):
    """Euclidean k-NN majority vote whose distance ties go to the lower training index.

    KNeighborsClassifier selects neighbors with an unstable partition, so equal
    distances may resolve differently across rows; here the order is fixed.
    """

    def __init__(self, n_neighbors: int = 5) -> None:
        self.n_neighbors = n_neighbors

    def fit(self, X: np.ndarray, y: np.ndarray) -> "StableNearestNeighbors":
        self.fit_X_ = np.asarray(X, dtype=np.float64)
        self.fit_y_ = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(self.fit_y_)
        return self

    def kneighbors(self, X: np.ndarray) -> np.ndarray:
        """Training indices of the n_neighbors nearest rows, nearest first."""
        d = pairwise_distances(np.asarray(X, dtype=np.float64), self.fit_X_, metric="euclidean")
        return np.argsort(d, axis=1, kind="stable")[:, : self.n_neighbors]

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        """Sum of the neighbor labels; positive leans qualified."""
        return self.fit_y_[self.kneighbors(X)].sum(axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _sign(self.decision_function(X))


def make_estimator(cfg: ClassifierConfig, n_samples: int) -> Any:
    """Unfitted scikit-learn estimator for cfg.

    n_samples only matters for the SVM, whose regularization is expressed per
    sample the way SGD expects it (alpha = 1 / (C * n)).
    """
    p = cfg.params
    # RandomState seeds are 32-bit; config seeds are derived up to 63 bits
    random_state = p.get("seed", 0) % 2**32
    if cfg.family is Family.RF:
        return RandomForestClassifier(
            n_estimators=p["n_trees"],
            max_depth=p["max_depth"],
            max_features=p["feature_fraction"],
            min_samples_leaf=p["min_samples_leaf"],
            random_state=random_state,
        )
    if cfg.family is Family.GBDT:
        return HistGradientBoostingClassifier(
            max_iter=p["n_rounds"],
            learning_rate=p["learning_rate"],
            max_depth=p["max_depth"],
            max_features=p["feature_fraction"],
            min_samples_leaf=p["min_samples_leaf"],
            early_stopping=False,
            random_state=random_state,
        )
    if cfg.family is Family.SVM:
        return make_pipeline(
            StandardScaler(),
            SGDClassifier(
                loss="hinge",
                alpha=1.0 / (p["c"] * n_samples),
                max_iter=p["epochs"],
                tol=None,
                random_state=random_state,
            ),
        )
    return StableNearestNeighbors(n_neighbors=p["k"])


@dataclass(frozen=True, eq=False)
class TrainedClassifier:
    """A fitted estimator that only accepts vectors of feature_dim."""

    config: ClassifierConfig
    estimator: _Estimator
    feature_dim: int

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise ClassifierError(
                f"Expected feature vectors of dim {self.feature_dim}, got shape {X.shape}"
            )
        return X

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Real-valued margin per row of X, positive for qualified.

        Forests have no margin, so their score is the +1 vote share minus 0.5.
        """
        X = self._check(X)
        if hasattr(self.estimator, "decision_function"):
            return np.asarray(self.estimator.decision_function(X), dtype=np.float64)
        if hasattr(self.estimator, "predict_proba"):
            positive = list(self.estimator.classes_).index(1)
            return self.estimator.predict_proba(X)[:, positive] - 0.5
        return np.asarray(self.estimator.predict(X), dtype=np.float64)

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        """Labels in {-1, +1} for every row of X; a zero score is qualified."""
        return _sign(self.scores(X))

    def predict(self, x: FeatureVector | np.ndarray) -> int:
        values = x.values if isinstance(x, FeatureVector) else np.asarray(x)
        return int(self.predict_batch(values.reshape(1, -1))[0])

    @property
    def linear_weights(self) -> np.ndarray | None:
        """Hyperplane normal in the original feature space, for the SVM family."""
        if not isinstance(self.estimator, Pipeline):
            return None
        scaler, svm = self.estimator[0], self.estimator[-1]
        return np.asarray(svm.coef_[0] / scaler.scale_)


def as_matrix(xs: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    """Stack feature vectors (or pass through a 2-D array) as float64 rows."""
    if isinstance(xs, np.ndarray):
        X = xs
    else:
        rows = [x.values if isinstance(x, FeatureVector) else np.asarray(x) for x in xs]
        dims = {row.shape for row in rows}
        if len(dims) > 1:
            raise ClassifierError(f"Feature vectors differ in dimension: {sorted(dims)}")
        X = np.stack(rows) if rows else np.empty((0, 0))
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ClassifierError(f"Feature matrix must be 2-D, got shape {X.shape}")
    return X


def fit(
    cfg: ClassifierConfig,
    xs: Sequence[FeatureVector] | np.ndarray,
    ys: Sequence[int] | np.ndarray,
) -> TrainedClassifier:
    """Train one classifier; deterministic given cfg (including its seed).

    Raises:
        DegenerateTrainingSetError: single-class labels or featureless data.
        ClassifierError: shape or label problems.
    """
    X = as_matrix(xs)
    y = np.asarray(ys)
    if X.shape[0] != y.shape[0]:
        raise ClassifierError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise ClassifierError(f"Need at least 2 training samples, got {X.shape[0]}")
    if not np.isin(y, (-1, 1)).all():
        raise ClassifierError("Labels must be -1 or +1")
    if not np.all(np.isfinite(X)):
        raise ClassifierError("Feature matrix contains non-finite values")
    if np.unique(y).size < 2:
        raise DegenerateTrainingSetError("degenerate training set: only one class present")
    if np.all(X == X[0]):
        raise DegenerateTrainingSetError("degenerate training set: all feature vectors identical")
    if cfg.family is Family.KNN and cfg.params["k"] > X.shape[0]:
        raise ClassifierError(f"KNN k={cfg.params['k']} exceeds {X.shape[0]} training samples")
    estimator = make_estimator(cfg, X.shape[0])
    estimator.fit(X, y.astype(np.int64))
    logger.debug(f"Fitted {cfg.label} on {X.shape[0]}x{X.shape[1]} features")
    return TrainedClassifier(config=cfg, estimator=estimator, feature_dim=X.shape[1])
