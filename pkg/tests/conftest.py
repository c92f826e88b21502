"""Shared fixtures: small synthetic datasets and fake sub-classifiers."""

from collections.abc import Sequence

import numpy as np
import pytest

from bottlecheck.classifiers import ClassifierConfig, Family, TrainedClassifier
from bottlecheck.dataset import DatasetItem, LabeledDataset
from bottlecheck.ensemble import SubClassifier
from bottlecheck.features import FeatureSpec
from bottlecheck.synthgen import SceneSpec, gen_dataset

LO, HI = 60, 180
PAIR_FEATURE = FeatureSpec.raw(1.0)


class PairModel:
    """Votes +1 when column offset outweighs column offset + 1."""

    def __init__(self, offset: int, flip: bool = False):
        self.offset = offset
        self.flip = flip

    def predict(self, X: np.ndarray) -> np.ndarray:
        d = X[:, self.offset] - X[:, self.offset + 1]
        return -d if self.flip else d


def pair_member(offset: int, error: float, flip: bool = False) -> SubClassifier:
    trained = TrainedClassifier(ClassifierConfig(Family.KNN), PairModel(offset, flip), 4)
    return SubClassifier.from_error(trained, PAIR_FEATURE, error)


def _pair(vote: int) -> list[int]:
    return [HI, LO] if vote > 0 else [LO, HI]


def encoded_dataset(
    votes_a: Sequence[int], votes_b: Sequence[int], labels: Sequence[int] | None = None
) -> LabeledDataset:
    """1x4 rasters on which pair_member(0) predicts votes_a and pair_member(2) votes_b."""
    labels = list(labels) if labels is not None else [1] * len(votes_a)
    pixels = [
        np.array([_pair(a) + _pair(b)], dtype=np.uint8) for a, b in zip(votes_a, votes_b, strict=True)
    ]
    items = [DatasetItem(f"e{i}.pgm", int(y)) for i, y in enumerate(labels)]
    return LabeledDataset(items, pixels)


def noisy_pair_dataset(n: int = 200, noisy_tail: float = 0.2) -> LabeledDataset:
    """Four raster types; labels follow the first pair except for the last items.

    The flipped items sit at the end so a 1-NN always finds a clean twin first.
    """
    votes_a = [1 if i % 2 == 0 else -1 for i in range(n)]
    votes_b = [1 if (i // 2) % 2 == 0 else -1 for i in range(n)]
    start = n - int(n * noisy_tail)
    labels = [-a if i >= start else a for i, a in enumerate(votes_a)]
    return encoded_dataset(votes_a, votes_b, labels)


@pytest.fixture(scope="session")
def scene() -> SceneSpec:
    return SceneSpec()


@pytest.fixture(scope="session")
def small_dataset(scene: SceneSpec) -> LabeledDataset:
    """80 ROI crops, half defective."""
    return gen_dataset(scene, 80, 0.5, seed=11)
