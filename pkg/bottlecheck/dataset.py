"""Labeled image datasets, JSON-lines manifests and the per-dataset feature cache."""

import hashlib
import json
import logging
import math
import threading
from collections.abc import Sequence
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from bottlecheck.features import FeatureSpec, extract_batch
from bottlecheck.imaging import Image, normalize_gray_mean, read_pgm, write_pgm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
QUALIFIED = 1
DEFECTIVE = -1


class DatasetError(ValueError):
    """Raised for malformed manifests or invalid dataset operations."""

    pass


@dataclass(frozen=True)
class DatasetItem:
    """One manifest record. label: +1 qualified, -1 defective."""

    path: str
    label: int
    defect_kind: str = "none"
    noise_flipped: bool = False

    def __post_init__(self) -> None:
        if self.label not in (QUALIFIED, DEFECTIVE):
            raise DatasetError(f"Label must be -1 or +1, got {self.label} for {self.path}")


class _ImageStore:
    """8-bit rasters shared by a dataset, its subsets and relabeled copies.

    Feature matrices are computed once per (spec, lambda_avg) over all rasters.
    """

    def __init__(self, pixels: Sequence[np.ndarray]):
        self.pixels = [np.asarray(p, dtype=np.uint8) for p in pixels]
        self._features: dict[tuple[FeatureSpec, float], np.ndarray] = {}
        self._lock = threading.Lock()

    def image(self, i: int) -> Image:
        return Image.from_uint8(self.pixels[i])

    def features(self, spec: FeatureSpec, lambda_avg: float, workers: int) -> np.ndarray:
        key = (spec, lambda_avg)
        with self._lock:
            cached = self._features.get(key)
        if cached is not None:
            return cached
        images = [normalize_gray_mean(self.image(i), lambda_avg) for i in range(len(self.pixels))]
        matrix = extract_batch(images, spec, workers=workers)
        matrix.setflags(write=False)
        logger.debug(f"Extracted {spec.label} features: {matrix.shape}")
        with self._lock:
            return self._features.setdefault(key, matrix)


class LabeledDataset:
    """Images plus labels in {-1, +1}.

    Images are ROI crops held as 8-bit rasters (what the PGM files store); they are
    gray-mean normalized before feature extraction.
    """

    def __init__(
        self,
        items: Sequence[DatasetItem],
        pixels: Sequence[np.ndarray] | None = None,
        manifest_path: Path | None = None,
        lambda_avg: float = 0.5,
        workers: int = 1,
        *,
        _store: _ImageStore | None = None,
        _index: np.ndarray | None = None,
    ):
        self.items = tuple(items)
        if _store is None:
            if pixels is None or len(pixels) != len(self.items):
                raise DatasetError("Need exactly one raster per item")
            _store = _ImageStore(pixels)
            _index = np.arange(len(self.items))
        assert _index is not None
        if len(_index) != len(self.items):
            raise DatasetError("Index and items differ in length")
        self._store = _store
        self._index = np.asarray(_index, dtype=np.int64)
        self.manifest_path = manifest_path
        self.lambda_avg = lambda_avg
        self.workers = workers

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([item.label for item in self.items], dtype=np.int64)

    @property
    def noise_mask(self) -> np.ndarray:
        return np.array([item.noise_flipped for item in self.items], dtype=bool)

    def image(self, i: int) -> Image:
        return self._store.image(int(self._index[i]))

    def pixels(self, i: int) -> np.ndarray:
        return self._store.pixels[int(self._index[i])]

    def features(self, spec: FeatureSpec) -> np.ndarray:
        """Feature matrix (len(self), dim) of normalized images, cached per spec."""
        if not self.items:
            raise DatasetError("Dataset is empty")
        matrix = self._store.features(spec, self.lambda_avg, self.workers)
        if self._is_identity():
            return matrix
        rows = matrix[self._index]
        rows.setflags(write=False)
        return rows

    def _is_identity(self) -> bool:
        n = len(self._store.pixels)
        return len(self._index) == n and bool(np.array_equal(self._index, np.arange(n)))

    def _derive(self, items: Sequence[DatasetItem], index: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            items,
            manifest_path=None,
            lambda_avg=self.lambda_avg,
            workers=self.workers,
            _store=self._store,
            _index=index,
        )

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        """View of the selected rows; shares rasters and cached features."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise DatasetError(f"Subset index out of range for dataset of {len(self)}")
        return self._derive([self.items[i] for i in idx], self._index[idx])

    def with_items(self, items: Sequence[DatasetItem]) -> "LabeledDataset":
        """Same images, new manifest records (e.g. relabeled)."""
        if len(items) != len(self.items):
            raise DatasetError("Replacement items must match dataset length")
        return self._derive(items, self._index)

    def split(
        self, alpha_train: float, alpha_test: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint random train/test index arrays of the requested fractions."""
        if not (0 < alpha_train < 1 and 0 < alpha_test < 1 and alpha_train + alpha_test <= 1 + 1e-12):
            raise DatasetError(f"Invalid split fractions {alpha_train}, {alpha_test}")
        n = len(self)
        order = rng.permutation(n)
        n_train = min(n, max(1, math.floor(alpha_train * n + 1e-9)))
        n_test = min(n - n_train, max(1, math.floor(alpha_test * n + 1e-9)))
        return np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_test])

    def sample(
        self,
        beta: float,
        rng: np.random.Generator,
        min_size: int = 0,
        among: Sequence[int] | np.ndarray | None = None,
    ) -> np.ndarray:
        """Random index set of max(floor(beta * n), min_size) rows, capped at n.

        With among, rows are drawn only from those indices and the size is capped
        at len(among) instead; n stays the dataset size.
        """
        if not 0 < beta <= 1:
            raise DatasetError(f"beta must lie in (0, 1], got {beta}")
        n = len(self)
        pool = np.arange(n) if among is None else np.unique(np.asarray(among, dtype=np.int64))
        if pool.size and (pool.min() < 0 or pool.max() >= n):
            raise DatasetError(f"Sample index out of range for dataset of {n}")
        if pool.size == 0:
            return pool
        size = min(pool.size, max(min_size, math.floor(beta * n + 1e-9), 1))
        return np.sort(rng.choice(pool, size=size, replace=False))

    def class_counts(self) -> dict[int, int]:
        labels = self.labels
        return {QUALIFIED: int((labels == QUALIFIED).sum()), DEFECTIVE: int((labels == DEFECTIVE).sum())}


def manifest_lines(items: Sequence[DatasetItem]) -> list[str]:
    return [json.dumps(asdict(item), sort_keys=True) for item in items]


def manifest_digest(items: Sequence[DatasetItem]) -> str:
    """sha256 of the manifest text; equal datasets give equal digests."""
    return hashlib.sha256("\n".join(manifest_lines(items)).encode()).hexdigest()


def write_manifest(items: Sequence[DatasetItem], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for line in manifest_lines(items):
            f.write(line + "\n")


def read_manifest(path: Path) -> list[DatasetItem]:
    """Parse a JSON-lines manifest; the manifest is the only source of labels."""
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                items.append(
                    DatasetItem(
                        path=str(record["path"]),
                        label=int(record["label"]),
                        defect_kind=str(record.get("defect_kind", "none")),
                        noise_flipped=bool(record.get("noise_flipped", False)),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed manifest record: {e}") from e
    return items


def save_dataset(dataset: LabeledDataset, root: Path) -> Path:
    """Write every raster as PGM under root and the manifest beside them."""
    root = Path(root)
    for i, item in enumerate(dataset.items):
        write_pgm(dataset.pixels(i), root / item.path)
    manifest = root / MANIFEST_NAME
    write_manifest(dataset.items, manifest)
    dataset.manifest_path = manifest
    logger.info(f"Saved {len(dataset)} items to {root}")
    return manifest


def load_dataset(manifest: Path, lambda_avg: float = 0.5, workers: int = 1) -> LabeledDataset:
    """Load a dataset from its manifest; paths resolve relative to the manifest."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"Manifest not found: {manifest}")
    items = read_manifest(manifest)
    if not items:
        raise DatasetError(f"Manifest {manifest} lists no items")
    pixels = [read_pgm(manifest.parent / item.path).to_uint8() for item in items]
    logger.info(f"Loaded {len(items)} items from {manifest}")
    return LabeledDataset(
        items, pixels, manifest_path=manifest, lambda_avg=lambda_avg, workers=workers
    )


def relabel(item: DatasetItem, flipped: bool) -> DatasetItem:
    """Negate an item's label and toggle its noise flag."""
    if not flipped:
        return item
    return replace(item, label=-item.label, noise_flipped=not item.noise_flipped)
