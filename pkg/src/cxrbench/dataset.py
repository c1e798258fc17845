"""Image ingestion, labeled manifests and stratified fold assignment.

Two public sources feed the benchmark: the COVID-19 image collection
(metadata CSV plus an ``images/`` folder) supplies the positive class and
the viral-pneumonia subset of the Kaggle pediatric pneumonia dataset
supplies the negative class. A synthetic generator produces small
separable datasets for tests and smoke runs.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.model_selection import BaseCrossValidator

from .exceptions import IngestionError, SplitError, ValidationError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ClassLabel(str, Enum):
    """Binary target. ``POSITIVE`` is the reference class for all metrics."""

    POSITIVE = "PositiveCOVID"
    NEGATIVE = "NegativePneumonia"

    @property
    def index(self) -> int:
        # logit column order used by every model head
        return 0 if self is ClassLabel.POSITIVE else 1

    @classmethod
    def from_index(cls, index: int) -> "ClassLabel":
        if index == 0:
            return cls.POSITIVE
        if index == 1:
            return cls.NEGATIVE
        raise ValidationError(f"class index must be 0 or 1, got {index!r}")

    @classmethod
    def coerce(cls, value) -> "ClassLabel":
        """Accept a ClassLabel, its string value, or a 0/1 column index."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls(value)
            except ValueError:
                raise ValidationError(f"unknown class label {value!r}") from None
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls.from_index(int(value))
        raise ValidationError(f"cannot interpret {value!r} as a class label")


class Source(str, Enum):
    COHEN = "CohenRepo"
    KAGGLE = "KagglePneumonia"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image. ``relative_path`` is relative to its source root."""

    id: str
    source: Source
    relative_path: str
    label: ClassLabel
    width: int
    height: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source.value,
            "relative_path": self.relative_path,
            "label": self.label.value,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            id=d["id"],
            source=Source(d["source"]),
            relative_path=d["relative_path"],
            label=ClassLabel(d["label"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    counts_per_label: dict[ClassLabel, int]
    source_snapshot: str
    build_seed: int
    source_roots: dict[Source, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def labels(self) -> list[ClassLabel]:
        return [r.label for r in self.records]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def resolve(self, record: ImageRecord) -> Path:
        root = self.source_roots.get(record.source)
        if root is None:
            raise ValidationError(f"manifest has no root directory for source {record.source.value}")
        return Path(root) / record.relative_path

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "counts_per_label": {label.value: n for label, n in self.counts_per_label.items()},
            "source_snapshot": self.source_snapshot,
            "build_seed": self.build_seed,
            "source_roots": {s.value: root for s, root in self.source_roots.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        manifest = cls(
            records=[ImageRecord.from_dict(r) for r in d["records"]],
            counts_per_label={ClassLabel(k): int(v) for k, v in d["counts_per_label"].items()},
            source_snapshot=d.get("source_snapshot", ""),
            build_seed=int(d.get("build_seed", 0)),
            source_roots={Source(k): v for k, v in d.get("source_roots", {}).items()},
            warnings=list(d.get("warnings", [])),
        )
        _check_counts(manifest)
        return manifest

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_counts(manifest: DatasetManifest) -> None:
    if sum(manifest.counts_per_label.values()) != len(manifest.records):
        raise ValidationError("counts_per_label does not sum to the number of records")
    actual = Counter(r.label for r in manifest.records)
    for label, n in actual.items():
        if manifest.counts_per_label.get(label) != n:
            raise ValidationError(f"counts_per_label disagrees with records for {label.value}")


def _image_size(path: Path) -> tuple[int, int] | None:
    """Return (width, height) if ``path`` decodes as an image, else None."""
    try:
        with Image.open(path) as im:
            im.load()
            return im.size
    except (OSError, UnidentifiedImageError):
        return None


def ingest_cohen(
    snapshot_root: str | Path,
    metadata_table: str | Path | None = None,
    issues: list[str] | None = None,
) -> list[ImageRecord]:
    """Read COVID-19 positive X-ray records from the public image collection.

    A metadata row is kept when its ``finding`` equals ``COVID-19`` (case
    insensitive, surrounding whitespace ignored) and its ``modality`` is
    ``X-ray``; every view is accepted. Image files are looked up as
    ``<snapshot_root>/<folder>/<filename>`` with ``folder`` defaulting to
    ``images``. Rows whose file is absent or undecodable are skipped and a
    message is appended to ``issues``.
    """
    root = Path(snapshot_root)
    table = Path(metadata_table) if metadata_table is not None else root / "metadata.csv"
    if not table.is_file():
        raise IngestionError(f"metadata table not found: {table}")

    records: list[ImageRecord] = []
    seen: set[str] = set()
    with table.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"finding", "modality", "filename"} - set(reader.fieldnames or ())
        if reader.fieldnames is not None and missing:
            raise IngestionError(f"metadata table {table} lacks columns: {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            if (row.get("finding") or "").strip().lower() != "covid-19":
                continue
            if (row.get("modality") or "").strip().lower() != "x-ray":
                continue
            folder = (row.get("folder") or "images").strip() or "images"
            rel = f"{folder}/{row['filename'].strip()}"
            size = _image_size(root / rel)
            if size is None:
                msg = f"cohen row {row_no}: image missing or undecodable: {rel}"
                logger.warning(msg)
                if issues is not None:
                    issues.append(msg)
                continue
            rec_id = f"cohen:{rel}"
            if rec_id in seen:
                msg = f"cohen row {row_no}: duplicate image reference skipped: {rel}"
                logger.warning(msg)
                if issues is not None:
                    issues.append(msg)
                continue
            seen.add(rec_id)
            records.append(ImageRecord(rec_id, Source.COHEN, rel, ClassLabel.POSITIVE, *size))
    return records


def find_viral_images(dataset_root: str | Path) -> list[str]:
    """Relative paths of viral-pneumonia images, sorted.

    The Kaggle dataset encodes the etiology in file names
    (``person1_virus_6.jpeg`` vs ``person1_bacteria_1.jpeg``).
    """
    root = Path(dataset_root)
    found = []
    for path in root.rglob("*"):
        if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
            continue
        rel = path.relative_to(root)
        if "__MACOSX" in rel.parts or rel.name.startswith("._"):
            continue
        if "virus" in rel.name.lower():
            found.append(rel.as_posix())
    return sorted(found)


def ingest_kaggle_pneumonia(
    dataset_root: str | Path,
    fraction: float = 0.2,
    seed: int = 0,
    issues: list[str] | None = None,
) -> list[ImageRecord]:
    """Draw ``floor(fraction * n_viral)`` viral-pneumonia images as negatives.

    Sampling is uniform without replacement from the sorted list of viral
    images using ``numpy.random.default_rng(seed)``; the selection is
    returned in sorted-path order.
    """
    if not (0.0 < fraction <= 1.0) or not math.isfinite(fraction):
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction!r}")
    root = Path(dataset_root)
    if not root.is_dir():
        raise IngestionError(f"pneumonia dataset root not found: {root}")
    viral = find_viral_images(root)
    if not viral:
        raise IngestionError(f"no viral-pneumonia images found under {root}")

    # epsilon guards binary-float products such as 0.2 * 1495 = 298.99999...
    n_draw = math.floor(fraction * len(viral) + 1e-9)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(viral), size=n_draw, replace=False))

    records = []
    for i in chosen:
        rel = viral[int(i)]
        size = _image_size(root / rel)
        if size is None:
            msg = f"kaggle image undecodable, skipped: {rel}"
            logger.warning(msg)
            if issues is not None:
                issues.append(msg)
            continue
        records.append(ImageRecord(f"kaggle:{rel}", Source.KAGGLE, rel, ClassLabel.NEGATIVE, *size))
    return records


def build_manifest(
    records: Sequence[ImageRecord],
    provenance: str,
    seed: int,
    source_roots: dict[Source, str | Path] | None = None,
    warnings: Iterable[str] = (),
) -> DatasetManifest:
    if not records:
        raise ValidationError("cannot build a manifest from zero records")
    dupes = [i for i, n in Counter(r.id for r in records).items() if n > 1]
    if dupes:
        raise ValidationError(f"duplicate record ids: {dupes[:5]}")
    counts = {label: 0 for label in ClassLabel}
    for r in records:
        counts[r.label] += 1
    roots = {Source(s): str(p) for s, p in (source_roots or {}).items()}
    return DatasetManifest(list(records), counts, provenance, int(seed), roots, list(warnings))


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]
    split_seed: int

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f != fold]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes

    def to_dict(self) -> dict:
        return {"k": self.k, "split_seed": self.split_seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        plan = cls(int(d["k"]), {str(i): int(f) for i, f in d["assignment"].items()}, int(d["split_seed"]))
        if any(not 0 <= f < plan.k for f in plan.assignment.values()):
            raise ValidationError("fold index outside [0, k)")
        return plan

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _stratified_assignment(labels: Sequence, k: int, seed: int) -> np.ndarray:
    """Fold index per position: per-label seeded shuffle, then round-robin.

    The round-robin cursor carries over from one label to the next so that
    total fold sizes, not only per-label counts, differ by at most one.
    """
    labels = list(labels)
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    folds = np.full(len(labels), -1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    cursor = 0
    # first-appearance order keeps the result independent of label sortability
    for label in dict.fromkeys(labels):
        members = np.array([i for i, lab in enumerate(labels) if lab == label])
        if len(members) < k:
            name = label.value if isinstance(label, Enum) else label
            raise SplitError(f"label {name} has {len(members)} records, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        folds[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    return folds


def stratified_kfold(manifest: DatasetManifest, k: int = 10, seed: int = 0) -> FoldPlan:
    """Assign every manifest record to one of ``k`` stratified test folds."""
    folds = _stratified_assignment(manifest.labels, k, seed)
    return FoldPlan(k, {rid: int(f) for rid, f in zip(manifest.ids, folds)}, int(seed))


class SeededStratifiedKFold(BaseCrossValidator):
    """scikit-learn splitter producing the same folds as :func:`stratified_kfold`.

    Lets the benchmark's fold rule drive ``cross_val_score`` and friends.
    """

    def __init__(self, n_splits: int = 10, random_state: int = 0):
        self.n_splits = n_splits
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def _iter_test_indices(self, X=None, y=None, groups=None) -> Iterator[np.ndarray]:
        if y is None:
            raise ValueError("SeededStratifiedKFold requires y")
        folds = _stratified_assignment(list(y), self.n_splits, self.random_state)
        for f in range(self.n_splits):
            yield np.flatnonzero(folds == f)


def _synthetic_image(rng: np.random.Generator, size: int, positive: bool) -> np.ndarray:
    # Centered disc: unchanged by flips and by rotation about the center, so
    # augmentation never destroys the class signal.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = np.hypot(yy - c, xx - c)
    # bright disc for positives, dark disc for negatives, on mid-grey
    image = 0.5 + 0.03 * rng.standard_normal((size, size))
    sigma = size * rng.uniform(0.40, 0.50)
    amplitude = rng.uniform(0.36, 0.44) * (1.0 if positive else -1.0)
    image += amplitude * np.exp(-((radius / sigma) ** 2))
    return np.clip(image * 255.0, 0, 255).round().astype(np.uint8)


def generate_synthetic(
    n_pos: int,
    n_neg: int,
    image_size: int = 64,
    seed: int = 0,
    out_dir: str | Path = "synthetic",
) -> DatasetManifest:
    """Write a separable grayscale PNG dataset and return its manifest.

    Both classes carry a Gaussian disc at the image center on a noisy
    mid-grey background: bright for positives, dark for negatives, so the
    mean central intensity separates them linearly. Each image draws
    from its own child seed, so output bytes depend only on the arguments.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValidationError("image counts must be nonnegative")
    if n_pos + n_neg == 0:
        raise ValidationError("at least one synthetic image is required")
    if image_size < 32:
        raise ValidationError(f"image_size must be at least 32, got {image_size}")
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(seed).spawn(n_pos + n_neg)
    plan = [(ClassLabel.POSITIVE, i) for i in range(n_pos)] + [(ClassLabel.NEGATIVE, i) for i in range(n_neg)]
    records = []
    for (label, i), child in zip(plan, children):
        positive = label is ClassLabel.POSITIVE
        rel = f"images/{'pos' if positive else 'neg'}_{i:04d}.png"
        pixels = _synthetic_image(np.random.default_rng(child), image_size, positive)
        Image.fromarray(pixels).save(out / rel, format="PNG")
        records.append(ImageRecord(f"synthetic:{rel}", Source.SYNTHETIC, rel, label, image_size, image_size))
    provenance = f"synthetic n_pos={n_pos} n_neg={n_neg} image_size={image_size} seed={seed}"
    return build_manifest(records, provenance, seed, {Source.SYNTHETIC: out.resolve()})
