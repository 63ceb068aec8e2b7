"""Datasets: ingestion, synthetic long-tail generation, folds and balanced epochs."""

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image, UnidentifiedImageError
from sklearn.model_selection import StratifiedKFold

from .exceptions import ConfigError, DataError, ShapeMismatchError
from .models import SHAPES, FoldPlan, SyntheticClassSpec, SyntheticSpec
from .utils import STREAM_SYNTHETIC, array_digest, as_generator, rng_stream

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["path", "label"]
CLASSES_FILE = "classes.json"
PACKED_MAGIC = b"IMSET1"


@dataclass(frozen=True)
class ImageSample:
    """One H x W x 3 image with values in [0, 1] and an optional class id."""

    pixels: np.ndarray
    label: Optional[int] = None
    source: Optional[str] = None

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeMismatchError("image", ("H", "W", 3), pixels.shape)  # type: ignore[arg-type]
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable list of samples with their class names."""

    samples: Tuple[ImageSample, ...]
    class_names: Tuple[str, ...]
    image_shape: Tuple[int, int, int] = (32, 32, 3)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.samples:
            object.__setattr__(self, "image_shape", tuple(self.samples[0].pixels.shape))
        for sample in self.samples:
            if sample.pixels.shape != self.image_shape:
                raise ShapeMismatchError("image", self.image_shape, sample.pixels.shape)
            if sample.label is not None and not 0 <= sample.label < self.n_classes:
                raise DataError(
                    f"label {sample.label} outside [0, {self.n_classes})", sample.source
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_labeled(self) -> bool:
        return all(s.label is not None for s in self.samples)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.samples], dtype=np.int64)

    @cached_property
    def class_counts(self) -> np.ndarray:
        labels = self.labels[self.labels >= 0]
        return np.bincount(labels, minlength=self.n_classes)

    @cached_property
    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, *self.image_shape))
        stacked = np.stack([s.pixels for s in self.samples])
        stacked.setflags(write=False)
        return stacked

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            tuple(self.samples[i] for i in indices), self.class_names, self.image_shape
        )

    def fingerprint(self) -> str:
        return self._fingerprint

    @cached_property
    def _fingerprint(self) -> str:
        names = np.frombuffer(json.dumps(list(self.class_names)).encode(), dtype=np.uint8)
        return array_digest(names, self.labels, self.images)


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            rgb = image.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DataError("Image file not found", str(path)) from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"Cannot decode image: {exc}", str(path)) from exc


def ingest(
    root: Union[str, Path],
    manifest: str = "manifest.csv",
    class_names: Optional[Sequence[str]] = None,
) -> LabeledDataset:
    """Load a dataset from a ``path,label`` manifest CSV of PNG images.

    The class list comes from ``class_names`` when given, else from
    ``classes.json`` next to the manifest, else from the observed labels.
    """
    root = Path(root)
    manifest_path = root / manifest
    if not manifest_path.is_file():
        raise DataError("Manifest not found", str(manifest_path))

    with open(manifest_path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"Manifest header must be {','.join(MANIFEST_HEADER)}", str(manifest_path))
        rows = [row for row in reader if row]

    if class_names is None and (root / CLASSES_FILE).is_file():
        class_names = json.loads((root / CLASSES_FILE).read_text(encoding="utf-8"))
    if class_names is None:
        class_names = sorted({row[1] for row in rows})
    index = {name: i for i, name in enumerate(class_names)}

    samples = []
    for row in rows:
        if len(row) != 2:
            raise DataError(f"Malformed manifest row {row!r}", str(manifest_path))
        relative, label = row
        if label not in index:
            raise DataError(f"Unknown label '{label}' for {relative}", str(manifest_path))
        image_path = root / relative
        samples.append(ImageSample(_decode_image(image_path), index[label], relative))

    dataset = LabeledDataset(tuple(samples), tuple(class_names))
    logger.info(
        f"Ingested {len(dataset)} images in {dataset.n_classes} classes from {manifest_path}"
    )
    return dataset


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(dataset: LabeledDataset, out_dir: Union[str, Path]) -> Path:
    """Write PNG images, ``manifest.csv`` and ``classes.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, sample in enumerate(dataset.samples):
            label = dataset.class_names[sample.label] if sample.label is not None else ""
            relative = f"images/{i:06d}.png"
            Image.fromarray(_to_uint8(sample.pixels)).save(out_dir / relative, format="PNG")
            rows.append([relative, label])
        with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
        (out_dir / CLASSES_FILE).write_text(
            json.dumps(list(dataset.class_names)) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise DataError(f"Cannot write dataset: {exc.strerror}", str(out_dir)) from exc
    return out_dir


def write_packed(dataset: LabeledDataset, path: Union[str, Path]) -> Path:
    """Single-file container: magic, counts, dims, class names, labels, u8 RGB."""
    path = Path(path)
    height, width, _ = dataset.image_shape
    chunks = [PACKED_MAGIC, struct.pack("<IIII", len(dataset), dataset.n_classes, height, width)]
    for name in dataset.class_names:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
    chunks.append(dataset.labels.astype("<i4").tobytes())
    chunks.append(_to_uint8(dataset.images).tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_packed(path: Union[str, Path]) -> LabeledDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read packed dataset: {exc.strerror}", str(path)) from exc
    if not blob.startswith(PACKED_MAGIC):
        raise DataError("Not a packed IMSET1 dataset", str(path))
    offset = len(PACKED_MAGIC)
    try:
        n, n_classes, height, width = struct.unpack_from("<IIII", blob, offset)
        offset += 16
        names = []
        for _ in range(n_classes):
            (length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            names.append(blob[offset: offset + length].decode("utf-8"))
            offset += length
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=offset)
        offset += 4 * n
        pixels = np.frombuffer(blob, dtype=np.uint8, count=n * height * width * 3, offset=offset)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"Truncated packed dataset: {exc}", str(path)) from exc
    images = pixels.reshape(n, height, width, 3).astype(np.float64) / 255.0
    samples = tuple(
        ImageSample(images[i], None if labels[i] < 0 else int(labels[i])) for i in range(n)
    )
    return LabeledDataset(samples, tuple(names), (height, width, 3))


# Class supports of the 21-type bone-marrow cytomorphology corpus.
MARROW_SUPPORTS: Dict[str, int] = {
    "ABE": 8,
    "ART": 19630,
    "NGB": 9968,
    "BAS": 441,
    "BLA": 11973,
    "EOS": 5883,
    "EBO": 27395,
    "FGC": 47,
    "HAC": 409,
    "LYI": 65,
    "LYT": 26242,
    "MMZ": 3055,
    "MON": 4040,
    "MYB": 6557,
    "NIF": 3538,
    "OTH": 294,
    "PLM": 7629,
    "PEB": 2740,
    "PMO": 11994,
    "NGS": 29424,
    "KSC": 42,
}
MARROW_SCALE = 10
MARROW_FLOOR = 8


def _geometric_counts(n_classes: int, total: int, ratio: float) -> List[int]:
    decay = ratio ** (-1.0 / (n_classes - 1))
    weights = decay ** np.arange(n_classes)
    counts = [max(1, int(round(c))) for c in weights / weights.sum() * total]
    counts[0] += total - sum(counts)
    return counts


def synthetic_preset(name: str) -> SyntheticSpec:
    """Named class profiles for ``generate_synthetic``."""
    if name == "marrow-longtail":
        classes = [
            SyntheticClassSpec(name=abbr, count=max(int(round(n / MARROW_SCALE)), MARROW_FLOOR))
            for abbr, n in MARROW_SUPPORTS.items()
        ]
    elif name == "desk-longtail":
        classes = [
            SyntheticClassSpec(name=f"class_{i}", count=c)
            for i, c in enumerate(_geometric_counts(8, 2000, 100.0))
        ]
    elif name == "minimal":
        classes = [SyntheticClassSpec(name="A", count=5), SyntheticClassSpec(name="B", count=5)]
    else:
        raise ConfigError("preset", name, "must be one of desk-longtail, marrow-longtail, minimal")
    return SyntheticSpec(classes=classes)


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    distance = np.hypot(dy, dx)
    if shape == "disk":
        return distance <= radius
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * radius
    if shape == "ring":
        return (distance <= radius) & (distance >= 0.55 * radius)
    if shape == "cross":
        arm = 0.3 * radius
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
        )
    return np.abs(dy) + np.abs(dx) <= radius


def _class_color(spec: SyntheticClassSpec, index: int, n_classes: int) -> np.ndarray:
    if spec.color is not None:
        return np.asarray(spec.color, dtype=np.float64)
    return hsv_to_rgb(np.array([index / n_classes, 0.9, 0.9]))  # type: ignore[no-any-return]


def _render(
    rng: np.random.Generator, spec: SyntheticSpec, color: np.ndarray, shape: str
) -> np.ndarray:
    size = spec.image_size
    background = rng.uniform(0.35, 0.65) + spec.noise * rng.standard_normal((size, size, 3))
    centre = size / 2.0 + rng.uniform(-0.15, 0.15, size=2) * size
    radius = spec.radius * size * rng.uniform(0.85, 1.15)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = _shape_mask(shape, yy - centre[0], xx - centre[1], radius)
    tint = np.clip(color + 0.02 * rng.standard_normal(3), 0.0, 1.0)
    blob = (1.0 - spec.signal) * background + spec.signal * tint
    return np.clip(np.where(mask[..., None], blob, background), 0.0, 1.0)  # type: ignore[no-any-return]


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> LabeledDataset:
    """Colored-blob images, one motif (hue + shape) per class, class-major order."""
    samples = []
    n_classes = len(spec.classes)
    for c, class_spec in enumerate(spec.classes):
        color = _class_color(class_spec, c, n_classes)
        shape = class_spec.shape or SHAPES[c % len(SHAPES)]
        for i in range(class_spec.count):
            rng = rng_stream(seed, STREAM_SYNTHETIC, c, i)
            samples.append(ImageSample(_render(rng, spec, color, shape), c))
    return LabeledDataset(
        tuple(samples),
        tuple(c.name for c in spec.classes),
        (spec.image_size, spec.image_size, 3),
    )


def _labels_of(data: Union[LabeledDataset, Sequence[int], np.ndarray]) -> np.ndarray:
    labels = data.labels if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.int64)
    if np.any(labels < 0):
        raise DataError("every sample needs a label for stratified operations")
    return labels


def stratified_kfold(
    data: Union[LabeledDataset, Sequence[int], np.ndarray], k: int, seed: int = 0
) -> FoldPlan:
    """Stratified fold plan from a seeded, shuffled ``StratifiedKFold``.

    Per-class fold counts differ by at most one. A class with fewer than k
    members leaves some folds without it.
    """
    if k < 2:
        raise ConfigError("k", k, "must be >= 2")
    labels = _labels_of(data)
    supports = np.bincount(labels) if labels.size else np.zeros(0, dtype=np.int64)
    if supports.max(initial=0) < k:
        raise DataError(f"cannot split into {k} folds: no class has {k} or more samples")
    sparse = [int(c) for c in np.flatnonzero((supports > 0) & (supports < k))]
    if sparse:
        logger.warning("classes %s have fewer than %d samples; some folds will miss them", sparse, k)

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed) & 0xFFFFFFFF)
    assignments = np.zeros(labels.shape[0], dtype=np.int64)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="The least populated class", category=UserWarning)
        for fold, (_, val) in enumerate(splitter.split(np.zeros((labels.shape[0], 1)), labels)):
            assignments[val] = fold
    return FoldPlan(k=k, seed=seed, assignments=assignments.tolist())


def default_samples_per_class(counts: Sequence[int]) -> int:
    """N_c default: median class support, capped at the largest support."""
    present = np.asarray([c for c in counts if c > 0])
    if present.size == 0:
        raise DataError("no class has any samples")
    return int(max(1, min(round(float(np.median(present))), int(present.max()))))


def balanced_epoch(
    data: Union[LabeledDataset, Sequence[int], np.ndarray],
    samples_per_class: int,
    seed: "int | Sequence[int] | np.random.Generator",
    classes: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Index sequence where every class contributes exactly ``samples_per_class`` draws.

    Classes smaller than N_c are drawn with replacement; larger ones give a
    random subset without replacement. The result is shuffled globally.
    """
    if samples_per_class < 1:
        raise ConfigError("samples_per_class", samples_per_class, "must be >= 1")
    labels = _labels_of(data)
    if classes is None:
        n_classes = data.n_classes if isinstance(data, LabeledDataset) else int(labels.max(initial=-1)) + 1
        classes = range(n_classes)
    rng = as_generator(seed)

    draws = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise DataError(f"class {c} has no samples to draw from")
        if members.size >= samples_per_class:
            draws.append(rng.permutation(members)[:samples_per_class])
        else:
            draws.append(rng.choice(members, size=samples_per_class, replace=True))
    if not draws:
        return np.zeros(0, dtype=np.int64)
    return rng.permutation(np.concatenate(draws))  # type: ignore[no-any-return]
