"""
Face datasets: manifest loading, identity filtering, triplet sampling,
semi-supervised label masks, train/validation splits and a synthetic
generator of separable face-like identities.
"""

import csv
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import resize_bilinear
from .errors import (
    DataError,
    EmptyDatasetError,
    ImageFormatError,
    ImageShapeError,
    ManifestError,
    MissingImageError,
    SamplingError,
)
from .imageio import quantize, read_image, to_unit, write_image

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "identity")


class FaceDataset:
    """
    Images [N x H x W x C] in [0, 1] with dense identity labels 0..K-1.

    Treated as immutable once built; derived views return new datasets.
    """

    def __init__(self, images: np.ndarray, labels: Sequence[int], paths: Optional[Sequence[str]] = None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be [N x H x W x C], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and labels.min() < 0:
            raise DataError("identity labels must be non-negative")
        paths = list(paths) if paths is not None else [""] * len(labels)
        if len(paths) != len(labels):
            raise DataError(f"{len(labels)} images but {len(paths)} manifest paths")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.paths = paths

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def num_identities(self) -> int:
        return int(np.unique(self.labels).size)

    def flat(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Flattened [n x H*W*C] rows, the encoder's input layout."""
        images = self.images if indices is None else self.images[np.asarray(indices, dtype=np.int64)]
        return images.reshape(images.shape[0], -1)

    def subset(self, indices: Sequence[int]) -> "FaceDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FaceDataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx])

    def with_labels(self, labels: Sequence[int]) -> "FaceDataset":
        return FaceDataset(self.images, labels, self.paths)

    @cached_property
    def identity_index(self) -> Dict[int, np.ndarray]:
        """Dataset indices per identity, identities in ascending order."""
        return {int(k): np.flatnonzero(self.labels == k) for k in np.unique(self.labels)}

    @cached_property
    def complement_index(self) -> Dict[int, np.ndarray]:
        """Dataset indices outside each identity."""
        return {k: np.flatnonzero(self.labels != k) for k in self.identity_index}


def _dense_labels(labels: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(labels, return_inverse=True)
    return inverse.astype(np.int64).reshape(-1)


# -- loading / writing ----------------------------------------------------------

def load_dataset(manifest_path: Union[str, Path]) -> FaceDataset:
    """
    Read a ``path,identity`` CSV manifest; image paths are relative to the
    manifest's directory. Rows are numbered from 1 for the first data row.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent

    images: List[np.ndarray] = []
    raw_labels: List[int] = []
    paths: List[str] = []
    shape = None
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(0, f"header must be '{','.join(MANIFEST_HEADER)}', got {header}")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(row_no, f"expected 2 columns, got {len(row)}")
            rel, ident = row[0].strip(), row[1].strip()
            try:
                label = int(ident)
            except ValueError:
                raise ManifestError(row_no, f"identity '{ident}' is not an integer") from None
            if label < 0:
                raise ManifestError(row_no, f"identity {label} is negative")
            image_path = root / rel
            if not image_path.is_file():
                raise MissingImageError(row_no, f"image file not found: {image_path}")
            try:
                raster = read_image(image_path)
            except ImageFormatError as e:
                raise ManifestError(row_no, str(e)) from None
            if shape is None:
                shape = raster.shape
            elif raster.shape != shape:
                raise ImageShapeError(row_no, f"image {rel} is {raster.shape}, expected {shape}")
            images.append(to_unit(raster))
            raw_labels.append(label)
            paths.append(rel)

    if not images:
        raise EmptyDatasetError(f"manifest {manifest_path} lists no images")
    labels = _dense_labels(np.asarray(raw_labels))
    logger.info("loaded %d images of %d identities from %s", len(images), int(labels.max()) + 1, manifest_path)
    return FaceDataset(np.stack(images), labels, paths)


def write_dataset(ds: FaceDataset, out_dir: Union[str, Path], fmt: str = "pgm") -> Path:
    """Write ``images/`` plus ``manifest.csv``; returns the manifest path."""
    if fmt not in ("pgm", "png"):
        raise DataError(f"unsupported image format '{fmt}'")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    counters: Dict[int, int] = {}
    rows = []
    for img, label in zip(ds.images, ds.labels):
        k = counters.get(int(label), 0)
        counters[int(label)] = k + 1
        rel = f"images/id{int(label):04d}_{k:03d}.{fmt}"
        write_image(out_dir / rel, quantize(img))
        rows.append((rel, int(label)))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


# -- filtering / splitting ------------------------------------------------------

def filter_min_images(ds: FaceDataset, k: int) -> FaceDataset:
    """Keep identities with at least k images, relabelled densely, order preserved."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    ids, counts = np.unique(ds.labels, return_counts=True)
    keep_ids = ids[counts >= k]
    keep = np.flatnonzero(np.isin(ds.labels, keep_ids))
    if keep.size == 0:
        raise EmptyDatasetError(f"no identity has at least {k} images")
    kept = ds.subset(keep)
    dropped = len(ds) - len(kept)
    if dropped:
        logger.info("filter_min_images(k=%d): dropped %d images of %d identities", k, dropped, ids.size - keep_ids.size)
    return kept.with_labels(_dense_labels(kept.labels))


def split_train_val(ds: FaceDataset, val_fraction: float, rng: np.random.Generator) -> Tuple[FaceDataset, FaceDataset]:
    """
    Identity-stratified split. Each identity contributes
    ``round(val_fraction * count)`` validation images, raised to 2 when that
    would be 1 and the identity has at least 4, so both sides keep triplet
    positives. Labels stay shared between the two sides.
    """
    if not 0 <= val_fraction < 1:
        raise DataError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    val_idx: List[int] = []
    for _, members in ds.identity_index.items():
        n_val = int(round(val_fraction * members.size))
        if n_val == 1 and members.size >= 4:
            n_val = 2
        n_val = min(n_val, max(0, members.size - 2))
        if n_val:
            val_idx.extend(rng.choice(members, size=n_val, replace=False).tolist())
    val_mask = np.zeros(len(ds), dtype=bool)
    val_mask[val_idx] = True
    train = ds.subset(np.flatnonzero(~val_mask))
    val = ds.subset(np.flatnonzero(val_mask))
    return train, val


# -- sampling ---------------------------------------------------------------------

@dataclass(frozen=True)
class Triplet:
    anchor_idx: int
    positive_idx: int
    negative_idx: int


def check_triplet_ready(ds: FaceDataset) -> None:
    index = ds.identity_index
    if len(index) < 2:
        raise SamplingError(f"triplet sampling needs >= 2 identities, dataset has {len(index)}")
    short = [k for k, members in index.items() if members.size < 2]
    if short:
        raise SamplingError(f"identities {short[:5]} have fewer than 2 images; run filter_min_images(k=2)")


def _draw_triplet(ds: FaceDataset, rng: np.random.Generator) -> Triplet:
    anchor = int(rng.integers(len(ds)))
    label = int(ds.labels[anchor])
    members = ds.identity_index[label]
    others = members[members != anchor]
    positive = int(others[rng.integers(others.size)])
    complement = ds.complement_index[label]
    negative = int(complement[rng.integers(complement.size)])
    return Triplet(anchor, positive, negative)


def sample_triplet(ds: FaceDataset, rng: np.random.Generator) -> Triplet:
    """Uniform anchor, uniform same-identity positive, uniform other-identity negative."""
    check_triplet_ready(ds)
    return _draw_triplet(ds, rng)


def sample_triplets(ds: FaceDataset, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` triplets as an int64 array [count x 3] (anchor, positive, negative)."""
    check_triplet_ready(ds)
    out = np.empty((count, 3), dtype=np.int64)
    for i in range(count):
        t = _draw_triplet(ds, rng)
        out[i] = (t.anchor_idx, t.positive_idx, t.negative_idx)
    return out


@dataclass(frozen=True)
class LabelMask:
    flags: np.ndarray
    fraction: float

    @property
    def visible_count(self) -> int:
        return int(self.flags.sum())


def make_label_mask(ds: FaceDataset, fraction: float, rng: np.random.Generator) -> LabelMask:
    """
    Exactly ``floor(fraction * len(ds))`` visible labels, without replacement,
    first ``floor(fraction * count)`` per identity, remainder drawn from the
    rest of the dataset.
    """
    if not 0 <= fraction <= 1:
        raise DataError(f"label fraction must lie in [0, 1], got {fraction}")
    total = int(math.floor(fraction * len(ds) + 1e-9))
    flags = np.zeros(len(ds), dtype=bool)
    for _, members in ds.identity_index.items():
        quota = min(int(math.floor(fraction * members.size + 1e-9)), total - int(flags.sum()))
        if quota > 0:
            flags[rng.choice(members, size=quota, replace=False)] = True
    remaining = total - int(flags.sum())
    if remaining > 0:
        flags[rng.choice(np.flatnonzero(~flags), size=remaining, replace=False)] = True
    return LabelMask(flags, float(fraction))


# -- synthetic data ---------------------------------------------------------------

def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape[:2]
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad - dy: pad - dy + h, pad - dx: pad - dx + w]


def make_prototype(rng: np.random.Generator, height: int, width: int, grid: int = 4) -> np.ndarray:
    """Low-frequency random field rescaled to [0.2, 0.8], shape [H x W x 1]."""
    coarse = rng.random((grid, grid, 1))
    field = resize_bilinear(coarse, height, width)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.full((height, width, 1), 0.5)
    return 0.2 + 0.6 * (field - lo) / (hi - lo)


def generate_synthetic(
    num_identities: int = 20,
    images_per_identity: int = 10,
    height: int = 16,
    width: int = 16,
    noise_sigma: float = 0.05,
    seed: int = 0,
    max_shift: int = 2,
) -> FaceDataset:
    """
    Each identity is a smooth prototype; each sample is the prototype shifted
    by up to ``max_shift`` pixels plus Gaussian noise, clamped to [0, 1].
    """
    if min(num_identities, images_per_identity, height, width) < 1 or noise_sigma < 0 or max_shift < 0:
        raise DataError("synthetic dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    images: List[np.ndarray] = []
    labels: List[int] = []
    paths: List[str] = []
    for ident in range(num_identities):
        proto = make_prototype(rng, height, width)
        for k in range(images_per_identity):
            dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
            noise = rng.normal(0.0, noise_sigma, size=proto.shape) if noise_sigma > 0 else 0.0
            sample = np.clip(_shift(proto, dy, dx) + noise, 0.0, 1.0)
            images.append(sample.astype(np.float32))
            labels.append(ident)
            paths.append(f"synthetic/id{ident:04d}_{k:03d}")
    return FaceDataset(np.stack(images), labels, paths)
