"""Labeled sets of feature vectors: containers, FSET I/O, synthesis and expansion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyDataset,
    EmptySet,
    InvalidParameter,
    IoFailure,
    LabelConflict,
    NonFiniteValue,
    UnsupportedVersion,
)

FSET_MAGIC = b"FSET"
FSET_VERSION = 1
# magic, version u32, dim u32, num_records u64
_FSET_HEADER = struct.Struct("<4sIIQ")
_RECORD_PREFIX = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class ImageSet:
    """One labeled set of ``N`` feature vectors stored as an ``(N, d)`` array.

    Member order is storage-only: nothing downstream depends on it.
    """

    set_id: int
    label: int
    members: np.ndarray

    def __post_init__(self):
        members = np.asarray(self.members)
        if members.ndim == 1:
            members = members[None, :]
        if members.ndim != 2:
            raise DimensionMismatch(f"members must be 2-D, got shape {members.shape}")
        if members.shape[0] < 1:
            raise EmptySet(f"set {self.set_id} has no members")
        if members.dtype not in (np.float32, np.float64):
            members = members.astype(np.float64)
        if not np.all(np.isfinite(members)):
            raise NonFiniteValue(f"set {self.set_id} contains NaN or Inf")
        members = np.array(members, copy=True)
        members.setflags(write=False)
        object.__setattr__(self, "members", members)
        if self.set_id < 0 or self.label < 0:
            raise InvalidParameter("set_id and label must be non-negative")

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def __len__(self):
        return self.size

    def __eq__(self, other):
        if not isinstance(other, ImageSet):
            return NotImplemented
        return (
            self.set_id == other.set_id
            and self.label == other.label
            and self.members.shape == other.members.shape
            and np.array_equal(self.members, other.members)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    dim: int
    sets: tuple[ImageSet, ...]
    num_classes: int
    label_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        sets = tuple(self.sets)
        object.__setattr__(self, "sets", sets)
        if not sets:
            raise EmptyDataset("dataset has no sets")
        ids = set()
        for s in sets:
            if s.dim != self.dim:
                raise DimensionMismatch(
                    f"set {s.set_id} has dimension {s.dim}, dataset declares {self.dim}"
                )
            if s.label >= self.num_classes:
                raise InvalidParameter(
                    f"set {s.set_id} label {s.label} >= num_classes {self.num_classes}"
                )
            if s.set_id in ids:
                raise InvalidParameter(f"duplicate set_id {s.set_id}")
            ids.add(s.set_id)

    def __len__(self):
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def __getitem__(self, i):
        return self.sets[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_classes == other.num_classes
            and len(self.sets) == len(other.sets)
            and all(a == b for a, b in zip(self.sets, other.sets))
        )

    __hash__ = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sets], dtype=np.int64)

    def all_members(self) -> np.ndarray:
        """Stack every member vector of every set into one ``(total, d)`` array."""
        return np.concatenate([s.members for s in self.sets], axis=0)


def make_dataset(sets: Sequence[ImageSet], num_classes: int | None = None) -> Dataset:
    """Build a dataset, inferring ``dim`` and (optionally) ``num_classes``."""
    if not sets:
        raise EmptyDataset("dataset has no sets")
    if num_classes is None:
        num_classes = max(s.label for s in sets) + 1
    return Dataset(dim=sets[0].dim, sets=tuple(sets), num_classes=num_classes)


# ---------------------------------------------------------------------------
# FSET binary format


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` as an FSET file: one record per member vector."""
    if not isinstance(dataset, Dataset) or not dataset.sets:
        raise EmptyDataset("refusing to write an empty dataset")
    num_records = sum(s.size for s in dataset.sets)
    chunks = [_FSET_HEADER.pack(FSET_MAGIC, FSET_VERSION, dataset.dim, num_records)]
    for s in dataset.sets:
        prefix = _RECORD_PREFIX.pack(s.set_id, s.label)
        payload = np.ascontiguousarray(s.members, dtype="<f4")
        for row in payload:
            chunks.append(prefix)
            chunks.append(row.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_dataset(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read an FSET file, grouping records with equal ``set_id`` into sets.

    Sets appear in order of their first record; members keep file order.
    ``num_classes`` defaults to the sidecar label file length when one
    exists, otherwise to ``max(label) + 1``.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < _FSET_HEADER.size:
        raise BadMagic(f"{path}: file too short for an FSET header")
    magic, version, dim, num_records = _FSET_HEADER.unpack_from(raw, 0)
    if magic != FSET_MAGIC:
        raise BadMagic(f"{path}: expected magic {FSET_MAGIC!r}, found {magic!r}")
    if version != FSET_VERSION:
        raise UnsupportedVersion(f"{path}: FSET version {version} is not supported")
    if num_records == 0:
        raise EmptyDataset(f"{path}: file holds no records")
    if dim == 0:
        raise DimensionMismatch(f"{path}: dimension 0")

    record_size = _RECORD_PREFIX.size + 4 * dim
    body = raw[_FSET_HEADER.size:]
    if len(body) != num_records * record_size:
        raise DimensionMismatch(
            f"{path}: payload of {len(body)} bytes does not hold "
            f"{num_records} records of dimension {dim}"
        )
    rec_dtype = np.dtype([("set_id", "<u4"), ("label", "<u4"), ("x", "<f4", (dim,))])
    records = np.frombuffer(body, dtype=rec_dtype, count=num_records)
    values = records["x"]
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{path}: record payload contains NaN or Inf")

    set_ids = records["set_id"]
    labels = records["label"]
    uniq, first, inverse, counts = np.unique(
        set_ids, return_index=True, return_inverse=True, return_counts=True
    )
    # stable sort keeps file order inside each group
    by_group = np.split(np.argsort(inverse, kind="stable"), np.cumsum(counts)[:-1])
    sets = []
    for g in np.argsort(first, kind="stable"):
        rows = by_group[g]
        group_labels = labels[rows]
        if np.any(group_labels != group_labels[0]):
            raise LabelConflict(f"{path}: set {uniq[g]} has conflicting labels")
        sets.append(
            ImageSet(
                set_id=int(uniq[g]),
                label=int(group_labels[0]),
                members=values[rows].astype(np.float32),
            )
        )

    names = None
    sidecar = label_names_path(path)
    if sidecar.exists():
        names = tuple(read_label_names(sidecar))
        if num_classes is None:
            num_classes = len(names)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(dim=int(dim), sets=tuple(sets), num_classes=num_classes, label_names=names)


def label_names_path(path: str | Path) -> Path:
    """Sidecar location ``<stem>.labels.txt`` next to an FSET file."""
    path = Path(path)
    return path.with_name(path.stem + ".labels.txt")


def read_label_names(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines()]


def write_label_names(names: Iterable[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def encode_labels(names: Sequence[str]) -> tuple[list[int], list[str]]:
    """Map string class names to dense ids in order of first appearance."""
    table: dict[str, int] = {}
    ids = [table.setdefault(n, len(table)) for n in names]
    return ids, list(table)


# ---------------------------------------------------------------------------
# Synthetic benchmark


def class_centers(num_classes: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Points drawn uniformly on the sphere of the given radius."""
    g = rng.standard_normal((num_classes, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero draw has probability zero, guard anyway
    norms[norms == 0] = 1.0
    return radius * g / norms


def sample_sets(
    centers: np.ndarray,
    sets_per_class: int,
    set_size: int,
    noise_sigma: float,
    rng: np.random.Generator,
    first_id: int = 0,
) -> list[ImageSet]:
    """Draw ``sets_per_class`` noisy sets around each class center."""
    sets = []
    sid = first_id
    for label, center in enumerate(centers):
        for _ in range(sets_per_class):
            noise = rng.standard_normal((set_size, centers.shape[1])) * noise_sigma
            members = (center[None, :] + noise).astype(np.float32)
            sets.append(ImageSet(set_id=sid, label=label, members=members))
            sid += 1
    return sets


def _check_synth_params(num_classes, sets_per_class, set_size, dim, class_separation, noise_sigma):
    for name, value in (
        ("num_classes", num_classes),
        ("sets_per_class", sets_per_class),
        ("set_size", set_size),
        ("dim", dim),
    ):
        if int(value) != value or value < 1:
            raise InvalidParameter(f"{name} must be a positive integer, got {value}")
    if not (noise_sigma >= 0 and math.isfinite(noise_sigma)):
        raise InvalidParameter(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not (class_separation >= 0 and math.isfinite(class_separation)):
        raise InvalidParameter(f"class_separation must be >= 0, got {class_separation}")


def synth_dataset(
    num_classes: int,
    sets_per_class: int,
    set_size: int,
    dim: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Gaussian sets around class centers placed on a sphere of radius ``class_separation``."""
    _check_synth_params(num_classes, sets_per_class, set_size, dim, class_separation, noise_sigma)
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, dim, class_separation, rng)
    sets = sample_sets(centers, sets_per_class, set_size, noise_sigma, rng)
    return Dataset(dim=dim, sets=tuple(sets), num_classes=num_classes)


def synth_gallery_query(
    num_classes: int,
    gallery_per_class: int,
    query_per_class: int,
    dim: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
    gallery_set_size: int = 10,
    query_set_size: int | Sequence[int] = 10,
) -> tuple[Dataset, Dataset | tuple[Dataset, ...]]:
    """Gallery and query collections drawn around the same class centers.

    The gallery is generated exactly as ``synth_dataset`` would with
    ``sets_per_class=gallery_per_class``. Passing a sequence as
    ``query_set_size`` yields one query collection per size, each drawn
    from its own stream so that the gallery stays unchanged across sizes.
    """
    _check_synth_params(
        num_classes, gallery_per_class, gallery_set_size, dim, class_separation, noise_sigma
    )
    sizes = [query_set_size] if np.isscalar(query_set_size) else list(query_set_size)
    for q in sizes:
        _check_synth_params(num_classes, query_per_class, q, dim, class_separation, noise_sigma)
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, dim, class_separation, rng)
    gallery_sets = sample_sets(centers, gallery_per_class, gallery_set_size, noise_sigma, rng)
    gallery = Dataset(dim=dim, sets=tuple(gallery_sets), num_classes=num_classes)

    first_id = len(gallery_sets)
    queries = []
    for i, q in enumerate(sizes):
        qrng = np.random.default_rng([seed, 1, i])
        qsets = sample_sets(centers, query_per_class, q, noise_sigma, qrng, first_id=first_id)
        queries.append(Dataset(dim=dim, sets=tuple(qsets), num_classes=num_classes))
    if np.isscalar(query_set_size):
        return gallery, queries[0]
    return gallery, tuple(queries)


# ---------------------------------------------------------------------------
# Set expansion


def expand_sets(
    dataset: Dataset,
    subsets_per_set: int = 50,
    subset_fraction: float = 0.5,
    min_size: int = 10,
    jitter_sigma: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Replace every set by ``subsets_per_set`` random subsets carrying its label.

    Each subset holds ``ceil(subset_fraction * N)`` members drawn without
    replacement. Subsets smaller than ``min_size`` are padded with copies
    of their own members perturbed by Gaussian noise of std
    ``jitter_sigma``. New sets are numbered ``0..`` in output order.
    """
    if int(subsets_per_set) != subsets_per_set or subsets_per_set < 1:
        raise InvalidParameter(f"subsets_per_set must be >= 1, got {subsets_per_set}")
    if not (0 < subset_fraction <= 1):
        raise InvalidParameter(f"subset_fraction must lie in (0, 1], got {subset_fraction}")
    if int(min_size) != min_size or min_size < 1:
        raise InvalidParameter(f"min_size must be >= 1, got {min_size}")
    if not (jitter_sigma >= 0 and math.isfinite(jitter_sigma)):
        raise InvalidParameter(f"jitter_sigma must be >= 0, got {jitter_sigma}")

    rng = np.random.default_rng(seed)
    out = []
    for parent in dataset.sets:
        n = parent.size
        take = min(n, math.ceil(subset_fraction * n))
        for _ in range(subsets_per_set):
            idx = rng.choice(n, size=take, replace=False)
            members = parent.members[idx]
            short = min_size - take
            if short > 0:
                src = members[rng.integers(0, take, size=short)]
                jitter = rng.standard_normal(src.shape) * jitter_sigma
                members = np.concatenate([members, (src + jitter).astype(members.dtype)])
            out.append(ImageSet(set_id=len(out), label=parent.label, members=members))
    return Dataset(
        dim=dataset.dim,
        sets=tuple(out),
        num_classes=dataset.num_classes,
        label_names=dataset.label_names,
    )
