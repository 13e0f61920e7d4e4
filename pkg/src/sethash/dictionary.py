"""K-Means codebook used for VLAD assignment.

Lloyd iterations with k-means++ seeding. An emptied cluster is moved to the
point that lies farthest from its currently assigned centroid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    BadMagic,
    CorruptPayload,
    DimensionMismatch,
    InvalidParameter,
    IoFailure,
    NonFiniteValue,
    TooFewVectors,
    UnsupportedVersion,
)

SDIC_MAGIC = b"SDIC"
SDIC_VERSION = 1

# rows per block when materialising (rows, K, d) difference tensors
_ASSIGN_BLOCK = 4096


@dataclass(frozen=True, eq=False)
class Dictionary:
    """``k`` centroids of dimension ``dim``, stored as 32-bit floats."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise InvalidParameter(f"centroids must be a non-empty (k, d) array, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NonFiniteValue("centroids contain NaN or Inf")
        c = np.array(c, dtype=np.float32, copy=True)
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.centroids.shape == other.centroids.shape and np.array_equal(
            self.centroids.view(np.uint32), other.centroids.view(np.uint32)
        )

    __hash__ = None


class LloydResult(NamedTuple):
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact squared distances ``(n, k)`` from explicit differences.

    The expanded ``|x|^2 - 2x.c + |c|^2`` form is avoided on purpose: it
    perturbs exact ties and the tie-break rule must see them.
    """
    out = np.empty((x.shape[0], centers.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], _ASSIGN_BLOCK):
        block = x[start:start + _ASSIGN_BLOCK]
        diff = block[:, None, :] - centers[None, :, :]
        out[start:start + _ASSIGN_BLOCK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign_many(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-centroid index for each row of ``x``; ties go to the lowest index."""
    return np.argmin(_sq_dists(x, centers), axis=1)


def assign(x, dictionary: Dictionary) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dictionary.dim:
        raise DimensionMismatch(
            f"vector of shape {x.shape} does not match dictionary dimension {dictionary.dim}"
        )
    return int(assign_many(x[None, :], dictionary.centroids.astype(np.float64))[0])


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Classic D^2 seeding (one candidate per step)."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen seed
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, tol: float) -> LloydResult:
    """Run Lloyd iterations from ``centers`` until displacement < ``tol``.

    ``inertia_history[i]`` is the objective after the i-th update step
    (index 0 is the objective of the starting centers).
    """
    x = np.asarray(x, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64, copy=True)
    k = centers.shape[0]
    d2 = _sq_dists(x, centers)
    labels = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(len(x)), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        new[filled] /= counts[filled, None]

        empty = np.flatnonzero(~filled)
        if empty.size:
            own = d2[np.arange(len(x)), labels].copy()
            for c in empty:
                far = int(np.argmax(own))
                new[c] = x[far]
                own[far] = -1.0

        shift = float(np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1))))
        centers = new
        d2 = _sq_dists(x, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        if shift < tol:
            break
    return LloydResult(centers, labels, history, n_iter)


def kmeans_fit(
    vectors,
    k: int = 16,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> Dictionary:
    """Fit a ``k``-centroid dictionary to the rows of ``vectors``."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidParameter(f"vectors must be a 2-D array, got shape {x.shape}")
    if int(k) != k or k < 1:
        raise InvalidParameter(f"k must be a positive integer, got {k}")
    if max_iters < 0 or tol < 0:
        raise InvalidParameter("max_iters and tol must be non-negative")
    if x.shape[0] < k:
        raise TooFewVectors(f"need at least k={k} vectors, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("input vectors contain NaN or Inf")
    rng = np.random.default_rng(seed)
    init = kmeans_plusplus(x, k, rng)
    result = lloyd(x, init, max_iters, tol)
    return Dictionary(result.centers)


def kmeans_objective(x, centers) -> float:
    d2 = _sq_dists(np.asarray(x, dtype=np.float64), np.asarray(centers, dtype=np.float64))
    return float(d2.min(axis=1).sum())


# ---------------------------------------------------------------------------
# SDIC standalone file


def dictionary_to_bytes(dictionary: Dictionary) -> bytes:
    return struct.pack("<II", dictionary.k, dictionary.dim) + np.ascontiguousarray(
        dictionary.centroids, dtype="<f4"
    ).tobytes()


def dictionary_from_buffer(buf: bytes, offset: int = 0) -> tuple[Dictionary, int]:
    """Parse ``k u32, dim u32, k*dim f32`` at ``offset``; return it and the end offset."""
    if len(buf) < offset + 8:
        raise CorruptPayload("truncated dictionary header")
    k, dim = struct.unpack_from("<II", buf, offset)
    offset += 8
    nbytes = 4 * k * dim
    if k < 1 or dim < 1 or len(buf) < offset + nbytes:
        raise CorruptPayload(f"dictionary payload for k={k}, dim={dim} is truncated or invalid")
    c = np.frombuffer(buf, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim)
    try:
        return Dictionary(c), offset + nbytes
    except NonFiniteValue as exc:
        raise CorruptPayload(str(exc)) from exc


def save_dictionary(dictionary: Dictionary, path: str | Path) -> None:
    data = struct.pack("<4sI", SDIC_MAGIC, SDIC_VERSION) + dictionary_to_bytes(dictionary)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_dictionary(path: str | Path) -> Dictionary:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != SDIC_MAGIC:
        raise BadMagic(f"{path}: not an SDIC file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SDIC_VERSION:
        raise UnsupportedVersion(f"{path}: SDIC version {version} is not supported")
    dictionary, end = dictionary_from_buffer(raw, 8)
    if end != len(raw):
        raise CorruptPayload(f"{path}: {len(raw) - end} trailing bytes")
    return dictionary
