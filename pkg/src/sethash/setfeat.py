"""Parameter-free set aggregation and its gradient.

The aggregate of a set ``S`` with members ``x_1..x_N`` in ``R^d`` is the
concatenation ``(mean, var, min, max, vlad)``. ``vlad`` sums, for every
centroid ``c_k``, the residuals ``x_i - c_k`` of the members whose nearest
centroid is ``c_k``, and the resulting ``K*d`` vector is L2-normalised as a
whole.

Sums run over members in a canonical (lexicographic) order so that the
output is bit-identical under any permutation of the members.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .dataset import ImageSet
from .dictionary import Dictionary, assign_many
from .errors import DimensionMismatch, EmptySet, InvalidParameter, TapeMismatch

FEATURE_MODES = ("all", "stats", "vlad")


@dataclass(frozen=True)
class SetFeature:
    mean: np.ndarray | None
    var: np.ndarray | None
    min: np.ndarray | None
    max: np.ndarray | None
    vlad: np.ndarray | None

    @property
    def concat(self) -> np.ndarray:
        parts = [p for p in (self.mean, self.var, self.min, self.max, self.vlad) if p is not None]
        return np.concatenate(parts)


@dataclass(frozen=True)
class AggregationTape:
    """What ``aggregate_backward`` needs from the forward pass."""

    mode: str
    n: int
    dim: int
    k: int
    argmin: np.ndarray | None
    argmax: np.ndarray | None
    assignments: np.ndarray | None
    vlad_raw: np.ndarray | None
    vlad_norm: float
    fingerprint: int


def feature_length(dim: int, k: int, mode: str = "all") -> int:
    """Width of the concatenated aggregate for a given mode."""
    _check_mode(mode)
    return {"all": 4 * dim + k * dim, "stats": 4 * dim, "vlad": k * dim}[mode]


def infer_mode(width: int, dim: int, k: int) -> str:
    """Recover the aggregation mode from an input width, if unambiguous."""
    matches = [m for m in FEATURE_MODES if feature_length(dim, k, m) == width]
    if len(matches) != 1:
        raise InvalidParameter(
            f"cannot infer aggregation mode from width {width} (d={dim}, K={k}): "
            f"candidates {matches or 'none'}"
        )
    return matches[0]


def _check_mode(mode):
    if mode not in FEATURE_MODES:
        raise InvalidParameter(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def _members(s) -> np.ndarray:
    x = s.members if isinstance(s, ImageSet) else np.asarray(s)
    if x.ndim != 2:
        raise DimensionMismatch(f"members must form an (N, d) array, got shape {x.shape}")
    if x.shape[0] < 1:
        raise EmptySet("cannot aggregate an empty set")
    return np.asarray(x, dtype=np.float64)


def _canonical(x: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically; ties are identical rows, so order is irrelevant."""
    return x[np.lexsort(x.T[::-1])]


def _fingerprint(x: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(x).tobytes())


def set_statistics(s) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise mean, population variance, min and max of the members."""
    x = _members(s)
    xs = _canonical(x)
    mean = xs.sum(axis=0) / xs.shape[0]
    var = ((xs - mean) ** 2).sum(axis=0) / xs.shape[0]
    return mean, var, x.min(axis=0), x.max(axis=0)


def _vlad_parts(x: np.ndarray, dictionary: Dictionary):
    if x.shape[1] != dictionary.dim:
        raise DimensionMismatch(
            f"set dimension {x.shape[1]} does not match dictionary dimension {dictionary.dim}"
        )
    centers = dictionary.centroids.astype(np.float64)
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    assign_sorted = assign_many(xs, centers)
    raw = np.zeros_like(centers)
    np.add.at(raw, assign_sorted, xs - centers[assign_sorted])
    raw = raw.reshape(-1)
    norm = float(np.sqrt(np.dot(raw, raw)))
    assignments = np.empty_like(assign_sorted)
    assignments[order] = assign_sorted
    return raw, norm, assignments


def vlad(s, dictionary: Dictionary) -> tuple[np.ndarray, AggregationTape]:
    """Globally L2-normalised VLAD vector of length ``K*d``.

    A set whose residuals all vanish yields the zero vector.
    """
    x = _members(s)
    raw, norm, assignments = _vlad_parts(x, dictionary)
    out = raw / norm if norm > 0 else np.zeros_like(raw)
    tape = AggregationTape(
        mode="vlad", n=x.shape[0], dim=x.shape[1], k=dictionary.k,
        argmin=None, argmax=None, assignments=assignments,
        vlad_raw=raw, vlad_norm=norm, fingerprint=_fingerprint(x),
    )
    return out, tape


def aggregate(s, dictionary: Dictionary | None, mode: str = "all") -> tuple[SetFeature, AggregationTape]:
    """Compute the set feature and the tape needed to differentiate it.

    ``mode`` selects the statistics block, the VLAD block or both; only
    ``"stats"`` may be used without a dictionary.
    """
    _check_mode(mode)
    x = _members(s)
    n, d = x.shape
    mean = var = mn = mx = v = None
    argmin = argmax = assignments = raw = None
    norm = 0.0
    if mode in ("all", "stats"):
        mean, var, mn, mx = set_statistics(x)
        # np.argmin/argmax return the first occurrence: lowest member index on ties
        argmin = np.argmin(x, axis=0)
        argmax = np.argmax(x, axis=0)
    if mode in ("all", "vlad"):
        if dictionary is None:
            raise InvalidParameter(f"mode {mode!r} needs a dictionary")
        raw, norm, assignments = _vlad_parts(x, dictionary)
        v = raw / norm if norm > 0 else np.zeros_like(raw)
    tape = AggregationTape(
        mode=mode, n=n, dim=d, k=dictionary.k if dictionary is not None else 0,
        argmin=argmin, argmax=argmax, assignments=assignments,
        vlad_raw=raw, vlad_norm=norm, fingerprint=_fingerprint(x),
    )
    return SetFeature(mean, var, mn, mx, v), tape


def aggregate_batch(sets, dictionary: Dictionary | None, mode: str = "all") -> np.ndarray:
    """Stack the concatenated aggregates of many sets into a ``(len(sets), width)`` array."""
    return np.stack([aggregate(s, dictionary, mode)[0].concat for s in sets])


def aggregate_backward(s, dictionary: Dictionary | None, tape: AggregationTape, grad_concat) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. every member, given its gradient w.r.t. the aggregate.

    Min/max route the whole gradient to the recorded extremal member. The
    nearest-centroid assignment is piecewise constant and is held fixed.
    """
    x = _members(s)
    n, d = x.shape
    if tape.n != n or tape.dim != d or tape.fingerprint != _fingerprint(x):
        raise TapeMismatch("tape was not recorded on this set")
    k = dictionary.k if dictionary is not None else 0
    if tape.mode != "stats" and k != tape.k:
        raise TapeMismatch("tape was recorded with a different dictionary")
    g = np.asarray(grad_concat, dtype=np.float64)
    expected = feature_length(d, tape.k, tape.mode)
    if g.shape != (expected,):
        raise DimensionMismatch(f"grad_concat has shape {g.shape}, expected ({expected},)")

    grad = np.zeros((n, d), dtype=np.float64)
    offset = 0
    if tape.mode in ("all", "stats"):
        g_mean, g_var, g_min, g_max = g[0:d], g[d:2 * d], g[2 * d:3 * d], g[3 * d:4 * d]
        offset = 4 * d
        mean = _canonical(x).sum(axis=0) / n
        grad += g_mean / n
        grad += (2.0 / n) * (x - mean) * g_var
        cols = np.arange(d)
        np.add.at(grad, (tape.argmin, cols), g_min)
        np.add.at(grad, (tape.argmax, cols), g_max)
    if tape.mode in ("all", "vlad"):
        g_v = g[offset:offset + tape.k * d]
        if tape.vlad_norm > 0:
            unit = tape.vlad_raw / tape.vlad_norm
            g_raw = (g_v - unit * np.dot(unit, g_v)) / tape.vlad_norm
            grad += g_raw.reshape(tape.k, d)[tape.assignments]
    return grad
