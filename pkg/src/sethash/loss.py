"""Training objective: triplet hinge, quantization and balance terms.

``total = j0 + lambda1 * j1 - lambda2 * j2`` where ``j0`` is the mean triplet
hinge on squared Euclidean code distances, ``j1`` is half the squared
Frobenius distance between real codes and their binarization, and ``j2`` is
the mean squared row norm of the real codes (maximized, hence the minus).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, InvalidParameter, ShapeMismatch
from .hashnet import binarize

DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 0.1


@dataclass(frozen=True)
class TripletBatch:
    """Real codes of anchors, positives and negatives, each ``(T, b)``."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (self.anchor, self.positive, self.negative))
        if not (a.shape == p.shape == n.shape):
            raise ShapeMismatch(f"triplet parts disagree: {a.shape}, {p.shape}, {n.shape}")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "positive", p)
        object.__setattr__(self, "negative", n)

    def __len__(self):
        return self.anchor.shape[0]

    @property
    def codes(self) -> np.ndarray:
        """All ``3T`` real codes stacked as anchors, positives, negatives."""
        return np.concatenate([self.anchor, self.positive, self.negative])

    @property
    def binary(self) -> np.ndarray:
        return binarize(self.codes)


@dataclass(frozen=True)
class LossBreakdown:
    j0: float
    j1: float
    j2: float
    alpha: float
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2

    @property
    def total(self) -> float:
        return self.j0 + self.lambda1 * self.j1 - self.lambda2 * self.j2


def margin_for_bits(b: int) -> float:
    """Triplet margin ``sqrt(b) / 2``: grows sub-linearly with code length."""
    if int(b) != b or b < 1:
        raise InvalidParameter(f"code length must be a positive integer, got {b}")
    return 0.5 * math.sqrt(b)


def triplet_loss(ha, hp, hn, alpha: float):
    """Hinge ``max(0, |ha-hp|^2 - |ha-hn|^2 + alpha)`` and its gradients.

    Returns ``(value, (g_anchor, g_positive, g_negative))``; the gradient
    is zero unless the hinge argument is strictly positive.
    """
    ha, hp, hn = (np.asarray(v, dtype=np.float64) for v in (ha, hp, hn))
    if not (ha.shape == hp.shape == hn.shape) or ha.ndim != 1:
        raise DimensionMismatch(f"codes must be equal-length vectors: {ha.shape}, {hp.shape}, {hn.shape}")
    if alpha < 0:
        raise InvalidParameter(f"margin must be >= 0, got {alpha}")
    dp = ha - hp
    dn = ha - hn
    arg = float(dp @ dp - dn @ dn + alpha)
    if arg <= 0:
        z = np.zeros_like(ha)
        return 0.0, (z, z.copy(), z.copy())
    return arg, (2.0 * (hn - hp), -2.0 * dp, 2.0 * dn)


def batch_triplet_loss(batch: TripletBatch, alpha: float):
    """Mean hinge over the batch; gradients are scaled by ``1/T``."""
    t = len(batch)
    if t == 0:
        raise EmptyBatch("triplet batch is empty")
    if alpha < 0:
        raise InvalidParameter(f"margin must be >= 0, got {alpha}")
    a, p, n = batch.anchor, batch.positive, batch.negative
    dp = a - p
    dn = a - n
    arg = np.einsum("ij,ij->i", dp, dp) - np.einsum("ij,ij->i", dn, dn) + alpha
    active = (arg > 0)[:, None]
    j0 = float(np.where(arg > 0, arg, 0.0).sum() / t)
    scale = active * (2.0 / t)
    return j0, (scale * (n - p), -scale * dp, scale * dn)


def quantization_loss(h, b=None):
    """``0.5 * |B - H|_F^2`` with ``B`` held constant; gradient ``H - B``."""
    h = np.asarray(h, dtype=np.float64)
    b = binarize(h) if b is None else np.asarray(b)
    if b.shape != h.shape:
        raise ShapeMismatch(f"binary codes {b.shape} do not match real codes {h.shape}")
    diff = h - b.astype(np.float64)
    return 0.5 * float(np.sum(diff * diff)), diff


def balance_term(h, n: int | None = None):
    """``trace(H H^T) / N`` and its gradient ``2H / N``."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if n is None:
        n = h.shape[0]
    if n != h.shape[0]:
        raise ShapeMismatch(f"sample count {n} does not match {h.shape[0]} code rows")
    return float(np.sum(h * h)) / n, (2.0 / n) * h


def total_loss(
    batch: TripletBatch,
    alpha: float,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    binary=None,
    average_quantization: bool = False,
):
    """Composite loss and its gradient w.r.t. every real code in the batch.

    ``binary`` overrides the binarization snapshot used by the
    quantization term (it defaults to thresholding the batch codes).
    ``average_quantization`` divides that term by the number of codes,
    ``3T``, putting it on the same per-sample footing as the other two.
    Returns ``(LossBreakdown, (g_anchor, g_positive, g_negative))``.
    """
    t = len(batch)
    j0, (ga, gp, gn) = batch_triplet_loss(batch, alpha)
    h = batch.codes
    j1, g1 = quantization_loss(h, binary)
    if average_quantization:
        j1, g1 = j1 / (3 * t), g1 / (3 * t)
    j2, g2 = balance_term(h, 3 * t)
    g = lambda1 * g1 - lambda2 * g2
    grads = (ga + g[:t], gp + g[t:2 * t], gn + g[2 * t:])
    return LossBreakdown(j0, j1, j2, alpha, lambda1, lambda2), grads
