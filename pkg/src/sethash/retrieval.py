"""Binary codes, Hamming ranking and retrieval metrics.

Codes are packed into little-endian 64-bit words: bit ``j`` of a code is
bit ``j % 64`` of word ``j // 64``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .dataset import ImageSet
from .dictionary import Dictionary
from .errors import (
    BadMagic,
    CorruptPayload,
    EmptyIndex,
    EmptyInput,
    IoFailure,
    LabelAbsent,
    LengthMismatch,
    UnsupportedVersion,
)
from .hashnet import HashNet, binarize, forward
from .setfeat import aggregate, infer_mode

SCOD_MAGIC = b"SCOD"
SCOD_VERSION = 1
_SCOD_HEADER = struct.Struct("<4sIIQ")


def words_for(nbits: int) -> int:
    return (nbits + 63) // 64


def pack_bits(bits) -> np.ndarray:
    """Pack a ``(b,)`` or ``(n, b)`` boolean array into ``uint64`` words."""
    bits = np.asarray(bits, dtype=bool)
    single = bits.ndim == 1
    bits = np.atleast_2d(bits)
    n, b = bits.shape
    padded = np.zeros((n, words_for(b) * 64), dtype=bool)
    padded[:, :b] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64)
    return words[0] if single else words


def unpack_bits(words, nbits: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    single = words.ndim == 1
    words = np.atleast_2d(words)
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :nbits].astype(bool)
    return bits[0] if single else bits


@dataclass(frozen=True, eq=False)
class BinaryCode:
    words: np.ndarray
    nbits: int

    @classmethod
    def from_bits(cls, bits) -> "BinaryCode":
        bits = np.asarray(bits, dtype=bool)
        return cls(pack_bits(bits), bits.shape[0])

    @property
    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.nbits)

    def __len__(self):
        return self.nbits

    def __eq__(self, other):
        if not isinstance(other, BinaryCode):
            return NotImplemented
        return self.nbits == other.nbits and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.nbits, self.words.tobytes()))

    def __repr__(self):
        return f"BinaryCode({''.join('1' if v else '0' for v in self.bits)})"


def hamming(a: BinaryCode, b: BinaryCode) -> int:
    """Number of differing bits (XOR + popcount over packed words)."""
    if a.nbits != b.nbits:
        raise LengthMismatch(f"codes have {a.nbits} and {b.nbits} bits")
    return int(np.bitwise_count(np.bitwise_xor(a.words, b.words)).sum())


def hamming_many(words: np.ndarray, query_words: np.ndarray) -> np.ndarray:
    """Distances from one packed query to each row of a ``(n, W)`` word matrix."""
    return np.bitwise_count(np.bitwise_xor(words, query_words[None, :])).sum(axis=1, dtype=np.int64)


def hamming_matrix(a_words: np.ndarray, b_words: np.ndarray) -> np.ndarray:
    """All-pairs distances ``(n, m)`` between two packed word matrices."""
    x = np.bitwise_xor(a_words[:, None, :], b_words[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


# ---------------------------------------------------------------------------
# Encoding


def encode_features(net: HashNet, features) -> np.ndarray:
    """Packed codes ``(n, W)`` for a batch of set features."""
    h, _ = forward(net, np.atleast_2d(features))
    return pack_bits(binarize(h))


def encode_set(s: ImageSet, dictionary: Dictionary, net: HashNet, mode: str | None = None) -> BinaryCode:
    """Aggregate, hash and threshold one set.

    ``mode`` defaults to whatever aggregation the network's input width implies.
    """
    if mode is None:
        mode = infer_mode(net.input_dim, s.dim, dictionary.k)
    feat, _ = aggregate(s, dictionary, mode)
    h, _ = forward(net, feat.concat)
    return BinaryCode.from_bits(binarize(h))


# ---------------------------------------------------------------------------
# Index and ranking


class RankedEntry(NamedTuple):
    position: int
    distance: int
    label: int


@dataclass(frozen=True, eq=False)
class HammingIndex:
    words: np.ndarray
    labels: np.ndarray
    set_ids: np.ndarray
    nbits: int

    def __post_init__(self):
        words = np.atleast_2d(np.asarray(self.words, dtype=np.uint64))
        labels = np.asarray(self.labels, dtype=np.int64)
        set_ids = np.asarray(self.set_ids, dtype=np.int64)
        if words.shape[0] == 0:
            raise EmptyIndex("index holds no codes")
        if not (words.shape[0] == labels.shape[0] == set_ids.shape[0]):
            raise LengthMismatch("codes, labels and set_ids differ in length")
        if words.shape[1] != words_for(self.nbits):
            raise LengthMismatch(f"{words.shape[1]} words per code cannot hold {self.nbits} bits")
        for name, v in (("words", words), ("labels", labels), ("set_ids", set_ids)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def build(cls, codes: Sequence[BinaryCode], labels, set_ids=None) -> "HammingIndex":
        if not codes:
            raise EmptyIndex("index holds no codes")
        nbits = codes[0].nbits
        if any(c.nbits != nbits for c in codes):
            raise LengthMismatch("gallery codes differ in length")
        if set_ids is None:
            set_ids = np.arange(len(codes))
        return cls(np.stack([c.words for c in codes]), labels, set_ids, nbits)

    def __len__(self):
        return self.words.shape[0]

    def code(self, i: int) -> BinaryCode:
        return BinaryCode(self.words[i].copy(), self.nbits)

    def distances(self, code: BinaryCode) -> np.ndarray:
        if code.nbits != self.nbits:
            raise LengthMismatch(f"query has {code.nbits} bits, index has {self.nbits}")
        return hamming_many(self.words, code.words)


def _rank(distances: np.ndarray) -> np.ndarray:
    # stable sort: equal distances keep gallery order
    return np.argsort(distances, kind="stable")


def query(index: HammingIndex, code: BinaryCode, k: int | None = None) -> list[RankedEntry]:
    """Gallery entries sorted by ``(distance, position)``; ``k=None`` keeps all."""
    if len(index) == 0:
        raise EmptyIndex("index holds no codes")
    dist = index.distances(code)
    order = _rank(dist)
    if k is not None:
        order = order[:k]
    return [RankedEntry(int(i), int(dist[i]), int(index.labels[i])) for i in order]


def average_precision(relevant_in_rank_order) -> float:
    """Mean over relevant ranks ``r`` of (relevant items in top ``r``) / ``r``."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def _check_queries(queries, index):
    if len(index) == 0:
        raise EmptyIndex("index holds no codes")
    if not queries:
        raise EmptyInput("no queries given")


def mean_average_precision(queries: Sequence[tuple[BinaryCode, int]], index: HammingIndex) -> float:
    """MAP over full-gallery rankings; a gallery entry is relevant iff its label matches."""
    _check_queries(queries, index)
    present = set(index.labels.tolist())
    aps = []
    for code, label in queries:
        if label not in present:
            raise LabelAbsent(f"query label {label} has no gallery entry")
        order = _rank(index.distances(code))
        aps.append(average_precision(index.labels[order] == label))
    return float(np.mean(aps))


def nn_classify_accuracy(queries: Sequence[tuple[BinaryCode, int]], index: HammingIndex) -> float:
    """Fraction of queries whose nearest gallery entry (lowest position on ties) shares their label."""
    _check_queries(queries, index)
    correct = 0
    for code, label in queries:
        nearest = int(np.argmin(index.distances(code)))
        correct += int(index.labels[nearest] == label)
    return correct / len(queries)


def map_from_distances(dist: np.ndarray, query_labels, gallery_labels) -> float:
    """MAP for an arbitrary ``(queries, gallery)`` distance matrix, ties by gallery position."""
    gallery_labels = np.asarray(gallery_labels)
    aps = []
    for row, label in zip(np.asarray(dist), query_labels):
        if not np.any(gallery_labels == label):
            raise LabelAbsent(f"query label {label} has no gallery entry")
        aps.append(average_precision(gallery_labels[_rank(row)] == label))
    return float(np.mean(aps))


def image_baseline_distance(query_codes: Sequence[BinaryCode], gallery_codes: Sequence[BinaryCode]) -> float:
    """Set distance from per-image codes: mean over query images of the mean Hamming distance to the target's images."""
    if not query_codes or not gallery_codes:
        raise EmptyInput("both sides need at least one image code")
    nbits = query_codes[0].nbits
    if any(c.nbits != nbits for c in (*query_codes, *gallery_codes)):
        raise LengthMismatch("image codes differ in length")
    qw = np.stack([c.words for c in query_codes])
    gw = np.stack([c.words for c in gallery_codes])
    return float(hamming_matrix(qw, gw).mean())


def group_codes(codes: Iterable[tuple[int, int, BinaryCode]]) -> list[tuple[int, int, list[BinaryCode]]]:
    """Group ``(set_id, label, code)`` records by ``set_id`` in order of first appearance."""
    groups: dict[int, tuple[int, list[BinaryCode]]] = {}
    for sid, label, code in codes:
        if sid in groups and groups[sid][0] != label:
            raise CorruptPayload(f"set {sid} appears with two labels")
        groups.setdefault(sid, (label, []))[1].append(code)
    return [(sid, label, members) for sid, (label, members) in groups.items()]


def image_baseline_map(query_groups, gallery_groups) -> float:
    """MAP when set distance is the mean average image distance between per-image codes."""
    if not query_groups or not gallery_groups:
        raise EmptyInput("both sides need at least one set")
    dist = np.array(
        [[image_baseline_distance(q[2], g[2]) for g in gallery_groups] for q in query_groups]
    )
    return map_from_distances(dist, [q[1] for q in query_groups], [g[1] for g in gallery_groups])


# ---------------------------------------------------------------------------
# SCOD code file


@dataclass(frozen=True, eq=False)
class CodeFile:
    """Parallel arrays of set ids, labels and packed codes, as stored in SCOD files."""

    set_ids: np.ndarray
    labels: np.ndarray
    words: np.ndarray
    nbits: int

    def __len__(self):
        return len(self.set_ids)

    def __eq__(self, other):
        if not isinstance(other, CodeFile):
            return NotImplemented
        return (
            self.nbits == other.nbits
            and np.array_equal(self.set_ids, other.set_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None

    def codes(self) -> list[BinaryCode]:
        return [BinaryCode(w.copy(), self.nbits) for w in self.words]

    def index(self) -> HammingIndex:
        return HammingIndex(self.words, self.labels, self.set_ids, self.nbits)

    def records(self):
        return [(int(s), int(l), c) for s, l, c in zip(self.set_ids, self.labels, self.codes())]


def save_codes(codes: CodeFile, path: str | Path) -> None:
    n = len(codes)
    w = words_for(codes.nbits)
    rec = np.zeros(n, dtype=[("set_id", "<u4"), ("label", "<u4"), ("words", "<u8", (w,))])
    rec["set_id"] = codes.set_ids
    rec["label"] = codes.labels
    rec["words"] = np.asarray(codes.words, dtype=np.uint64).reshape(n, w)
    data = _SCOD_HEADER.pack(SCOD_MAGIC, SCOD_VERSION, codes.nbits, n) + rec.tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_codes(path: str | Path) -> CodeFile:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[:4] != SCOD_MAGIC:
        raise BadMagic(f"{path}: not an SCOD file")
    if len(raw) < _SCOD_HEADER.size:
        raise CorruptPayload(f"{path}: truncated header")
    _, version, nbits, n = _SCOD_HEADER.unpack_from(raw, 0)
    if version != SCOD_VERSION:
        raise UnsupportedVersion(f"{path}: SCOD version {version} is not supported")
    if nbits < 1:
        raise CorruptPayload(f"{path}: code length 0")
    w = words_for(nbits)
    dtype = np.dtype([("set_id", "<u4"), ("label", "<u4"), ("words", "<u8", (w,))])
    body = raw[_SCOD_HEADER.size:]
    if len(body) != n * dtype.itemsize:
        raise CorruptPayload(f"{path}: payload does not hold {n} codes of {nbits} bits")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    words = rec["words"].astype(np.uint64).reshape(n, w)
    if nbits % 64:
        # bits past nbits must be clear
        tail_mask = ~np.uint64((1 << (nbits % 64)) - 1)
        if np.any(words[:, -1] & tail_mask):
            raise CorruptPayload(f"{path}: padding bits set beyond code length")
    return CodeFile(
        rec["set_id"].astype(np.int64), rec["label"].astype(np.int64), words, int(nbits)
    )
