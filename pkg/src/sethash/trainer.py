"""Triplet sampling, the SGD training loop, and end-to-end gradient verification."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import hashnet
from .dataset import Dataset, ImageSet
from .dictionary import Dictionary, kmeans_fit
from .errors import InvalidParameter, NoValidTriplet, TieEncountered
from .loss import DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, TripletBatch, margin_for_bits, total_loss
from .retrieval import HammingIndex, encode_features, mean_average_precision, BinaryCode
from .setfeat import FEATURE_MODES, aggregate, aggregate_backward, aggregate_batch, feature_length, vlad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``layers`` lists the hidden widths followed by the code length; the
    input width is derived from the data dimension, ``k`` and ``features``.
    ``alpha=None`` selects ``margin_for_bits(code_bits)``.
    ``dictionary_refresh=0`` fits the codebook once; ``E > 0`` refits it
    every ``E`` epochs. ``standardize`` trains on centred, rescaled
    aggregates (see ``train``). ``quantization="mean"`` averages the
    quantization term over the batch codes instead of summing it
    (``"sum"``); the summed form outweighs the triplet term by the batch
    size and freezes the codes early.
    """

    layers: tuple[int, ...] = (512, 32)
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    alpha: float | None = None
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 30
    triplets_per_epoch: int = 3000
    epochs: int = 200
    k: int = 16
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-4
    features: str = "all"
    seed: int = 0
    dictionary_refresh: int = 0
    standardize: bool = True
    quantization: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        self.validate()

    @property
    def code_bits(self) -> int:
        return self.layers[-1]

    @property
    def margin(self) -> float:
        return margin_for_bits(self.code_bits) if self.alpha is None else float(self.alpha)

    def validate(self) -> None:
        if not self.layers or min(self.layers) < 1:
            raise InvalidParameter(f"layers must be positive widths, got {self.layers}")
        for name in ("batch_size", "triplets_per_epoch", "k", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be >= 1")
        if self.epochs < 0 or self.dictionary_refresh < 0:
            raise InvalidParameter("epochs and dictionary_refresh must be >= 0")
        if not (self.learning_rate > 0):
            raise InvalidParameter(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise InvalidParameter(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.alpha is not None and not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise InvalidParameter(f"alpha must be >= 0, got {self.alpha}")
        if self.quantization not in ("mean", "sum"):
            raise InvalidParameter(f"quantization must be 'mean' or 'sum', got {self.quantization!r}")
        if self.features not in FEATURE_MODES:
            raise InvalidParameter(f"features must be one of {FEATURE_MODES}, got {self.features!r}")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class EpochRecord:
    epoch: int
    j0: float
    j1: float
    j2: float
    total: float
    seconds: float
    val_map: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.epochs], dtype=np.float64)

    def to_csv(self, path: str | Path) -> None:
        with_val = any(r.val_map is not None for r in self.epochs)
        # ``seconds`` is wall time, the only column that differs between identical runs
        header = ["epoch", "j0", "j1", "j2", "total", "seconds"] + (["val_map"] if with_val else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.epochs:
                row = [r.epoch, f"{r.j0:.9g}", f"{r.j1:.9g}", f"{r.j2:.9g}", f"{r.total:.9g}", f"{r.seconds:.6f}"]
                if with_val:
                    row.append("" if r.val_map is None else f"{r.val_map:.6f}")
                w.writerow(row)


class TrainResult(NamedTuple):
    net: hashnet.HashNet
    dictionary: Dictionary
    log: TrainLog


# ---------------------------------------------------------------------------
# Triplet sampling


def sample_triplet_indices(labels, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, 3)`` array of (anchor, positive, negative) set indices.

    Anchors are uniform over sets whose class holds at least two sets,
    positives uniform over the anchor's class minus the anchor, negatives
    uniform over every set of another class.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise NoValidTriplet("need at least two classes")
    if not np.any(counts >= 2):
        raise NoValidTriplet("no class holds two or more sets")
    order = np.argsort(labels, kind="stable")
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cls_of = np.searchsorted(classes, labels)
    # position of each set inside its class block of `order`
    rank_in_class = np.empty(len(labels), dtype=np.int64)
    rank_in_class[order] = np.arange(len(labels)) - np.repeat(start, counts)

    eligible = np.flatnonzero(counts[cls_of] >= 2)
    anchors = eligible[rng.integers(0, eligible.size, size=n)]
    c = cls_of[anchors]
    j = rng.integers(0, counts[c] - 1)
    j = j + (j >= rank_in_class[anchors])
    positives = order[start[c] + j]
    m = rng.integers(0, len(labels) - counts[c])
    m = m + np.where(m >= start[c], counts[c], 0)
    negatives = order[m]
    return np.stack([anchors, positives, negatives], axis=1)


def sample_triplets(dataset: Dataset, n: int, seed=0) -> list[Triplet]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = sample_triplet_indices(dataset.labels, n, rng)
    return [Triplet(int(a), int(p), int(q)) for a, p, q in idx]


# ---------------------------------------------------------------------------
# Training


def _stream_seeds(seed: int) -> tuple[int, int, np.random.Generator]:
    """Seeds for k-means, network init and triplet sampling.

    The network is initialised with ``seed`` itself, so an untrained model
    is exactly ``hashnet.init(dims, seed)``.
    """
    kmeans_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return int(kmeans_ss.generate_state(1)[0]), int(seed), np.random.default_rng(sample_ss)


def fit_dictionary(dataset: Dataset, config: TrainConfig, seed: int) -> Dictionary:
    return kmeans_fit(dataset.all_members(), config.k, config.kmeans_iters, config.kmeans_tol, seed)


def feature_scaling(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and a single RMS scale of the centred training aggregates.

    One scale for every dimension keeps the relative weight of the
    aggregate blocks intact while bringing activations into the range
    where the sigmoid layer still responds.
    """
    mu = feats.mean(axis=0)
    rms = float(np.sqrt(np.mean((feats - mu) ** 2)))
    return mu, np.full(feats.shape[1], rms if rms > 1e-12 else 1.0)


def fold_scaling(net: hashnet.HashNet, mu: np.ndarray, sd: np.ndarray) -> hashnet.HashNet:
    """Equivalent network on raw features for one trained on ``(f - mu) / sd``."""
    w = net.weights[0].astype(np.float64) / sd[None, :]
    b = net.biases[0].astype(np.float64) - w @ mu
    dtype = net.weights[0].dtype
    return hashnet.HashNet(
        [w.astype(dtype)] + [x.copy() for x in net.weights[1:]],
        [b.astype(dtype)] + [x.copy() for x in net.biases[1:]],
    )


def _setup(dataset: Dataset, config: TrainConfig):
    kmeans_seed, init_seed, rng = _stream_seeds(config.seed)
    dictionary = fit_dictionary(dataset, config, kmeans_seed)
    feats = aggregate_batch(dataset.sets, dictionary, config.features)
    net = hashnet.init((feats.shape[1], *config.layers), seed=init_seed)
    return dictionary, feats, net, kmeans_seed, rng


def _raw_net(net, scaling):
    return net if scaling is None else fold_scaling(net, *scaling)


def initial_model(dataset: Dataset, config: TrainConfig) -> tuple[hashnet.HashNet, Dictionary]:
    """The fitted dictionary and the untrained ``hashnet.init`` network."""
    dictionary, _, net, _, _ = _setup(dataset, config)
    return net, dictionary


def _apply_momentum(params, grads, velocity, lr, momentum):
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g
        p += v


MemberGradHook = Callable[[int, np.ndarray], None]


def train(
    dataset: Dataset,
    config: TrainConfig,
    validation: tuple[Dataset, Dataset] | None = None,
    member_grad_hook: MemberGradHook | None = None,
) -> TrainResult:
    """Fit the dictionary, then train the hashing head with momentum SGD.

    Member features are fixed inputs here, so set aggregates are computed
    once per dictionary. With ``config.standardize`` the network sees
    aggregates centred by their training mean and divided by one global
    RMS scale, and the returned network has that map folded into its first
    layer, so it consumes raw aggregates like any other. With zero epochs
    nothing is folded and the result is the plain initialisation.

    When ``member_grad_hook`` is given, every batch also back-propagates
    through the aggregation and calls ``hook(set_index, grad)`` with the
    ``(N, d)`` gradient of the batch loss w.r.t. that set's members, which
    is where a trainable feature extractor would attach.

    ``validation`` is a ``(gallery, queries)`` pair; when present the
    query MAP against the gallery is logged after every epoch.
    """
    if not isinstance(config, TrainConfig):
        raise InvalidParameter("config must be a TrainConfig")
    dictionary, raw_feats, net, kmeans_seed, rng = _setup(dataset, config)
    mode = config.features

    def prepare(raw):
        scaling = feature_scaling(raw) if config.standardize else None
        z = raw if scaling is None else (raw - scaling[0]) / scaling[1]
        return z.astype(np.float32), scaling

    feats, scaling = prepare(raw_feats)
    train_log = TrainLog()
    if config.epochs == 0:
        return TrainResult(net, dictionary, train_log)

    labels = dataset.labels
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    alpha = config.margin
    avg_q = config.quantization == "mean"

    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        if config.dictionary_refresh and epoch > 1 and (epoch - 1) % config.dictionary_refresh == 0:
            dictionary = fit_dictionary(dataset, config, kmeans_seed + epoch)
            feats, scaling = prepare(aggregate_batch(dataset.sets, dictionary, mode))

        trip = sample_triplet_indices(labels, config.triplets_per_epoch, rng)
        sums = np.zeros(4)
        for s in range(0, len(trip), config.batch_size):
            chunk = trip[s:s + config.batch_size]
            t = len(chunk)
            rows = np.concatenate([chunk[:, 0], chunk[:, 1], chunk[:, 2]])
            h, tape = hashnet.forward(net, feats[rows])
            batch = TripletBatch(h[:t], h[t:2 * t], h[2 * t:])
            parts, grads = total_loss(
                batch, alpha, config.lambda1, config.lambda2, average_quantization=avg_q
            )
            dws, dbs, g_feat = hashnet.backward(
                net, tape, np.concatenate(grads), input_grad=member_grad_hook is not None
            )
            if member_grad_hook is not None:
                if scaling is not None:
                    g_feat = g_feat / scaling[1]
                _member_grads(dataset, dictionary, mode, rows, g_feat, member_grad_hook)
            step_grads = [g for pair in zip(dws, dbs) for g in pair]
            _apply_momentum(params, step_grads, velocity, config.learning_rate, config.momentum)
            sums += t * np.array([parts.j0, parts.j1, parts.j2, parts.total])

        means = sums / len(trip)
        val_map = None
        if validation is not None:
            val_map = evaluate_map(_raw_net(net, scaling), dictionary, validation[0], validation[1], mode)
        rec = EpochRecord(epoch, *means.tolist(), time.perf_counter() - tic, val_map)
        train_log.epochs.append(rec)
        log.debug("epoch %d j0=%.5f j1=%.5f j2=%.5f total=%.5f", epoch, *means)
    return TrainResult(_raw_net(net, scaling), dictionary, train_log)


def _member_grads(dataset, dictionary, mode, rows, g_feat, hook):
    acc: dict[int, np.ndarray] = {}
    for r, set_index in enumerate(rows):
        s = dataset.sets[set_index]
        _, tape = aggregate(s, dictionary, mode)
        g = aggregate_backward(s, dictionary, tape, g_feat[r])
        acc[int(set_index)] = acc[int(set_index)] + g if int(set_index) in acc else g
    for set_index, g in acc.items():
        hook(set_index, g)


def encode_dataset(net, dictionary, dataset: Dataset, mode: str = "all") -> np.ndarray:
    """Packed codes ``(len(dataset), W)``, one per set."""
    return encode_features(net, aggregate_batch(dataset.sets, dictionary, mode))


def evaluate_map(net, dictionary, gallery: Dataset, queries: Dataset, mode: str = "all") -> float:
    index = HammingIndex(
        encode_dataset(net, dictionary, gallery, mode),
        gallery.labels,
        [s.set_id for s in gallery.sets],
        net.code_bits,
    )
    qwords = encode_dataset(net, dictionary, queries, mode)
    qs = [(BinaryCode(w, net.code_bits), int(l)) for w, l in zip(qwords, queries.labels)]
    return mean_average_precision(qs, index)


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    """Worst relative error per parameter group over all accepted probes.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """

    errors: dict[str, float]
    probes_used: int
    probes_rejected: int
    step: float
    floor: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def _rel_err(a, n, floor):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _second_gap(values: np.ndarray, axis: int, largest: bool) -> np.ndarray:
    """Gap between the best and second-best entry along ``axis``."""
    v = np.sort(values, axis=axis)
    if largest:
        v = np.flip(v, axis=axis)
        return np.abs(np.take(v, 0, axis=axis) - np.take(v, 1, axis=axis))
    return np.take(v, 1, axis=axis) - np.take(v, 0, axis=axis)


def _is_tie_free(members_list, dictionary, mode, tape, hinge_args, margin) -> bool:
    for z in tape.preacts[:-1]:
        if np.any(np.abs(z) < margin):
            return False
    if np.any(np.abs(hinge_args) < margin):
        return False
    for x in members_list:
        if x.shape[0] >= 2 and mode in ("all", "stats"):
            if np.any(_second_gap(x, 0, False) < margin) or np.any(_second_gap(x, 0, True) < margin):
                return False
        if mode in ("all", "vlad") and dictionary.k >= 2:
            c = dictionary.centroids.astype(np.float64)
            dist = np.sqrt(((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
            if np.any(_second_gap(dist, 1, False) < margin):
                return False
            # L2 normalisation is singular at a zero residual sum
            if vlad(x, dictionary)[1].vlad_norm < margin:
                return False
    return True


def grad_check(
    sample: Dataset | Sequence[ImageSet],
    config: TrainConfig,
    num_probes: int = 5,
    seed: int = 0,
    triplets_per_probe: int = 2,
    step: float = 1e-5,
    floor: float = 1e-6,
    tie_margin: float = 1e-3,
    max_resample: int = 10,
    aggregate_backward_fn=aggregate_backward,
    net_backward_fn=hashnet.backward,
) -> GradCheckReport:
    """Compare analytic gradients of the composite loss with central differences.

    Checked groups are every weight and bias of the network and every
    member entry of the sets in the probe's triplets (through the
    aggregation). Each probe draws a fresh float64 network and triplet
    batch; probes sitting within ``tie_margin`` of a kink (ReLU, hinge,
    min/max, nearest-centroid, zero VLAD norm) are rejected and redrawn. The binarization
    used by the quantization term is frozen at the probe point.

    The two ``*_fn`` arguments let a harness substitute a broken backward
    pass to confirm that the check catches it.
    """
    if not isinstance(sample, Dataset):
        sample = Dataset(dim=sample[0].dim, sets=tuple(sample), num_classes=max(s.label for s in sample) + 1)
    mode = config.features
    rng = np.random.default_rng(seed)
    dictionary = None
    if mode != "stats":
        dictionary = kmeans_fit(sample.all_members(), config.k, config.kmeans_iters, config.kmeans_tol, seed)
    k = dictionary.k if dictionary is not None else 0
    dims = (feature_length(sample.dim, k, mode), *config.layers)
    alpha = config.margin
    avg_q = config.quantization == "mean"
    members0 = [s.members.astype(np.float64) for s in sample.sets]

    def features(members_list, rows):
        return np.stack([aggregate(members_list[r], dictionary, mode)[0].concat for r in rows])

    def loss_value(net, f, t, binary):
        h, _ = hashnet.forward(net, f)
        parts, _ = total_loss(
            TripletBatch(h[:t], h[t:2 * t], h[2 * t:]), alpha, config.lambda1, config.lambda2, binary, avg_q
        )
        return parts.total

    errors: dict[str, float] = {}
    used = rejected = 0
    for _ in range(num_probes):
        for _attempt in range(max_resample):
            net = hashnet.init(dims, seed=int(rng.integers(2**31)), dtype=np.float64)
            # small random biases keep ReLU pre-activations away from exact zero
            for b in net.biases:
                b[:] = rng.uniform(-0.1, 0.1, size=b.shape)
            trip = sample_triplet_indices(sample.labels, triplets_per_probe, rng)
            t = len(trip)
            rows = np.concatenate([trip[:, 0], trip[:, 1], trip[:, 2]])
            f = features(members0, rows)
            h, tape = hashnet.forward(net, f)
            dp = h[:t] - h[t:2 * t]
            dn = h[:t] - h[2 * t:]
            hinge = (dp * dp).sum(1) - (dn * dn).sum(1) + alpha
            involved = sorted(set(rows.tolist()))
            if _is_tie_free([members0[i] for i in involved], dictionary, mode, tape, hinge, tie_margin):
                break
            rejected += 1
        else:
            continue
        used += 1
        binary = hashnet.binarize(h)
        _, grads = total_loss(
            TripletBatch(h[:t], h[t:2 * t], h[2 * t:]), alpha, config.lambda1, config.lambda2, binary, avg_q
        )
        dws, dbs, g_feat = net_backward_fn(net, tape, np.concatenate(grads))

        analytic = {}
        for i in range(net.num_layers):
            analytic[f"W{i + 1}"] = dws[i]
            analytic[f"b{i + 1}"] = dbs[i]
        member_grad = {i: np.zeros_like(members0[i]) for i in involved}
        for r, si in enumerate(rows):
            _, atape = aggregate(members0[si], dictionary, mode)
            member_grad[si] += aggregate_backward_fn(members0[si], dictionary, atape, g_feat[r])

        for i in range(net.num_layers):
            for name, p in ((f"W{i + 1}", net.weights[i]), (f"b{i + 1}", net.biases[i])):
                num = np.zeros_like(p)
                flat, nflat = p.reshape(-1), num.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    up = loss_value(net, f, t, binary)
                    flat[j] = orig - step
                    down = loss_value(net, f, t, binary)
                    flat[j] = orig
                    nflat[j] = (up - down) / (2 * step)
                errors[name] = max(errors.get(name, 0.0), _rel_err(analytic[name], num, floor))

        worst = 0.0
        for si in involved:
            base = members0[si]
            where = np.flatnonzero(rows == si)
            num = np.zeros_like(base)
            fx = f.copy()
            for a in range(base.shape[0]):
                for b in range(base.shape[1]):
                    x = base.copy()
                    x[a, b] += step
                    fx[where] = aggregate(x, dictionary, mode)[0].concat
                    up = loss_value(net, fx, t, binary)
                    x[a, b] -= 2 * step
                    fx[where] = aggregate(x, dictionary, mode)[0].concat
                    down = loss_value(net, fx, t, binary)
                    num[a, b] = (up - down) / (2 * step)
            worst = max(worst, _rel_err(member_grad[si], num, floor))
        errors["members"] = max(errors.get("members", 0.0), worst)

    if used == 0:
        raise TieEncountered(f"all {rejected} probe draws landed within {tie_margin} of a kink")
    return GradCheckReport(errors, used, rejected, step, floor)


def grad_check_instance(seed: int, set_size: int = 4, dim: int = 6, k: int = 3, layers=(16, 8), features: str = "all"):
    """A small random labelled sample and matching config for ``grad_check``."""
    rng = np.random.default_rng(seed)
    sets = []
    for sid in range(6):
        label = sid % 2
        center = rng.normal(0.0, 1.0, size=dim) + 2.0 * label
        sets.append(ImageSet(sid, label, center + rng.normal(0.0, 1.0, size=(set_size, dim))))
    sample = Dataset(dim=dim, sets=tuple(sets), num_classes=2)
    config = TrainConfig(layers=tuple(layers), k=k, features=features, seed=seed)
    return sample, config
