"""Desk-scale benchmark protocols on synthetic sets.

* ``reference_benchmark``: train on an expanded gallery, report MAP of held-out
  query sets before and after training.
* ``set_size_sweep``: same gallery, query sets of several sizes, averaged over
  independent trials of set generation.
* ``feature_ablation``: statistics-only, VLAD-only and combined aggregation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, expand_sets, synth_gallery_query
from .setfeat import FEATURE_MODES
from .trainer import TrainConfig, TrainLog, evaluate_map, initial_model, train


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    gallery_per_class: int = 10
    query_per_class: int = 5
    gallery_set_size: int = 10
    query_set_size: int = 10
    dim: int = 32
    separation: float = 10.0
    sigma: float = 1.0
    seed: int = 7


@dataclass(frozen=True)
class ExpandConfig:
    subsets_per_set: int = 10
    subset_fraction: float = 0.5
    min_size: int = 10
    jitter_sigma: float = 0.1


REFERENCE_TRAIN = TrainConfig(layers=(512, 32), epochs=200, triplets_per_epoch=300, seed=7)


@dataclass
class BenchmarkResult:
    init_map: float
    trained_map: float
    seconds: float
    log: TrainLog = field(repr=False)


def make_data(synth: SynthConfig, expand: ExpandConfig) -> tuple[Dataset, Dataset, Dataset]:
    """``(training, gallery, queries)``: the training data is the expanded gallery."""
    gallery, queries = synth_gallery_query(
        synth.num_classes, synth.gallery_per_class, synth.query_per_class, synth.dim,
        synth.separation, synth.sigma, synth.seed,
        gallery_set_size=synth.gallery_set_size, query_set_size=synth.query_set_size,
    )
    training = expand_sets(
        gallery, expand.subsets_per_set, expand.subset_fraction, expand.min_size,
        expand.jitter_sigma, seed=synth.seed,
    )
    return training, gallery, queries


def reference_benchmark(
    synth: SynthConfig = SynthConfig(),
    expand: ExpandConfig = ExpandConfig(),
    config: TrainConfig = REFERENCE_TRAIN,
) -> BenchmarkResult:
    tic = time.perf_counter()
    training, gallery, queries = make_data(synth, expand)
    net0, dict0 = initial_model(training, config)
    init_map = evaluate_map(net0, dict0, gallery, queries, config.features)
    result = train(training, config)
    trained_map = evaluate_map(result.net, result.dictionary, gallery, queries, config.features)
    return BenchmarkResult(init_map, trained_map, time.perf_counter() - tic, result.log)


def set_size_sweep(
    query_sizes=(5, 50),
    trials: int = 10,
    synth: SynthConfig = SynthConfig(sigma=3.0),
    expand: ExpandConfig = ExpandConfig(),
    config: TrainConfig = REFERENCE_TRAIN,
) -> dict[int, list[float]]:
    """MAP per query set size for ``trials`` independent draws.

    Trial ``i`` regenerates the class centers, the gallery and the query
    sets from seed ``synth.seed + i`` and trains with the same seed. The
    gallery (and so the trained model) is shared by all query sizes within
    a trial.
    """
    out: dict[int, list[float]] = {q: [] for q in query_sizes}
    for i in range(trials):
        seed = synth.seed + i
        gallery, query_sets = synth_gallery_query(
            synth.num_classes, synth.gallery_per_class, synth.query_per_class, synth.dim,
            synth.separation, synth.sigma, seed,
            gallery_set_size=synth.gallery_set_size, query_set_size=tuple(query_sizes),
        )
        training = expand_sets(
            gallery, expand.subsets_per_set, expand.subset_fraction, expand.min_size,
            expand.jitter_sigma, seed=seed,
        )
        result = train(training, replace(config, seed=seed))
        for q, queries in zip(query_sizes, query_sets):
            out[q].append(evaluate_map(result.net, result.dictionary, gallery, queries, config.features))
    return out


def feature_ablation(
    training: Dataset,
    gallery: Dataset,
    queries: Dataset,
    config: TrainConfig = REFERENCE_TRAIN,
    modes=FEATURE_MODES,
) -> dict[str, float]:
    """Trained MAP for each aggregation mode, all else equal."""
    maps = {}
    for mode in modes:
        result = train(training, replace(config, features=mode))
        maps[mode] = evaluate_map(result.net, result.dictionary, gallery, queries, mode)
    return maps


def summarize_sweep(sweep: dict[int, list[float]]) -> dict[int, float]:
    return {q: float(np.mean(v)) for q, v in sweep.items()}
