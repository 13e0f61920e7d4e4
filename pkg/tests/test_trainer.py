import csv

import numpy as np
import pytest

from sethash import hashnet
from sethash.dataset import synth_dataset
from sethash.errors import InvalidParameter, NoValidTriplet, TieEncountered
from sethash.setfeat import aggregate, aggregate_backward, feature_length
from sethash.trainer import (
    TrainConfig,
    evaluate_map,
    feature_scaling,
    fold_scaling,
    grad_check,
    grad_check_instance,
    initial_model,
    sample_triplet_indices,
    sample_triplets,
    train,
)

from conftest import make_ds, make_set


def tiny_config(**kw):
    base = dict(layers=(16, 8), k=4, epochs=3, triplets_per_epoch=60, batch_size=10, seed=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy():
    return synth_dataset(4, 6, 8, 5, 8.0, 1.0, seed=11)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.layers == (512, 32) and c.code_bits == 32
        assert c.margin == pytest.approx(0.5 * np.sqrt(32))

    def test_explicit_alpha(self):
        assert TrainConfig(alpha=1.5).margin == 1.5

    @pytest.mark.parametrize(
        "kw",
        [
            {"layers": ()},
            {"layers": (8, 0)},
            {"batch_size": 0},
            {"epochs": -1},
            {"learning_rate": 0.0},
            {"momentum": 1.0},
            {"alpha": -1.0},
            {"quantization": "max"},
            {"features": "fisher"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidParameter):
            TrainConfig(**kw)


class TestSampler:
    def test_single_class(self):
        with pytest.raises(NoValidTriplet):
            sample_triplet_indices([0, 0, 0], 5, np.random.default_rng(0))

    def test_all_singleton_classes(self):
        with pytest.raises(NoValidTriplet):
            sample_triplet_indices([0, 1, 2], 5, np.random.default_rng(0))

    def test_label_constraints(self, rng):
        labels = rng.integers(0, 5, 40)
        labels[:2] = 7
        idx = sample_triplet_indices(labels, 1000, rng)
        a, p, n = idx.T
        assert np.all(labels[a] == labels[p])
        assert np.all(a != p)
        assert np.all(labels[a] != labels[n])

    def test_singleton_class_never_anchors(self):
        labels = np.array([0, 0, 1, 2, 2])
        idx = sample_triplet_indices(labels, 500, np.random.default_rng(3))
        assert 2 not in idx[:, 0] and 2 not in idx[:, 1]
        assert 2 in idx[:, 2]

    def test_coverage(self):
        labels = np.repeat(np.arange(3), 4)
        idx = sample_triplet_indices(labels, 3000, np.random.default_rng(0))
        for col in idx.T:
            assert set(col.tolist()) == set(range(12))

    def test_deterministic(self, small_dataset):
        assert sample_triplets(small_dataset, 20, seed=4) == sample_triplets(small_dataset, 20, seed=4)
        assert sample_triplets(small_dataset, 20, seed=4) != sample_triplets(small_dataset, 20, seed=5)


class TestScaling:
    def test_folded_net_matches_standardized_input(self, rng):
        feats = rng.normal(3.0, 5.0, (20, 6))
        mu, sd = feature_scaling(feats)
        assert np.allclose(sd, sd[0]) and sd[0] > 0
        net = hashnet.init((6, 5, 3), seed=0, dtype=np.float64)
        folded = fold_scaling(net, mu, sd)
        np.testing.assert_allclose(
            hashnet.forward(folded, feats)[0], hashnet.forward(net, (feats - mu) / sd)[0], rtol=1e-10
        )

    def test_constant_features(self):
        _, sd = feature_scaling(np.ones((5, 3)))
        np.testing.assert_array_equal(sd, 1.0)

    def test_unit_rms(self, rng):
        feats = rng.standard_normal((50, 4)) * [1, 10, 100, 1000]
        mu, sd = feature_scaling(feats)
        assert np.sqrt(np.mean(((feats - mu) / sd) ** 2)) == pytest.approx(1.0)


class TestTrain:
    def test_zero_epochs_is_plain_init(self, toy):
        config = tiny_config(epochs=0)
        result = train(toy, config)
        dims = (feature_length(toy.dim, result.dictionary.k), *config.layers)
        assert result.net == hashnet.init(dims, seed=config.seed)
        assert len(result.log) == 0
        net, dictionary = initial_model(toy, config)
        assert net == result.net and dictionary == result.dictionary

    def test_bit_identical_reruns(self, toy):
        a = train(toy, tiny_config())
        b = train(toy, tiny_config())
        assert a.net == b.net and a.dictionary == b.dictionary
        assert hashnet.model_to_bytes(a.net, a.dictionary) == hashnet.model_to_bytes(b.net, b.dictionary)
        assert np.array_equal(a.log.column("total"), b.log.column("total"))

    def test_seed_changes_model(self, toy):
        assert not train(toy, tiny_config(seed=1)).net == train(toy, tiny_config(seed=2)).net

    def test_triplet_loss_decreases(self, toy):
        log = train(toy, tiny_config(epochs=30, layers=(32, 16))).log
        j0 = log.column("j0")
        assert j0[-10:].mean() < j0[:10].mean()

    def test_trained_model_retrieves(self, toy):
        result = train(toy, tiny_config(epochs=20, layers=(32, 16)))
        assert evaluate_map(result.net, result.dictionary, toy, toy) >= 0.9

    def test_log_columns_and_csv(self, toy, tmp_path):
        result = train(toy, tiny_config(), validation=(toy, toy))
        assert [r.epoch for r in result.log.epochs] == [1, 2, 3]
        for r in result.log.epochs:
            assert r.total == pytest.approx(r.j0 + 1.0 * r.j1 - 0.1 * r.j2, abs=1e-6)
            assert 0 <= r.val_map <= 1
        p = tmp_path / "log.csv"
        result.log.to_csv(p)
        rows = list(csv.reader(p.open()))
        assert rows[0] == ["epoch", "j0", "j1", "j2", "total", "seconds", "val_map"]
        assert len(rows) == 4

    def test_member_grad_hook(self, toy):
        seen = []

        def hook(index, grad):
            assert grad.shape == toy.sets[index].members.shape
            seen.append(float(np.abs(grad).sum()))

        train(toy, tiny_config(epochs=1), member_grad_hook=hook)
        assert seen and max(seen) > 0

    def test_hook_does_not_change_result(self, toy):
        plain = train(toy, tiny_config(epochs=2))
        hooked = train(toy, tiny_config(epochs=2), member_grad_hook=lambda i, g: None)
        assert plain.net == hooked.net

    def test_dictionary_refresh(self, toy):
        fixed = train(toy, tiny_config(epochs=3))
        refreshed = train(toy, tiny_config(epochs=3, dictionary_refresh=1))
        assert not fixed.dictionary == refreshed.dictionary
        assert refreshed.dictionary.k == fixed.dictionary.k

    @pytest.mark.parametrize("mode", ["stats", "vlad"])
    def test_feature_modes(self, toy, mode):
        result = train(toy, tiny_config(features=mode))
        k = result.dictionary.k
        assert result.net.dims[0] == feature_length(toy.dim, k, mode)

    def test_unstandardized(self, toy):
        result = train(toy, tiny_config(standardize=False))
        assert np.all(np.isfinite(result.net.weights[0]))

    def test_single_class_rejected(self):
        ds = make_ds([make_set(np.eye(3) * i, set_id=i) for i in range(1, 4)])
        with pytest.raises(NoValidTriplet):
            train(ds, tiny_config(k=2))


class TestGradCheck:
    def test_linear_mean_readout_exact(self, rng):
        # linear readout of the mean block: central differences are exact up to rounding
        x = rng.standard_normal((5, 3))
        w = rng.standard_normal(feature_length(3, 0, "stats"))
        w[3:] = 0.0

        def readout(m):
            return float(w @ aggregate(m, None, "stats")[0].concat)

        _, tape = aggregate(x, None, "stats")
        analytic = aggregate_backward(x, None, tape, w)
        step = 1e-5
        num = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += step
            down[idx] -= step
            num[idx] = (readout(up) - readout(down)) / (2 * step)
        rel = np.abs(analytic - num) / np.maximum(np.abs(analytic), 1e-12)
        assert rel.max() <= 1e-8

    def test_single_layer_stats(self):
        sample, config = grad_check_instance(0, layers=(4,), features="stats")
        report = grad_check(sample, config, num_probes=3, seed=0)
        assert set(report.errors) == {"W1", "b1", "members"}
        assert report.max_error <= 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_full_pipeline(self, seed):
        sample, config = grad_check_instance(seed)
        report = grad_check(sample, config, num_probes=2, seed=seed)
        assert report.passed(1e-4)
        assert report.probes_used == 2

    def test_sign_flip_in_network_backward_is_caught(self):
        def flipped(net, tape, grad, input_grad=True):
            dws, dbs, gi = hashnet.backward(net, tape, grad, input_grad)
            return [-dws[0]] + dws[1:], dbs, gi

        sample, config = grad_check_instance(0)
        report = grad_check(sample, config, num_probes=1, seed=0, net_backward_fn=flipped)
        assert report.errors["W1"] > 1e-2

    def test_sign_flip_in_aggregation_backward_is_caught(self):
        def flipped(members, dictionary, tape, grad):
            return -aggregate_backward(members, dictionary, tape, grad)

        sample, config = grad_check_instance(0)
        report = grad_check(sample, config, num_probes=1, seed=0, aggregate_backward_fn=flipped)
        assert report.errors["members"] > 1e-2
        assert report.errors["W1"] <= 1e-4

    def test_all_probes_tie(self):
        sample, config = grad_check_instance(0)
        with pytest.raises(TieEncountered):
            grad_check(sample, config, num_probes=2, seed=0, tie_margin=1e9, max_resample=3)
