"""Trainer behavior: penalty accounting, determinism, sparsification pressure."""

import numpy as np
import pytest

from slimnet.graph import build_model, parse_model_config
from slimnet.nn import sgd_step, softmax_cross_entropy
from slimnet.training import TrainConfig, scale_histogram, sum_abs_scales, train

TINY = """
input 3 8 8
classes 4
cbr 3 6 3 1 1
maxpool 2
cbr 6 8 3 1 1
globalavgpool
linear 8 4
"""


def random_data(n=48, size=8, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, size, size, 3)).astype(np.float32)
    labels = rng.integers(0, classes, n)
    return images, labels


def fresh_model(seed=0):
    return build_model(parse_model_config(TINY), seed=seed)


class TestConfig:
    def test_rejects_tiny_batch(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(epochs=1, batch_size=1)

    def test_rejects_negative_l1(self):
        with pytest.raises(ValueError, match="l1_coeff"):
            TrainConfig(epochs=1, l1_coeff=-0.1)

    def test_step_schedule(self):
        cfg = TrainConfig(epochs=6, lr=1.0, lr_schedule="step", lr_step=2, lr_decay=0.5)
        assert [cfg.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(fresh_model(), np.zeros((0, 8, 8, 3), np.float32), np.zeros(0, int),
                  TrainConfig(epochs=1))

    def test_lambda_zero_matches_reference_loop(self):
        """With the penalty off, trajectories match a loop with no penalty term."""
        images, labels = random_data()
        cfg = TrainConfig(epochs=2, batch_size=8, lr=0.05, momentum=0.9, l1_coeff=0.0, seed=3)
        trained, _ = train(fresh_model(seed=1), images, labels, cfg)

        reference = fresh_model(seed=1)
        rng = np.random.default_rng(cfg.seed)
        params = reference.parameters()
        velocities = None
        for _ in range(cfg.epochs):
            order = rng.permutation(len(images))
            for step in range(len(images) // cfg.batch_size):
                pick = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                batch = np.ascontiguousarray(
                    images[pick].transpose(0, 3, 1, 2), dtype=np.float32
                )
                logits = reference.forward(batch, mode="train")
                _, dlogits = softmax_cross_entropy(logits, labels[pick])
                reference.zero_grads()
                reference.backward(dlogits)
                velocities = sgd_step(params, reference.gradients(), cfg.lr, cfg.momentum, velocities)
        for a, b in zip(trained.parameters(), reference.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_total_loss_accounting(self):
        images, labels = random_data(n=16)
        cfg = TrainConfig(epochs=1, batch_size=16, lr=0.01, l1_coeff=2e-3, seed=0)
        model, metrics = train(fresh_model(), images, labels, cfg)
        row = metrics[0]
        assert row.total_loss - row.task_loss == pytest.approx(row.penalty, rel=1e-9)
        assert row.penalty == pytest.approx(cfg.l1_coeff * sum_abs_scales(model), abs=1e-6)

    def test_penalty_accounting_every_epoch(self):
        images, labels = random_data()
        cfg = TrainConfig(epochs=3, batch_size=8, lr=0.02, l1_coeff=1e-3, seed=1)
        _, metrics = train(fresh_model(), images, labels, cfg)
        for row in metrics:
            assert row.total_loss - row.task_loss == pytest.approx(row.penalty, rel=1e-5)
            assert row.penalty == pytest.approx(cfg.l1_coeff * row.sum_abs_scale, rel=1e-9)

    def test_deterministic_given_seed(self):
        images, labels = random_data()
        cfg = TrainConfig(epochs=2, batch_size=8, lr=0.05, l1_coeff=1e-4, seed=7)
        a, _ = train(fresh_model(seed=2), images, labels, cfg)
        b, _ = train(fresh_model(seed=2), images, labels, cfg)
        assert a.to_bytes() == b.to_bytes()

    def test_l1_lowers_median_scale(self):
        images, labels = random_data(n=64)
        base_cfg = dict(epochs=4, batch_size=8, lr=0.1, momentum=0.9, seed=5)
        plain, _ = train(fresh_model(seed=4), images, labels, TrainConfig(l1_coeff=0.0, **base_cfg))
        sparse, _ = train(fresh_model(seed=4), images, labels, TrainConfig(l1_coeff=5e-3, **base_cfg))

        def median_scale(m):
            return np.median(np.concatenate([np.abs(bn.scale) for _, bn in m.bn_layers()]))

        assert median_scale(sparse) < median_scale(plain)

    def test_nan_loss_aborts_with_diagnostic(self):
        images, labels = random_data(n=16)
        model = fresh_model()
        model.layers[0].params.weights[0, 0, 0, 0] = np.nan
        cfg = TrainConfig(epochs=1, batch_size=8, lr=0.1, seed=0)
        with pytest.raises(ArithmeticError, match="non-finite"):
            train(model, images, labels, cfg)

    def test_augment_hook_receives_batches(self):
        images, labels = random_data(n=16)
        seen = []

        def hook(batch, batch_index):
            seen.append((batch.shape, batch_index))
            return batch

        cfg = TrainConfig(epochs=2, batch_size=8, lr=0.01, seed=0)
        train(fresh_model(), images, labels, cfg, augment=hook)
        assert [s[1] for s in seen] == [0, 1, 2, 3]
        assert all(s[0] == (8, 8, 8, 3) for s in seen)

    def test_zero_epochs_is_noop(self):
        images, labels = random_data(n=16)
        model = fresh_model(seed=9)
        before = model.to_bytes()
        trained, metrics = train(model, images, labels, TrainConfig(epochs=0))
        assert trained.to_bytes() == before
        assert metrics == []


class TestScaleHistogram:
    def test_all_mass_in_middle_bin(self):
        model = fresh_model()  # every scale is the 0.5 init
        counts = scale_histogram(model, [0.0, 0.4, 0.6, 1.0])
        assert counts.tolist() == [0, 14, 0]

    def test_counts_sum_to_channel_total(self):
        model = fresh_model()
        total = sum(bn.channels for _, bn in model.bn_layers())
        counts = scale_histogram(model, [0.0, 0.25, 0.5, np.inf])
        assert counts.sum() == total

    def test_no_bn_model_rejected(self):
        cfg = parse_model_config("input 3 8 8\nclasses 2\nconv 3 4 3 1 1\nglobalavgpool\nlinear 4 2\n")
        with pytest.raises(ValueError, match="no batchnorm"):
            scale_histogram(build_model(cfg), [0.0, 1.0])

    def test_uncovered_values_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            scale_histogram(fresh_model(), [0.0, 0.1, 0.2])
