#!/usr/bin/env python3
"""
Tests for the analytic gradients, finite differences, optimizers, schedule
and the training loop.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dataset import Batch, SynthConfig, generate_synthetic
from model import Gradients, ModelConfig, init_params
from numerics import NumericError, make_rng
from training import (
    AdamState,
    TrainConfig,
    TrainingLog,
    adam_step,
    clip_gradients,
    desk_batch,
    finite_diff_gradient,
    format_time,
    forward_backward,
    lr_at,
    run_gradient_check,
    sgd_step,
    train,
)

DESK_MODEL = dict(d1=8, d2=6, d_emb=4, K=2, hidden=8, gpo_size=5)


def tiny_dataset(noise=0.1, seed=0):
    return generate_synthetic(SynthConfig(num_images=20, captions_per_image=2, latent_dim=4, d1=8, d2=6,
                                          regions_per_image=3, tokens_per_caption=3, noise_sigma=noise,
                                          seed=seed))


class TestSchedule(unittest.TestCase):

    def test_default_decay_schedule(self):
        cfg = TrainConfig()
        self.assertEqual(lr_at(0, cfg), 5e-4)
        self.assertAlmostEqual(lr_at(9, cfg), 5e-4, places=18)
        self.assertAlmostEqual(lr_at(10, cfg), 4.5e-4, places=18)
        self.assertAlmostEqual(lr_at(20, cfg), 4.05e-4, places=18)
        self.assertAlmostEqual(lr_at(29, cfg), 4.05e-4, places=18)

    def test_negative_epoch(self):
        with self.assertRaises(NumericError):
            lr_at(-1, TrainConfig())

    def test_config_validation(self):
        with self.assertRaises(NumericError):
            TrainConfig(batch_size=1).validate()
        with self.assertRaises(NumericError):
            TrainConfig(lr0=0.0).validate()
        with self.assertRaises(NumericError):
            TrainConfig(loss="softmax").validate()
        with self.assertRaises(NumericError):
            TrainConfig(optimizer="rmsprop").validate()

    def test_format_time(self):
        self.assertEqual(format_time(30), "30s")
        self.assertEqual(format_time(90), "1m 30s")
        self.assertEqual(format_time(3661), "1h 1m")


class TestOptimizers(unittest.TestCase):

    def setUp(self):
        self.cfg = ModelConfig(**DESK_MODEL)
        self.params = init_params(self.cfg, 0)

    def test_adam_zero_gradient_is_null_update(self):
        grads = Gradients.zeros(self.cfg)
        state = AdamState.zeros(self.params.flatten().size)
        new_params, new_state = adam_step(self.params, grads, state, 1e-3)
        np.testing.assert_array_equal(new_params.flatten(), self.params.flatten())
        self.assertEqual(new_state.t, 1)

    def test_adam_first_step_moves_by_lr(self):
        rng = make_rng(1)
        g = rng.standard_normal(self.params.flatten().size)
        g[np.abs(g) < 0.1] = 0.5
        grads = Gradients.unflatten(g, self.cfg)
        state = AdamState.zeros(g.size)
        new_params, _ = adam_step(self.params, grads, state, 1e-3)
        step = new_params.flatten() - self.params.flatten()
        np.testing.assert_allclose(step, -1e-3 * np.sign(g), atol=1e-9)

    def test_adam_shape_mismatch(self):
        grads = Gradients.zeros(self.cfg)
        with self.assertRaises(NumericError):
            adam_step(self.params, grads, AdamState.zeros(3), 1e-3)

    def test_sgd_step(self):
        grads = Gradients.unflatten(np.ones(self.params.flatten().size), self.cfg)
        new_params = sgd_step(self.params, grads, 0.1)
        np.testing.assert_allclose(new_params.flatten(), self.params.flatten() - 0.1, atol=1e-15)

    def test_clip_gradients(self):
        size = self.params.flatten().size
        grads = Gradients.unflatten(np.full(size, 3.0), self.cfg)
        clipped, norm = clip_gradients(grads, 2.0)
        self.assertAlmostEqual(norm, 3.0 * np.sqrt(size), places=10)
        self.assertAlmostEqual(clipped.global_norm(), 2.0, places=10)
        small = Gradients.unflatten(np.full(size, 1e-3), self.cfg)
        np.testing.assert_array_equal(clip_gradients(small, 2.0)[0].flatten(), np.full(size, 1e-3))


class TestForwardBackward(unittest.TestCase):

    def test_separated_batch_has_zero_gradient(self):
        cfg = ModelConfig(d1=4, d2=4, d_emb=4, K=1, hidden=4)
        params = init_params(cfg, 0)
        params.W1, params.W2, params.Wt = np.eye(4), np.eye(4), np.eye(4)
        eye = np.eye(4)
        batch = Batch([eye[i:i + 1] for i in range(4)], [eye[i:i + 1] for i in range(4)],
                      np.arange(4), np.arange(4))
        loss, grads = forward_backward(batch, params, cfg, TrainConfig(loss="triplet"))
        self.assertEqual(loss, 0.0)
        for tensor in grads.tensors():
            self.assertTrue(np.all(tensor == 0.0))

    def test_reevaluation_is_identical(self):
        cfg = ModelConfig(**DESK_MODEL)
        params = init_params(cfg, 2)
        batch = desk_batch(cfg, 4, make_rng(3))
        for loss_kind in ("triplet", "global-nll"):
            first = forward_backward(batch, params, cfg, TrainConfig(loss=loss_kind))
            second = forward_backward(batch, params, cfg, TrainConfig(loss=loss_kind))
            self.assertEqual(first[0], second[0])
            self.assertEqual(first[1].flatten().tobytes(), second[1].flatten().tobytes())

    def test_neutral_weights_match_weighting_off(self):
        cfg = ModelConfig(**dict(DESK_MODEL, K=1))
        params = init_params(cfg, 4)
        batch = desk_batch(cfg, 4, make_rng(5))
        on = forward_backward(batch, params, cfg, TrainConfig(loss="global-nll", weighting=True))
        off = forward_backward(batch, params, cfg, TrainConfig(loss="global-nll", weighting=False))
        self.assertEqual(on[0], off[0])

    def test_batch_of_one(self):
        cfg = ModelConfig(**DESK_MODEL)
        batch = desk_batch(cfg, 1, make_rng(0))
        with self.assertRaises(NumericError):
            forward_backward(batch, init_params(cfg, 0), cfg, TrainConfig())


class TestFiniteDifferences(unittest.TestCase):

    def setUp(self):
        self.cfg = ModelConfig(**DESK_MODEL)
        self.params = init_params(self.cfg, 1)
        self.batch = desk_batch(self.cfg, 4, make_rng(2))

    def test_quadratic_objective(self):
        def objective(p):
            return 3.0 * p.W1[0, 0] ** 2 + p.b1[0]

        a = self.params.W1[0, 0]
        fd = finite_diff_gradient(self.batch, self.params, self.cfg, TrainConfig(), 0, objective=objective)
        self.assertAlmostEqual(fd, 6.0 * a, delta=1e-10)

    def test_unused_parameter_has_zero_difference(self):
        # pool_txt is unused by mean pooling
        index = self.params.flatten().size - 1
        fd = finite_diff_gradient(self.batch, self.params, self.cfg, TrainConfig(), index)
        self.assertLess(abs(fd), 1e-8)

    def test_matches_analytic_gradient(self):
        for loss_kind in ("triplet", "global-nll"):
            train_cfg = TrainConfig(loss=loss_kind, clip_norm=0.0)
            _, grads = forward_backward(self.batch, self.params, self.cfg, train_cfg)
            analytic = grads.flatten()
            for index in make_rng(7).choice(analytic.size, 15, replace=False):
                fd = finite_diff_gradient(self.batch, self.params, self.cfg, train_cfg, int(index))
                error = abs(analytic[index] - fd) / max(1e-8, abs(analytic[index]) + abs(fd))
                self.assertTrue(error < 1e-4 or abs(analytic[index] - fd) < 1e-9,
                                f"{loss_kind} param {index}: {analytic[index]} vs {fd}")

    def test_bad_arguments(self):
        size = self.params.flatten().size
        with self.assertRaises(NumericError):
            finite_diff_gradient(self.batch, self.params, self.cfg, TrainConfig(), size)
        with self.assertRaises(NumericError):
            finite_diff_gradient(self.batch, self.params, self.cfg, TrainConfig(), 0, h=0.0)

    def test_gradient_check_suite(self):
        report = run_gradient_check(seed=1, trials=6, n_seeds=1)
        self.assertTrue(report.passed, [r for r in report.failures])
        self.assertEqual(len(report.results), 2 * 3 * 6)


class TestTrainingLoop(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.dataset = tiny_dataset()
        self.model_cfg = ModelConfig(**DESK_MODEL)

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_zero_epochs(self):
        params, log = train(self.dataset, self.model_cfg, TrainConfig(epochs=0, batch_size=4))
        self.assertEqual(log, [])
        np.testing.assert_array_equal(params.flatten(), init_params(self.model_cfg, 0).flatten())

    def test_deterministic_with_checkpoints(self):
        cfg = TrainConfig(epochs=2, batch_size=4)
        run_a, run_b = os.path.join(self.test_dir, "a"), os.path.join(self.test_dir, "b")
        params_a, log_a = train(self.dataset, self.model_cfg, cfg, run_a)
        params_b, log_b = train(self.dataset, self.model_cfg, cfg, run_b)
        self.assertEqual(log_a, log_b)
        self.assertEqual(params_a.flatten().tobytes(), params_b.flatten().tobytes())
        for name in ("epoch_000.uamp", "epoch_001.uamp", "best.uamp"):
            with open(os.path.join(run_a, name), "rb") as f:
                a = f.read()
            with open(os.path.join(run_b, name), "rb") as f:
                self.assertEqual(a, f.read())
        with open(os.path.join(run_a, "log.jsonl"), encoding="utf-8") as f:
            records = [json.loads(line) for line in f]
        self.assertEqual([r["epoch"] for r in records], [0, 1])
        self.assertEqual(set(records[0]), {"epoch", "lr", "train_loss", "val_rsum"})

    def test_loss_decreases_on_clean_data(self):
        dataset = tiny_dataset(noise=0.0, seed=3)
        for loss_kind in ("triplet", "global-nll"):
            cfg = TrainConfig(epochs=10, batch_size=4, lr0=1e-2, loss=loss_kind)
            _, log = train(dataset, self.model_cfg, cfg)
            self.assertLess(log[-1]["train_loss"], log[0]["train_loss"], loss_kind)

    def test_epoch_loss_strictly_decreases(self):
        # One caption per image and one batch per epoch: every epoch sees the same pairs
        dataset = generate_synthetic(SynthConfig(num_images=40, captions_per_image=1, latent_dim=4, d1=8, d2=6,
                                                 regions_per_image=3, tokens_per_caption=3, seed=5))
        cfg = TrainConfig(epochs=5, batch_size=32, lr0=1e-3, loss="global-nll")
        _, log = train(dataset, self.model_cfg, cfg)
        losses = [r["train_loss"] for r in log]
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, before, losses)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            train(self.dataset, ModelConfig(d1=5, d2=6), TrainConfig(epochs=1, batch_size=4))

    def test_training_log_file(self):
        path = os.path.join(self.test_dir, "log.jsonl")
        log = TrainingLog(path)
        log.append(0, 5e-4, 1.5, 120.0)
        log.append(1, 5e-4, 1.2, None)
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 2)
        self.assertIsNone(json.loads(lines[1])["val_rsum"])


def run_tests():
    """Run all tests and return results."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestSchedule, TestOptimizers, TestForwardBackward, TestFiniteDifferences, TestTrainingLoop):
        suite.addTests(loader.loadTestsFromTestCase(case))
    runner = unittest.TextTestRunner(verbosity=2)
    return runner.run(suite).wasSuccessful()


if __name__ == '__main__':
    success = run_tests()
    sys.exit(0 if success else 1)
