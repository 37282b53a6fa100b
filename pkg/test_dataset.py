#!/usr/bin/env python3
"""
Tests for the synthetic generator, UAMV feature files, manifests and batching.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dataset import (
    KIND_IMAGE_REGIONS,
    KIND_TEXT_TOKENS,
    DataError,
    Dataset,
    SynthConfig,
    batch_iter,
    generate_synthetic,
    load_dataset,
    load_features,
    save_dataset,
    save_features,
)
from numerics import cosine_matrix, make_rng


def small_config(**overrides):
    values = dict(num_images=2, captions_per_image=5, regions_per_image=3, tokens_per_caption=4,
                  d1=8, d2=6, latent_dim=4, seed=7)
    values.update(overrides)
    return SynthConfig(**values)


class TestGenerateSynthetic(unittest.TestCase):

    def test_shapes_and_mapping(self):
        ds = generate_synthetic(small_config())
        self.assertEqual(len(ds.images), 2)
        self.assertEqual(len(ds.captions), 10)
        for regions in ds.images:
            self.assertEqual(regions.shape, (3, 8))
        for tokens in ds.captions:
            self.assertEqual(tokens.shape, (4, 6))
        np.testing.assert_array_equal(ds.caption_to_image, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1])

    def test_deterministic(self):
        a = generate_synthetic(small_config(noise_sigma=0.0))
        b = generate_synthetic(small_config(noise_sigma=0.0))
        for x, y in zip(a.images + a.captions, b.images + b.captions):
            self.assertEqual(x.tobytes(), y.tobytes())

    def test_splits_are_80_10_10(self):
        ds = generate_synthetic(small_config(num_images=20, captions_per_image=1))
        self.assertEqual([len(ds.splits[s]) for s in ("train", "val", "test")], [16, 2, 2])

    def test_identity_maps_zero_noise_pairs_win(self):
        cfg = small_config(num_images=12, captions_per_image=1, d1=6, d2=6, latent_dim=6,
                           noise_sigma=0.0, identity_maps=True, min_keep_fraction=1.0)
        ds = generate_synthetic(cfg)
        pooled_images = np.stack([regions.mean(axis=0) for regions in ds.images])
        pooled_captions = np.stack([tokens.mean(axis=0) for tokens in ds.captions])
        sims = cosine_matrix(pooled_images, pooled_captions)
        for i in range(12):
            others = np.delete(sims[i], i)
            self.assertTrue(np.all(sims[i, i] > others))

    def test_invalid_config(self):
        with self.assertRaises(DataError):
            generate_synthetic(small_config(d1=0))
        with self.assertRaises(DataError):
            generate_synthetic(small_config(noise_sigma=-0.1))
        with self.assertRaises(DataError):
            generate_synthetic(small_config(identity_maps=True))


class TestFeatureFiles(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_round_trip_is_bit_exact(self):
        rng = make_rng(9)
        for n in range(10):
            items = [rng.standard_normal((int(rng.integers(1, 5)), 7)).astype(np.float32).astype(np.float64)
                     for _ in range(int(rng.integers(1, 6)))]
            path = os.path.join(self.test_dir, f"f{n}.uamv")
            save_features(path, KIND_TEXT_TOKENS, items)
            kind, loaded = load_features(path)
            self.assertEqual(kind, KIND_TEXT_TOKENS)
            self.assertEqual(len(loaded), len(items))
            for a, b in zip(items, loaded):
                self.assertEqual(a.tobytes(), b.tobytes())

    def test_empty_item_list(self):
        path = os.path.join(self.test_dir, "empty.uamv")
        save_features(path, KIND_IMAGE_REGIONS, [])
        kind, items = load_features(path)
        self.assertEqual(kind, KIND_IMAGE_REGIONS)
        self.assertEqual(items, [])

    def test_bad_magic(self):
        path = os.path.join(self.test_dir, "bad.uamv")
        save_features(path, KIND_IMAGE_REGIONS, [np.ones((2, 3))])
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        with self.assertRaises(DataError) as ctx:
            load_features(path)
        self.assertIn("bad magic", str(ctx.exception))
        self.assertIn("byte offset 0", str(ctx.exception))

    def test_truncated_file_reports_offset(self):
        path = os.path.join(self.test_dir, "short.uamv")
        save_features(path, KIND_IMAGE_REGIONS, [np.ones((2, 3))])
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:-4])
        with self.assertRaises(DataError) as ctx:
            load_features(path)
        self.assertIn("byte offset", str(ctx.exception))

    def test_dataset_round_trip(self):
        ds = generate_synthetic(small_config(num_images=10))
        save_dataset(ds, self.test_dir)
        loaded = load_dataset(self.test_dir)
        np.testing.assert_array_equal(loaded.caption_to_image, ds.caption_to_image)
        for name in ("train", "val", "test"):
            np.testing.assert_array_equal(loaded.splits[name], ds.splits[name])
        for a, b in zip(ds.images + ds.captions, loaded.images + loaded.captions):
            self.assertEqual(a.tobytes(), b.tobytes())

    def test_manifest_missing_keys(self):
        path = os.path.join(self.test_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write('{"images": "images.uamv"}')
        with self.assertRaises(DataError):
            load_dataset(path)


class TestDatasetValidation(unittest.TestCase):

    def test_dangling_caption(self):
        ds = Dataset([np.ones((1, 2))], [np.ones((1, 3))], np.array([1]))
        with self.assertRaises(DataError):
            ds.validate()

    def test_overlapping_splits(self):
        ds = Dataset([np.ones((1, 2))] * 2, [np.ones((1, 3))] * 2, np.array([0, 1]),
                     {"train": np.array([0, 1]), "test": np.array([1])})
        with self.assertRaises(DataError):
            ds.validate()

    def test_split_view_reindexes(self):
        ds = generate_synthetic(small_config(num_images=10, captions_per_image=2))
        image_ids, caption_ids, c2i = ds.split_view("test")
        np.testing.assert_array_equal(image_ids, [9])
        np.testing.assert_array_equal(caption_ids, [18, 19])
        np.testing.assert_array_equal(c2i, [0, 0])


class TestBatchIter(unittest.TestCase):

    def setUp(self):
        ds = generate_synthetic(small_config(num_images=13, captions_per_image=3))
        # 10 train images
        self.ds = ds

    def test_short_batch_dropped(self):
        sizes = [len(b) for b in batch_iter(self.ds, "train", 4, seed=0, epoch=0)]
        self.assertEqual(sizes, [4, 4])

    def test_deterministic_per_seed_and_epoch(self):
        a = [b.image_ids.tolist() + b.caption_ids.tolist() for b in batch_iter(self.ds, "train", 5, 1, 2)]
        b = [b.image_ids.tolist() + b.caption_ids.tolist() for b in batch_iter(self.ds, "train", 5, 1, 2)]
        self.assertEqual(a, b)

    def test_epochs_shuffle_differently(self):
        orders = {tuple(np.concatenate([b.image_ids for b in batch_iter(self.ds, "train", 5, 0, epoch)]))
                  for epoch in range(5)}
        self.assertGreater(len(orders), 1)

    def test_pairs_are_consistent(self):
        for batch in batch_iter(self.ds, "train", 5, 0, 0):
            for image_id, caption_id in zip(batch.image_ids, batch.caption_ids):
                self.assertEqual(self.ds.caption_to_image[caption_id], image_id)
            self.assertEqual(len(set(batch.image_ids.tolist())), 5)

    def test_batch_size_too_small(self):
        with self.assertRaises(DataError):
            list(batch_iter(self.ds, "train", 1, 0, 0))


def run_tests():
    """Run all tests and return results."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestGenerateSynthetic, TestFeatureFiles, TestDatasetValidation, TestBatchIter):
        suite.addTests(loader.loadTestsFromTestCase(case))
    runner = unittest.TextTestRunner(verbosity=2)
    return runner.run(suite).wasSuccessful()


if __name__ == '__main__':
    success = run_tests()
    sys.exit(0 if success else 1)
