import gzip
import struct
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from .datasets import DatasetError, ImageDataset
from .idx_import import IMAGE_MAGIC, IDXImportError, load_idx, read_idx, write_idx
from .synthetic import FAMILY_NAMES, synth_dataset


class SyntheticDatasetTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.dataset = synth_dataset(10, 100, 32, seed=7)

    def test_construction_contract(self):
        self.assertEqual(len(self.dataset), 1000)
        self.assertEqual(self.dataset.image_shape, (1, 32, 32))
        self.assertEqual(sorted(set(self.dataset.labels.tolist())), list(range(10)))
        self.assertGreaterEqual(self.dataset.images.min(), 0.0)
        self.assertLessEqual(self.dataset.images.max(), 1.0)

    def test_same_seed_bitwise_identical(self):
        again = synth_dataset(10, 100, 32, seed=7)
        self.assertEqual(again.images.tobytes(), self.dataset.images.tobytes())
        np.testing.assert_array_equal(again.labels, self.dataset.labels)

    def test_different_seed_differs(self):
        other = synth_dataset(10, 100, 32, seed=8)
        self.assertFalse(np.array_equal(other.images, self.dataset.images))

    def test_class_means_pairwise_distinct(self):
        means = self.dataset.class_means().reshape(10, -1)
        for a in range(10):
            for b in range(a + 1, 10):
                self.assertGreater(np.linalg.norm(means[a] - means[b]), 0.01, msg=f"classes {a} and {b}")

    def test_classes_beyond_families(self):
        data = synth_dataset(len(FAMILY_NAMES) + 2, 3, 16, seed=1)
        self.assertEqual(data.class_count, 12)
        self.assertFalse(np.allclose(data.class_means()[0], data.class_means()[10]))

    def test_rejects_single_class(self):
        with self.assertRaises(DatasetError):
            synth_dataset(1, 10, 16, seed=0)

    def test_split_is_deterministic_and_disjoint(self):
        train, held = self.dataset.split(0.2, seed=3)
        self.assertEqual((len(train), len(held)), (800, 200))
        train_again, _ = self.dataset.split(0.2, seed=3)
        np.testing.assert_array_equal(train.labels, train_again.labels)

    def test_sample_batch_shapes(self):
        images, labels = self.dataset.sample_batch(np.random.default_rng(0), 64)
        self.assertEqual(images.shape, (64, 1, 32, 32))
        self.assertEqual(labels.shape, (64,))


class IDXImportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.pixels = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
        self.labels = rng.integers(0, 10, size=10, dtype=np.uint8)
        self.images_path = write_idx(self.dir / "images.idx", self.pixels)
        self.labels_path = write_idx(self.dir / "labels.idx", self.labels)

    def tearDown(self):
        self.tmp.cleanup()

    def test_format_contract(self):
        raw = self.images_path.read_bytes()
        self.assertEqual(struct.unpack(">I", raw[:4])[0], IMAGE_MAGIC)
        data = load_idx(self.images_path, self.labels_path)
        self.assertEqual(data.images.shape, (10, 1, 28, 28))

    def test_round_trip_reproduces_pixel_bytes(self):
        data = load_idx(self.images_path, self.labels_path)
        restored = np.rint(data.images[:, 0] * 255.0).astype(np.uint8)
        np.testing.assert_array_equal(restored, self.pixels)
        np.testing.assert_array_equal(data.labels, self.labels)

    def test_gzip_input(self):
        gz = self.dir / "images.idx.gz"
        gz.write_bytes(gzip.compress(self.images_path.read_bytes()))
        np.testing.assert_array_equal(read_idx(gz, IMAGE_MAGIC), self.pixels)

    def test_labels_beyond_class_count_rejected(self):
        labels_path = write_idx(self.dir / "five.idx", np.array([0, 1, 2, 3, 4, 5, 0, 1, 2, 3], dtype=np.uint8))
        with self.assertRaises(IDXImportError) as ctx:
            load_idx(self.images_path, labels_path, class_count=5)
        self.assertEqual(ctx.exception.code, "label-range")
        self.assertEqual(load_idx(self.images_path, labels_path, class_count=6).class_count, 6)

    def test_count_mismatch(self):
        short = write_idx(self.dir / "short.idx", self.labels[:7])
        with self.assertRaises(IDXImportError) as ctx:
            load_idx(self.images_path, short)
        self.assertEqual(ctx.exception.code, "count-mismatch")

    def test_bad_magic(self):
        with self.assertRaises(IDXImportError) as ctx:
            load_idx(self.labels_path, self.labels_path)
        self.assertEqual(ctx.exception.code, "bad-magic")
        self.assertIn("labels.idx", str(ctx.exception))

    def test_truncated(self):
        cut = self.dir / "cut.idx"
        cut.write_bytes(self.images_path.read_bytes()[:-5])
        with self.assertRaises(IDXImportError) as ctx:
            load_idx(cut, self.labels_path)
        self.assertEqual(ctx.exception.code, "truncated")

    def test_pad_to_larger_size(self):
        data = load_idx(self.images_path, self.labels_path, image_size=32)
        self.assertEqual(data.images.shape, (10, 1, 32, 32))
        self.assertTrue(np.all(data.images[:, :, :2, :] == 0.0))
        np.testing.assert_allclose(data.images[:, 0, 2:30, 2:30], self.pixels / 255.0)

    def test_resize_to_smaller_size(self):
        data = load_idx(self.images_path, self.labels_path, image_size=16)
        self.assertEqual(data.images.shape, (10, 1, 16, 16))
        self.assertTrue(np.all((data.images >= 0.0) & (data.images <= 1.0)))


class ImageDatasetTests(SimpleTestCase):
    def test_rejects_label_count_mismatch(self):
        with self.assertRaises(DatasetError):
            ImageDataset(np.zeros((3, 1, 4, 4)), np.zeros(2, dtype=np.int64), 2)

    def test_rejects_labels_outside_classes(self):
        with self.assertRaises(DatasetError) as ctx:
            ImageDataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), 2)
        self.assertEqual(ctx.exception.field, "labels")

    def test_class_means_of_absent_class_are_nan(self):
        data = ImageDataset(np.ones((2, 1, 4, 4)), np.array([0, 0]), 2)
        self.assertTrue(np.all(np.isnan(data.class_means()[1])))


class CreateDatasetCommandTests(SimpleTestCase):
    def test_writes_loadable_pair(self):
        with tempfile.TemporaryDirectory() as tmp:
            with override_settings(DSD_OUT_DIR=Path(tmp)):
                out = StringIO()
                call_command("create_dataset", "--classes", "3", "--per-class", "4", "--image-size", "8",
                             "--seed", "2", stdout=out)
            data_dir = Path(tmp) / "data"
            data = load_idx(data_dir / "synthetic-images-idx3-ubyte", data_dir / "synthetic-labels-idx1-ubyte")
        self.assertEqual(len(data), 12)
        self.assertEqual(data.class_count, 3)
        self.assertIn("Wrote 12 images", out.getvalue())

    def test_single_class_is_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError) as ctx:
                call_command("create_dataset", "--classes", "1", "--out", tmp, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)
