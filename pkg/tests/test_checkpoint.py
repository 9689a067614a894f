import tempfile
import unittest
from pathlib import Path

import numpy as np

from checkpoint import (load_module, load_tensors, namespaced, read_manifest, save_module, save_tensors,
                        strip_namespace, write_manifest)
from exceptions import DataError
from layers import Linear
from numerics import SeededRng


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        # 一時ディレクトリを作成
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_tensors_round_trip_bitwise(self):
        tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array(1.5, dtype=np.float32)}
        path = save_tensors(self.temp_path / "x.ntck", tensors)
        loaded = load_tensors(path)
        self.assertEqual(sorted(loaded), ["a", "b"])
        np.testing.assert_array_equal(loaded["b"], tensors["b"])
        self.assertEqual(loaded["a"].shape, ())
        # 同じ内容なら同じバイト列
        again = save_tensors(self.temp_path / "y.ntck", tensors)
        self.assertEqual(path.read_bytes(), again.read_bytes())

    def test_corrupt_files(self):
        bad = self.temp_path / "bad.ntck"
        bad.write_bytes(b"XXXX")
        with self.assertRaises(DataError):
            load_tensors(bad)
        path = save_tensors(self.temp_path / "cut.ntck", {"w": np.ones((4, 4), dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(DataError):
            load_tensors(path)
        with self.assertRaises(DataError):
            load_tensors(self.temp_path / "missing.ntck")

    def test_namespaces(self):
        tensors = namespaced("qf/stage2", {"w": np.zeros(1)})
        self.assertEqual(list(tensors), ["qf/stage2/w"])
        self.assertEqual(list(strip_namespace("qf/stage2", tensors)), ["w"])
        self.assertEqual(strip_namespace("qf/stage1", tensors), {})

    def test_module_round_trip_and_mismatch(self):
        source = Linear(3, 2, SeededRng(1))
        path = save_module(source, self.temp_path / "linear.ntck", "eval")
        target = load_module(Linear(3, 2, SeededRng(2)), path, "eval")
        np.testing.assert_array_equal(source.weight.data, target.weight.data)
        with self.assertRaises(DataError):
            load_module(Linear(3, 2, SeededRng(2)), path, "repeat")
        with self.assertRaises(DataError):
            load_module(Linear(4, 2, SeededRng(2)), path, "eval")

    def test_manifest_round_trip(self):
        path = write_manifest(self.temp_path / "m.json", {"kind": "repeat", "seed": 3})
        manifest = read_manifest(path)
        self.assertEqual(manifest["kind"], "repeat")
        self.assertIn("written_at", manifest)
        with self.assertRaises(DataError):
            read_manifest(self.temp_path / "none.json")


if __name__ == "__main__":
    unittest.main()
