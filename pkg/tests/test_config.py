import json
import tempfile
import unittest
from pathlib import Path

from config import PipelineConfig, apply_overrides, config_hash, load_config
from exceptions import ConfigError


class TestLoadConfig(unittest.TestCase):

    def setUp(self):
        # 一時ディレクトリを作成
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def write_config(self, data) -> Path:
        path = self.temp_path / "config.json"
        with open(path, "w", encoding="utf-8") as f:
            if isinstance(data, str):
                f.write(data)
            else:
                json.dump(data, f)
        return path

    def test_relative_paths_follow_config_file(self):
        cfg = load_config(self.write_config({"paths": {"data_dir": "./mydata"}, "data": {"num_stages": 3}}))
        self.assertEqual(cfg.paths.data_dir, self.temp_path / "mydata")
        self.assertEqual(cfg.data.num_stages, 3)
        self.assertEqual(cfg.data.threshold(), 3)

    def test_ascent_stage_keys_are_ints(self):
        cfg = load_config(self.write_config({"ascent": {"stage_iterations": {"2": 4, "1": 6}}}))
        self.assertEqual(cfg.ascent.iterations_for(1), 6)
        self.assertEqual(cfg.ascent.iterations_for(5), cfg.ascent.default_iterations)

    def test_invalid_values_raise_config_error(self):
        bad_configs = [
            {"variant": "three-stage"},
            {"grammar": {"mode": "many-pairs"}},
            {"data": {"num_stages": 0}},
            {"data": {"holdout_fraction": 1.5}},
            {"ascent": {"selection_mode": "best-of-all"}},
            {"ascent": {"step_size": 0}},
            {"evaluation": {"cv_folds": 1}},
            {"classifier": {"dropout": 1.0}},
        ]
        for data in bad_configs:
            with self.assertRaises(ConfigError, msg=str(data)):
                load_config(self.write_config(data))

    def test_broken_or_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.write_config("{ not json"))
        with self.assertRaises(ConfigError):
            load_config(self.temp_path / "missing.json")


class TestOverrides(unittest.TestCase):

    def test_seed_variant_and_out(self):
        base = PipelineConfig()
        cfg = apply_overrides(base, seed=5, variant="tts", out=Path("/tmp/run"))
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.variant, "tts")
        self.assertEqual(cfg.paths.report_dir, Path("/tmp/run") / "reports")
        self.assertNotEqual(cfg.classifier.seed, base.classifier.seed)
        # 同じシードなら同じ派生シード
        self.assertEqual(apply_overrides(base, seed=5).ascent.seed, cfg.ascent.seed)
        with self.assertRaises(ConfigError):
            apply_overrides(base, variant="unknown")

    def test_stage_count(self):
        self.assertEqual(PipelineConfig().stage_count(), 2)
        self.assertEqual(apply_overrides(PipelineConfig(), variant="one-stage").stage_count(), 1)


class TestConfigHash(unittest.TestCase):

    def test_hash_is_stable_and_section_scoped(self):
        cfg = PipelineConfig()
        self.assertEqual(config_hash(cfg), config_hash(PipelineConfig()))
        changed = cfg.copy(update={"ascent": cfg.ascent.copy(update={"step_size": 0.25})})
        self.assertNotEqual(config_hash(cfg), config_hash(changed))
        self.assertNotEqual(config_hash(cfg, ["ascent"]), config_hash(changed, ["ascent"]))
        self.assertEqual(config_hash(cfg, ["data", "grammar"]), config_hash(changed, ["data", "grammar"]))


if __name__ == "__main__":
    unittest.main()
