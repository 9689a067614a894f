import json
import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from evaluator import (MetricDomainError, RefinementScorer, aggregate, fluency, load_eval_classifier, read_report,
                       signal_accuracy, similarity, single_sentences, train_eval_classifier, transfer_strength,
                       write_report)
from fluency_model import FluencyModel
from numerics import ContractError
from repeat_model import EncoderDecoderModel
from tests.fixtures import TEST_DATA, TINY_CLASSIFIER, TINY_MODEL, tiny_grammar, tiny_vocab
from trajectory import read_trajectories

# (similarity, strength, fluency) -> (GM, HM)
REFERENCE_ROWS = [
    ((80.7, 41.1, 138.0), (40.7, 34.9)),
    ((74.0, 57.3, 142.5), (44.1, 37.2)),
    ((82.8, 23.7, 130.7), (34.3, 29.1)),
    ((57.0, 23.1, 447.4), (27.8, 24.6)),
    ((63.6, 23.3, 100.2), (31.8, 28.7)),
    ((65.3, 77.7, 173.0), (46.2, 37.6)),
    ((65.3, 90.5, 161.5), (48.8, 38.9)),
    ((69.2, 72.9, 116.5), (47.3, 39.6)),
    ((69.8, 74.8, 276.0), (45.3, 35.8)),
    ((65.8, 88.0, 174.5), (48.2, 38.4)),
    ((75.4, 52.1, 119.6), (43.5, 37.4)),
    ((73.1, 63.5, 117.2), (46.0, 38.9)),
    ((66.5, 67.3, 91.4), (46.3, 40.0)),
    ((59.5, 55.9, 172.6), (40.1, 34.8)),
    ((52.0, 43.9, 69.5), (37.8, 35.5)),
]


class TestAggregate(unittest.TestCase):

    def test_published_rows(self):
        for (sim, strength, flu), (gm, hm) in REFERENCE_ROWS:
            got_gm, got_hm = aggregate(sim, strength, flu)
            self.assertAlmostEqual(got_gm, gm, delta=0.15, msg=f"{sim}, {strength}, {flu}")
            self.assertAlmostEqual(got_hm, hm, delta=0.15, msg=f"{sim}, {strength}, {flu}")

    def test_hm_not_above_gm(self):
        for (sim, strength, flu), _ in REFERENCE_ROWS:
            gm, hm = aggregate(sim, strength, flu)
            self.assertLessEqual(hm, gm + 1e-9)

    def test_domain_errors(self):
        with self.assertRaises(MetricDomainError):
            aggregate(50.0, 50.0, math.e)
        with self.assertRaises(MetricDomainError):
            aggregate(0.0, 50.0, 100.0)
        with self.assertRaises(MetricDomainError):
            aggregate(50.0, 100.5, 100.0)


class TestSignals(unittest.TestCase):

    def test_signal_accuracy(self):
        grammar = tiny_grammar()
        refined = ["the food was good", "the food was", "the soup was bad", "the soup was good bad"]
        report = signal_accuracy(refined, grammar, stages=[1, 1, 2, 2])
        self.assertEqual(report.converted, 0.25)
        self.assertEqual(report.deleted, 0.5)
        self.assertLessEqual(report.converted, report.deleted)
        self.assertEqual(report.per_stage["1"].converted, 0.5)
        self.assertEqual(report.per_stage["2"].deleted, 0.0)


class TestScorer(unittest.TestCase):

    def setUp(self):
        vocab = tiny_vocab()
        self.repeat = EncoderDecoderModel(vocab, TINY_MODEL, seed=1)
        self.fluency = FluencyModel(vocab, TINY_MODEL, seed=2)
        self.trajectories = read_trajectories(TEST_DATA / "trajectories.jsonl")
        self.classifier = train_eval_classifier(self.trajectories, self.repeat, TINY_CLASSIFIER)
        # 一時ディレクトリを作成
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_single_sentences_are_unique(self):
        sentences = single_sentences(self.trajectories)
        self.assertEqual(len(sentences), len({text for text, _ in sentences}))
        self.assertIn(("the soup was bad", 0), sentences)

    def test_components(self):
        texts = ["the food was good", "the soup was bad"]
        self.assertAlmostEqual(similarity(texts, texts, self.repeat), 100.0, places=3)
        strength = transfer_strength(texts, self.classifier)
        self.assertIn(strength, (0.0, 50.0, 100.0))
        mean, skipped = fluency(texts + [""], self.fluency)
        self.assertEqual(skipped, 1)
        self.assertGreater(mean, 1.0)
        with self.assertRaises(ContractError):
            similarity(texts, texts[:1], self.repeat)
        with self.assertRaises(ContractError):
            fluency([""], self.fluency)

    def test_score_report(self):
        scorer = RefinementScorer(self.classifier, self.repeat, self.fluency, tiny_grammar())
        report, signals = scorer.score(["the food was bad", "the soup was bad"],
                                       ["the food was good", "the soup was bad"], stages=[1, 2])
        self.assertEqual(report.n, 2)
        self.assertEqual(signals.converted, 0.5)
        if report.gm is not None:
            gm, hm = aggregate(report.similarity, report.strength, report.fluency)
            self.assertEqual(report.gm, gm)
            self.assertEqual(report.hm, hm)

        path = write_report(self.temp_path / "metrics.json", report)
        self.assertEqual(list(read_report(path))[:5], ["similarity", "strength", "fluency", "gm", "hm"])

    def test_undefined_gm_is_written_as_null(self):
        scorer = RefinementScorer(self.classifier, self.repeat, self.fluency)
        with patch("evaluator.transfer_strength", return_value=0.0), \
                patch("evaluator.similarity", return_value=90.0), \
                patch("evaluator.fluency", return_value=(100.0, 0)):
            report, signals = scorer.score(["the food was bad"], ["the food was bad"])
        self.assertIsNone(signals)
        self.assertIsNone(report.gm)
        self.assertIsNone(report.hm)
        self.assertIn("strength", report.gm_hm_undefined)

        path = write_report(self.temp_path / "metrics.json", report)
        text = path.read_text(encoding="utf-8")
        self.assertNotIn("NaN", text)

        def reject(name):
            raise ValueError(name)

        loaded = json.loads(text, parse_constant=reject)
        self.assertIsNone(loaded["gm"])
        self.assertIsNone(loaded["hm"])
        self.assertEqual(loaded["gm_hm_undefined"], report.gm_hm_undefined)

    def test_defined_gm_has_no_reason(self):
        scorer = RefinementScorer(self.classifier, self.repeat, self.fluency)
        with patch("evaluator.transfer_strength", return_value=50.0), \
                patch("evaluator.similarity", return_value=90.0), \
                patch("evaluator.fluency", return_value=(100.0, 0)):
            report, _ = scorer.score(["the food was bad"], ["the food was good"])
        self.assertIsNotNone(report.gm)
        self.assertIsNone(report.gm_hm_undefined)
        self.assertEqual((report.gm, report.hm), aggregate(90.0, 50.0, 100.0))

    def test_eval_classifier_round_trip(self):
        path = self.classifier.save(self.temp_path / "eval.ntck")
        loaded = load_eval_classifier(path, self.repeat, TINY_CLASSIFIER)
        texts = ["the food was good", "my boss felt bad"]
        for a, b in zip(self.classifier.predict(texts), loaded.predict(texts)):
            self.assertAlmostEqual(a, b, places=6)


if __name__ == "__main__":
    unittest.main()
