import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np

from config import TrainConfig, TransformerConfig
from exceptions import DataError
from fluency_model import FluencyModel, load_fluency_model, nll, perplexity, save_fluency_model, train_fluency
from numerics import ContractError, DimensionError, SeededRng
from repeat_model import (EncoderDecoderModel, beam_search, decode, decode_split, encode, load_repeat_model,
                          reconstruction_rate, repeat_prompt, save_repeat_model, train_repeat)
from signal_grammar import generate_corpus, load_grammar
from tests.fixtures import TINY_MODEL, tiny_grammar, tiny_vocab
from vocabulary import build_vocab, tokenize

GRAMMAR_PATH = Path(__file__).parent.parent / "grammar" / "signal_grammar.json"


class TestRepeatModel(unittest.TestCase):

    def setUp(self):
        self.vocab = tiny_vocab()
        self.model = EncoderDecoderModel(self.vocab, TINY_MODEL, seed=1)
        # 一時ディレクトリを作成
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_encode_shape(self):
        text = repeat_prompt("the food was good")
        block = encode(self.model, text)
        self.assertEqual(block.shape, (len(tokenize(text, self.vocab)), TINY_MODEL.dim))
        self.assertEqual(repeat_prompt(""), "Repeat :")

    def test_beam_search_respects_limits(self):
        memory = encode(self.model, repeat_prompt("the soup was bad"))
        hypotheses = beam_search(self.model, memory, beam=3, max_len=5)
        self.assertLessEqual(len(hypotheses), 3)
        self.assertTrue(all(len(h.tokens) <= 5 for h in hypotheses))
        scores = [h.score() for h in hypotheses]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_wider_beam_scores_at_least_greedy(self):
        sentences = [s.text for s in generate_corpus(tiny_grammar("two-pairs"), 30, SeededRng(11))]
        greedy, wide = [], []
        for text in sentences:
            memory = encode(self.model, repeat_prompt(text))
            greedy.append(beam_search(self.model, memory, beam=1, max_len=8)[0].score())
            wide.append(beam_search(self.model, memory, beam=3, max_len=8)[0].score())
        self.assertGreaterEqual(np.mean(wide), np.mean(greedy) - 1e-9)

    def test_decode_is_deterministic_and_handles_empty_memory(self):
        memory = encode(self.model, repeat_prompt("the soup was bad")).data
        first = decode(self.model, memory, beam=2, max_len=6)
        second = decode(self.model, memory, beam=2, max_len=6)
        self.assertEqual(first.text, second.text)
        empty = decode(self.model, np.zeros((0, TINY_MODEL.dim), dtype=np.float32), beam=2, max_len=4)
        self.assertLessEqual(len(empty.tokens), 4)
        with self.assertRaises(DimensionError):
            decode(self.model, np.zeros((2, 3), dtype=np.float32))

    def test_decode_split_flags(self):
        history = encode(self.model, repeat_prompt("the food was good")).data
        action = encode(self.model, "the soup was bad").data
        result = decode_split(self.model, history, action, beam=2, max_len=8)
        if result.no_sep:
            self.assertEqual(result.history_text, "")
        self.assertLessEqual(result.log_prob, 0.0)

    def test_training_reduces_loss(self):
        corpus = [s.text for s in generate_corpus(tiny_grammar(), 24, SeededRng(2))]
        cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=3, seed=3)
        _, curve = train_repeat(self.model, corpus, cfg)
        self.assertEqual(len(curve), 4)
        self.assertLess(curve[-1], curve[0])

    def test_save_load_round_trip(self):
        save_repeat_model(self.model, self.temp_path, seed=1, metrics={"reconstruction_rate": 0.0})
        loaded = load_repeat_model(self.temp_path)
        text = repeat_prompt("my friend felt happy")
        np.testing.assert_array_equal(encode(self.model, text).data, encode(loaded, text).data)
        np.testing.assert_array_equal(self.model.sep_memory(), loaded.sep_memory())

    def test_load_rejects_changed_vocab(self):
        save_repeat_model(self.model, self.temp_path, seed=1)
        build_vocab(["other words only"]).save(self.temp_path / "vocab.json")
        with self.assertRaises(DataError):
            load_repeat_model(self.temp_path)

    @unittest.skipUnless(os.environ.get("RUN_SLOW"), "RUN_SLOW=1 のときだけ実行")
    def test_reconstruction_after_training(self):
        grammar = tiny_grammar()
        corpus = [s.text for s in generate_corpus(grammar, 400, SeededRng(4))]
        model = EncoderDecoderModel(self.vocab, TransformerConfig(dim=32, num_heads=4, encoder_layers=2,
                                                                  decoder_layers=2, ff_dim=64, max_len=64), seed=5)
        model, _ = train_repeat(model, corpus, TrainConfig(lr=2e-3, batch_size=16, epochs=15, seed=6))
        held_out = [s.text for s in generate_corpus(grammar, 20, SeededRng(7))]
        self.assertGreaterEqual(reconstruction_rate(model, held_out, beam=3, max_len=16), 0.9)


class TestFluencyModel(unittest.TestCase):

    def setUp(self):
        self.vocab = tiny_vocab()
        self.model = FluencyModel(self.vocab, TINY_MODEL, seed=2)

    def test_nll_and_perplexity(self):
        value = nll(self.model, "the food was good")
        self.assertGreaterEqual(value, 0.0)
        self.assertAlmostEqual(perplexity(self.model, "the food was good"), math.exp(value), places=6)
        with self.assertRaises(ContractError):
            nll(self.model, "")

    def test_training_lowers_perplexity(self):
        corpus = [s.text for s in generate_corpus(tiny_grammar(), 24, SeededRng(8))]
        before = np.mean([nll(self.model, s) for s in corpus])
        model, curve = train_fluency(self.model, corpus, TrainConfig(lr=3e-3, batch_size=4, epochs=3, seed=9))
        after = np.mean([nll(model, s) for s in corpus])
        self.assertLess(after, before)
        self.assertLess(curve[-1], curve[0])

    def test_save_load_checks_vocab(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            save_fluency_model(self.model, Path(temp_dir), seed=2)
            loaded = load_fluency_model(Path(temp_dir), self.vocab)
            self.assertAlmostEqual(nll(loaded, "the soup was bad"), nll(self.model, "the soup was bad"), places=6)
            with self.assertRaises(DataError):
                load_fluency_model(Path(temp_dir), build_vocab(["different"]))


@unittest.skipUnless(os.environ.get("RUN_SLOW"), "RUN_SLOW=1 のときだけ実行")
class TestFluencyQuality(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.grammar = load_grammar(GRAMMAR_PATH, "one-pair")
        cls.vocab = build_vocab([" ".join(cls.grammar.all_words())])
        sentences = [s.text for s in generate_corpus(cls.grammar, 1100, SeededRng(21))]
        cls.holdout = sentences[:100]
        held = set(cls.holdout)
        cls.train = [s for s in sentences[100:] if s not in held]
        config = TransformerConfig(dim=32, num_heads=4, encoder_layers=0, decoder_layers=2, ff_dim=64, max_len=64)
        cls.model, _ = train_fluency(FluencyModel(cls.vocab, config, seed=22), cls.train,
                                     TrainConfig(lr=2e-3, batch_size=16, epochs=6, seed=23))

    def test_grammatical_beats_word_salad(self):
        words = self.grammar.all_words()
        rng = SeededRng(24)
        wins = 0
        for text in self.holdout:
            length = len(text.split())
            salad = " ".join(words[int(i)] for i in rng.integers(0, len(words), size=length))
            wins += nll(self.model, salad) > nll(self.model, text)
        self.assertGreaterEqual(wins, 95)

    def test_holdout_close_to_training(self):
        train = np.mean([perplexity(self.model, s) for s in self.train[:300]])
        holdout = np.mean([perplexity(self.model, s) for s in self.holdout])
        self.assertLessEqual(holdout, 1.5 * train)


if __name__ == "__main__":
    unittest.main()
