import json
import tempfile
import unittest
from pathlib import Path

from edit_distance import edit_distance
from exceptions import DataError, OOVError
from numerics import SeededRng
from signal_grammar import generate_corpus, generate_sentence, label_of, load_grammar, scan_signals
from tests.fixtures import tiny_grammar, tiny_vocab
from vocabulary import BOS_ID, EOS_ID, RESERVED_TOKENS, SEP, SEP_ID, Vocabulary, build_vocab, detokenize, tokenize

GRAMMAR_PATH = Path(__file__).parent.parent / "grammar" / "signal_grammar.json"


class TestVocabulary(unittest.TestCase):

    def test_reserved_tokens_first(self):
        vocab = build_vocab(["The food was good", "the food was bad"])
        self.assertEqual(vocab.tokens[: len(RESERVED_TOKENS)], RESERVED_TOKENS)
        self.assertIn("the", vocab)
        self.assertNotIn("The", vocab)

    def test_tokenize_detokenize(self):
        vocab = tiny_vocab()
        ids = tokenize("the food was good SEP the soup", vocab)
        self.assertEqual(ids[4], SEP_ID)
        self.assertEqual(detokenize([BOS_ID] + ids + [EOS_ID], vocab), "the food was good SEP the soup")
        self.assertEqual(tokenize("", vocab), [])

    def test_oov(self):
        with self.assertRaises(OOVError) as ctx:
            tokenize("the pizza was good", tiny_vocab())
        self.assertEqual(ctx.exception.word, "pizza")

    def test_save_load_and_digest(self):
        vocab = tiny_vocab()
        with tempfile.TemporaryDirectory() as temp_dir:
            path = vocab.save(Path(temp_dir) / "vocab.json")
            self.assertEqual(Vocabulary.load(path), vocab)
            data = json.loads(path.read_text(encoding="utf-8"))
            data["tokens"].append("extra")
            path.write_text(json.dumps(data), encoding="utf-8")
            with self.assertRaises(DataError):
                Vocabulary.load(path)

    def test_empty_corpus(self):
        with self.assertRaises(DataError):
            build_vocab([])


class TestSignalGrammar(unittest.TestCase):

    def test_generated_sentences_have_one_signal(self):
        grammar = tiny_grammar("two-pairs")
        rng = SeededRng(3)
        for sentence in generate_corpus(grammar, 40, rng):
            positives, negatives = scan_signals(sentence.text, grammar)
            self.assertEqual(len(positives) + len(negatives), 1)
            self.assertEqual(label_of(sentence.text, grammar), sentence.label)

    def test_one_pair_mode_uses_first_pair(self):
        grammar = tiny_grammar("one-pair")
        rng = SeededRng(4)
        signals = {generate_sentence(grammar, "negative", rng).signal for _ in range(20)}
        self.assertEqual(signals, {"bad"})

    def test_two_pairs_are_drawn_evenly(self):
        grammar = tiny_grammar("two-pairs")
        sentences = generate_corpus(grammar, 10000, SeededRng(12))
        first_pair = sum(s.signal in ("bad", "good") for s in sentences) / len(sentences)
        self.assertAlmostEqual(first_pair, 0.5, delta=0.03)
        templates = sum(s.template_index == 0 for s in sentences) / len(sentences)
        self.assertAlmostEqual(templates, 0.5, delta=0.03)

    def test_generation_is_deterministic(self):
        grammar = tiny_grammar()
        first = [s.text for s in generate_corpus(grammar, 10, SeededRng(9))]
        second = [s.text for s in generate_corpus(grammar, 10, SeededRng(9))]
        self.assertEqual(first, second)

    def test_label_of_mixed_or_missing(self):
        grammar = tiny_grammar()
        self.assertIsNone(label_of("the food was good and bad", grammar))
        self.assertIsNone(label_of("the food", grammar))

    def test_load_bundled_grammar(self):
        grammar = load_grammar(GRAMMAR_PATH, "two-pairs")
        self.assertGreaterEqual(len(grammar.templates), 10)
        vocab = build_vocab([" ".join(grammar.all_words())])
        sentence = generate_sentence(grammar, "positive", SeededRng(1))
        tokenize(sentence.text, vocab)

    def test_invalid_grammar(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "grammar.json"
            path.write_text(json.dumps({
                "templates": ["the {item} was bad {signal}"],
                "signal_pairs": [{"negative": "bad", "positive": "good"}],
                "fillers": {"item": ["food"]},
            }), encoding="utf-8")
            with self.assertRaises(DataError):
                load_grammar(path)
            with self.assertRaises(DataError):
                load_grammar(Path(temp_dir) / "missing.json")


class TestEditDistance(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(edit_distance("kitten", "sitting"), 3)
        self.assertEqual(edit_distance("", "abc"), 3)
        self.assertEqual(edit_distance("same", "same"), 0)

    def test_metric_properties(self):
        words = ["the food was bad", "the food was good", "the soup was good", "", "good"]
        for a in words:
            for b in words:
                self.assertEqual(edit_distance(a, b), edit_distance(b, a))
                for c in words:
                    self.assertLessEqual(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c))


if __name__ == "__main__":
    unittest.main()
