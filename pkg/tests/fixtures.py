from pathlib import Path

from config import ClassifierTrainConfig, TrainConfig, TransformerConfig
from signal_grammar import SignalGrammar, SignalPair
from vocabulary import build_vocab

TEST_DATA = Path(__file__).parent / "test_data"

# テスト用の小さなモデル設定
TINY_MODEL = TransformerConfig(dim=16, num_heads=2, encoder_layers=1, decoder_layers=1, ff_dim=32, max_len=64)
TINY_TRAIN = TrainConfig(lr=1e-3, batch_size=4, epochs=1, seed=5)
TINY_CLASSIFIER = ClassifierTrainConfig(hidden=16, num_heads=2, num_layers=1, epochs=2, batch_size=4,
                                        dropout=0.0, lr=1e-3, seed=7)


def tiny_grammar(mode: str = "one-pair") -> SignalGrammar:
    return SignalGrammar(
        templates=["the {item} was {signal}", "my {person} felt {signal}"],
        signal_pairs=[SignalPair(negative="bad", positive="good"), SignalPair(negative="sad", positive="happy")],
        fillers={"item": ["food", "soup"], "person": ["friend", "boss"]},
        mode=mode,
    )


def tiny_vocab(grammar: SignalGrammar = None):
    grammar = grammar or tiny_grammar("two-pairs")
    return build_vocab([" ".join(grammar.all_words())])
