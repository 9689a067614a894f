from pathlib import Path
import json
import re
from typing import Dict, List, Optional, Set, Tuple, Union
from loguru import logger
from pydantic import BaseModel

from exceptions import DataError
from numerics import SeededRng

POSITIVE = "positive"
NEGATIVE = "negative"

SIGNAL_SLOT = "{signal}"
_SLOT_PATTERN = re.compile(r"\{(\w+)\}")


class SignalPair(BaseModel):
    """対義語の信号ペア（例: bad -> good）"""
    negative: str
    positive: str


class GeneratedSentence(BaseModel):
    """生成文"""
    text: str
    label: int
    template_index: int
    signal: str


class SignalGrammar(BaseModel):
    """テンプレート文法と信号語彙"""
    templates: List[str]
    signal_pairs: List[SignalPair]
    fillers: Dict[str, List[str]] = {}
    mode: str = "one-pair"

    def active_pairs(self) -> List[SignalPair]:
        return self.signal_pairs[:1] if self.mode == "one-pair" else self.signal_pairs[:2]

    def positive_words(self) -> Set[str]:
        return {p.positive for p in self.active_pairs()}

    def negative_words(self) -> Set[str]:
        return {p.negative for p in self.active_pairs()}

    def all_words(self) -> List[str]:
        """文法が生成しうる全単語（初出順）"""
        words: List[str] = []
        sources = [t.replace(SIGNAL_SLOT, " ") for t in self.templates]
        sources += [" ".join(v) for _, v in sorted(self.fillers.items())]
        sources += [f"{p.negative} {p.positive}" for p in self.active_pairs()]
        for text in sources:
            for word in _SLOT_PATTERN.sub(" ", text).split():
                if word not in words:
                    words.append(word)
        return words


def load_grammar(path: Path, mode: str = "one-pair") -> SignalGrammar:
    """
    文法ファイル(JSON)を読み込む
    Args:
        path: 文法ファイルのパス
        mode: one-pair または two-pairs
    Returns:
        SignalGrammar: 検証済みの文法
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"文法ファイルが見つかりません: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)

    # 形式のチェック
    if not isinstance(data, dict):
        raise DataError("文法ファイルの形式が不正です。辞書形式が必要です。")

    grammar = SignalGrammar(mode=mode, **data)
    _validate_grammar(grammar)
    logger.info(f"文法を読み込みました: {path} (テンプレート{len(grammar.templates)}個, モード={mode})")
    return grammar


def _validate_grammar(grammar: SignalGrammar) -> None:
    required_pairs = 1 if grammar.mode == "one-pair" else 2
    if len(grammar.signal_pairs) < required_pairs:
        raise DataError(f"{grammar.mode} には信号ペアが{required_pairs}組必要です")

    lexicon = {p.negative for p in grammar.signal_pairs} | {p.positive for p in grammar.signal_pairs}
    for i, template in enumerate(grammar.templates):
        if template.count(SIGNAL_SLOT) != 1:
            raise DataError(f"テンプレート{i}には信号スロットがちょうど1つ必要です: {template}")
        for slot in _SLOT_PATTERN.findall(template):
            if slot != "signal" and slot not in grammar.fillers:
                raise DataError(f"テンプレート{i}のスロット '{slot}' に対応する語がありません")
        # 信号語がテンプレート本文に混ざると正負が同居してしまう
        words = set(_SLOT_PATTERN.sub(" ", template).split())
        if words & lexicon:
            raise DataError(f"テンプレート{i}に信号語が含まれています: {sorted(words & lexicon)}")
    for slot, values in grammar.fillers.items():
        for value in values:
            if set(value.split()) & lexicon:
                raise DataError(f"補充語 '{value}' ({slot}) に信号語が含まれています")


def _fill(template: str, signal: str, grammar: SignalGrammar, rng: SeededRng) -> str:
    def _replace(match):
        slot = match.group(1)
        if slot == "signal":
            return signal
        return rng.choice(grammar.fillers[slot])

    return _SLOT_PATTERN.sub(_replace, template)


def _polarity_label(polarity: Union[str, int]) -> int:
    if polarity in (POSITIVE, 1):
        return 1
    if polarity in (NEGATIVE, 0):
        return 0
    raise ValueError(f"polarityは positive / negative のいずれかです: {polarity}")


def generate_sentence(grammar: SignalGrammar, polarity: Union[str, int], rng: SeededRng) -> GeneratedSentence:
    """
    信号語を1つだけ含む文を生成する
    Args:
        grammar: 文法
        polarity: positive / negative
        rng: 乱数
    Returns:
        GeneratedSentence: 生成文とラベル（正の信号語なら1）
    """
    label = _polarity_label(polarity)
    template_index = int(rng.integers(0, len(grammar.templates)))
    pair = rng.choice(grammar.active_pairs())
    signal = pair.positive if label == 1 else pair.negative
    text = _fill(grammar.templates[template_index], signal, grammar, rng)
    return GeneratedSentence(text=text, label=label, template_index=template_index, signal=signal)


def generate_corpus(grammar: SignalGrammar, count: int, rng: SeededRng) -> List[GeneratedSentence]:
    """正負が交互になるように count 文を生成する"""
    return [generate_sentence(grammar, POSITIVE if i % 2 == 0 else NEGATIVE, rng) for i in range(count)]


def scan_signals(text: str, grammar: SignalGrammar) -> Tuple[List[str], List[str]]:
    """文中の正・負の信号語を列挙する"""
    words = text.split()
    positives = [w for w in words if w in grammar.positive_words()]
    negatives = [w for w in words if w in grammar.negative_words()]
    return positives, negatives


def label_of(text: str, grammar: SignalGrammar) -> Optional[int]:
    """信号語から決まるラベル（信号語が無い・混在する場合はNone）"""
    positives, negatives = scan_signals(text, grammar)
    if positives and not negatives:
        return 1
    if negatives and not positives:
        return 0
    return None
