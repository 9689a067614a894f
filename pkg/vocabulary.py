import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

from loguru import logger

from exceptions import DataError, OOVError

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "SEP"
REPEAT = "Repeat"
COLON = ":"

# 予約トークンは固定の若いIDを持つ
RESERVED_TOKENS = [PAD, BOS, EOS, SEP, REPEAT, COLON]
PAD_ID, BOS_ID, EOS_ID, SEP_ID, REPEAT_ID, COLON_ID = range(len(RESERVED_TOKENS))


class Vocabulary:
    """単語レベルの語彙（ID <-> 単語の全単射）"""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DataError("語彙の先頭が予約トークンではありません")
        if len(set(tokens)) != len(tokens):
            raise DataError("語彙に重複があります")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def digest(self) -> str:
        """語彙のハッシュ（マニフェスト記録用）"""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(exist_ok=True, parents=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tokens": self.tokens, "sha256": self.digest()}, f, ensure_ascii=False, indent=1)
        return path

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"語彙ファイルが見つかりません: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        vocab = cls(data["tokens"])
        if data.get("sha256") and data["sha256"] != vocab.digest():
            raise DataError(f"語彙ファイルのハッシュが一致しません: {path}")
        return vocab


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """
    コーパスから語彙を作る
    Args:
        corpus: テキストのリスト
    Returns:
        Vocabulary: 予約トークン -> 初出順の単語
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("語彙を作るコーパスが空です")

    tokens = list(RESERVED_TOKENS)
    seen = set(tokens)
    for text in corpus:
        for word in text.split():
            word = word if word in seen else word.lower()
            if word not in seen:
                seen.add(word)
                tokens.append(word)

    logger.debug(f"語彙を作成しました: {len(tokens)}語")
    return Vocabulary(tokens)


def _normalize(word: str, vocab: Vocabulary) -> str:
    return word if word in vocab.index else word.lower()


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """空白区切りでIDに変換する（未知語はOOVError）"""
    ids = []
    for word in text.split():
        token = _normalize(word, vocab)
        if token not in vocab.index:
            raise OOVError(word)
        ids.append(vocab.index[token])
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary, skip_special: bool = True) -> str:
    """IDを文字列に戻す（PAD/BOS/EOSは除く）"""
    words = []
    for i in ids:
        i = int(i)
        if skip_special and i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)
