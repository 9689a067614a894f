import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel

import numerics as nx
from checkpoint import file_sha256, load_module, read_manifest, save_module, write_manifest
from config import TrainConfig, TransformerConfig
from exceptions import DataError
from layers import DecoderStack, Embedding, EncoderStack, Module, causal_mask, padding_mask, sinusoidal_positions
from numerics import SeededRng, Tensor, no_grad
from trainer import pad_batch, train_epochs
from vocabulary import BOS_ID, COLON, EOS_ID, PAD_ID, REPEAT, SEP_ID, Vocabulary, detokenize, tokenize

REPEAT_PROMPT = f"{REPEAT} {COLON}"
# 位置エンコーディング表の長さ（段入力の長さに余裕を持たせる）
POSITION_TABLE = 1024


def repeat_prompt(text: str) -> str:
    """"Repeat : " を前置した入力文"""
    return f"{REPEAT_PROMPT} {text}".strip()


class BeamHypothesis(BaseModel):
    """ビーム探索の仮説"""
    tokens: List[int]
    log_prob: float
    finished: bool = False

    def score(self, alpha: float = 1.0) -> float:
        # 長さ正規化した対数確率
        return self.log_prob / (max(1, len(self.tokens)) ** alpha)


class DecodeResult(BaseModel):
    text: str
    tokens: List[int]
    log_prob: float
    score: float
    finished: bool


class SplitDecodeResult(BaseModel):
    history_text: str
    action_text: str
    log_prob: float
    no_eos: bool = False
    no_sep: bool = False


class EncoderDecoderModel(Module):
    """Repeatタスクで学習する小さなエンコーダ・デコーダ"""

    def __init__(self, vocab: Vocabulary, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        rng = SeededRng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.dim = cfg.dim
        self.embedding = Embedding(len(vocab), cfg.dim, rng)
        self.encoder = EncoderStack(cfg.dim, cfg.num_heads, cfg.ff_dim, cfg.encoder_layers, rng, cfg.dropout)
        self.decoder = DecoderStack(cfg.dim, cfg.num_heads, cfg.ff_dim, cfg.decoder_layers, rng, cfg.dropout)
        self.positions = sinusoidal_positions(max(POSITION_TABLE, cfg.max_len + 2), cfg.dim)
        self._sep_memory: Optional[np.ndarray] = None

    def embed(self, ids: np.ndarray) -> Tensor:
        length = ids.shape[1]
        if length > self.positions.shape[0]:
            raise nx.DimensionError(f"系列が長すぎます: {length}")
        scaled = self.embedding(ids) * math.sqrt(self.dim)
        return scaled + Tensor._wrap(self.positions[:length])

    def encode_ids(self, ids: np.ndarray, pad_flags: Optional[np.ndarray] = None,
                   rng: Optional[SeededRng] = None) -> Tensor:
        mask = padding_mask(pad_flags) if pad_flags is not None else None
        return self.encoder(self.embed(ids), mask, rng)

    def decoder_logits(self, memory: Tensor, target_in: np.ndarray, memory_pad: Optional[np.ndarray] = None,
                       rng: Optional[SeededRng] = None) -> Tensor:
        """デコーダの出力ロジット (B, T, V)（出力射影は埋め込みと共有）"""
        self_mask = causal_mask(target_in.shape[1])
        memory_mask = padding_mask(memory_pad) if memory_pad is not None else None
        hidden = self.decoder(self.embed(target_in), memory, self_mask, memory_mask, rng)
        return nx.matmul(hidden, nx.transpose(self.embedding.weight))

    def sep_memory(self) -> np.ndarray:
        """SEP単独をエンコードした行 (1, d)"""
        if self._sep_memory is None:
            with no_grad():
                self._sep_memory = self.encode_ids(np.array([[SEP_ID]])).data[0]
        return self._sep_memory

    def load_state_dict(self, state) -> None:
        super().load_state_dict(state)
        self._sep_memory = None


def _repeat_batch_loss(model: EncoderDecoderModel, batch: List[Tuple[List[int], List[int]]],
                       rng: SeededRng) -> Tensor:
    sources, targets = zip(*batch)
    src_ids, src_pad = pad_batch(sources)
    tgt_in, _ = pad_batch([[BOS_ID] + t for t in targets])
    tgt_out, tgt_pad = pad_batch([t + [EOS_ID] for t in targets])
    memory = model.encode_ids(src_ids, src_pad, rng)
    logits = model.decoder_logits(memory, tgt_in, src_pad, rng)
    return nx.cross_entropy(logits, tgt_out, weights=(~tgt_pad).astype(np.float32))


def train_repeat(model: EncoderDecoderModel, corpus: Sequence[str], cfg: TrainConfig) -> Tuple[EncoderDecoderModel, List[float]]:
    """
    "Repeat : テキスト" -> "テキスト" を教師強制で学習する
    Args:
        model: 学習するモデル
        corpus: 復元対象のテキスト
        cfg: 学習設定
    Returns:
        学習済みモデルと損失曲線
    """
    examples = [(tokenize(repeat_prompt(text), model.vocab), tokenize(text, model.vocab)) for text in corpus]
    logger.info(f"Repeatモデルの学習を開始します: {len(examples)}文, {cfg.epochs}エポック")
    curve = train_epochs(model, examples, lambda b, r: _repeat_batch_loss(model, b, r), cfg, desc="repeat")
    model._sep_memory = None
    return model, curve


def encode(model: EncoderDecoderModel, text: str, requires_grad: bool = False) -> Tensor:
    """
    テキストを文脈埋め込み列 (トークン数, d) にする
    Args:
        model: Repeatモデル
        text: 入力テキスト（プロンプトを含める場合は呼び出し側で付ける）
        requires_grad: Trueなら現在のテープに記録する
    Returns:
        Tensor: (L, d)
    """
    ids = np.array([tokenize(text, model.vocab)], dtype=np.int64)
    if ids.shape[1] == 0:
        return Tensor(np.zeros((0, model.dim)))
    if requires_grad:
        return nx.reshape(model.encode_ids(ids), (ids.shape[1], model.dim))
    with no_grad():
        return Tensor._wrap(model.encode_ids(ids).data[0])


def _as_memory(model: EncoderDecoderModel, memory: Union[Tensor, np.ndarray]) -> np.ndarray:
    block = memory.data if isinstance(memory, Tensor) else np.asarray(memory, dtype=nx.DEFAULT_DTYPE)
    if block.ndim != 2 or block.shape[1] != model.dim:
        raise nx.DimensionError(f"メモリは (長さ, {model.dim}) である必要があります: {block.shape}")
    return block


def beam_search(model: EncoderDecoderModel, memory: Union[Tensor, np.ndarray], beam: int = 3,
                max_len: int = 256, alpha: float = 1.0) -> List[BeamHypothesis]:
    """
    長さ正規化つきビーム探索
    Returns:
        List[BeamHypothesis]: 正規化スコア順の仮説
    """
    block = _as_memory(model, memory)
    if block.shape[0] == 0:
        block = model.sep_memory()
    memory_tensor = Tensor._wrap(block[None, :, :])

    hypotheses = [BeamHypothesis(tokens=[], log_prob=0.0)]
    with no_grad():
        for _ in range(max_len):
            active = [h for h in hypotheses if not h.finished]
            if not active:
                break
            prefixes = np.array([[BOS_ID] + h.tokens for h in active], dtype=np.int64)
            logits = model.decoder_logits(memory_tensor, prefixes).data[:, -1, :]
            log_probs = logits - logits.max(axis=1, keepdims=True)
            log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
            log_probs[:, PAD_ID] = -np.inf
            log_probs[:, BOS_ID] = -np.inf

            candidates = [h for h in hypotheses if h.finished]
            for h, row in zip(active, log_probs):
                for token in np.argsort(-row, kind="stable")[:beam]:
                    token = int(token)
                    candidates.append(BeamHypothesis(
                        tokens=h.tokens + [token],
                        log_prob=h.log_prob + float(row[token]),
                        finished=token == EOS_ID,
                    ))
            candidates.sort(key=lambda c: c.score(alpha), reverse=True)
            hypotheses = candidates[:beam]
    return hypotheses


def decode(model: EncoderDecoderModel, memory: Union[Tensor, np.ndarray], beam: int = 3,
           max_len: int = 256) -> DecodeResult:
    """
    埋め込み列（勾配で書き換えたものも可）をテキストに戻す
    EOSが出なければ最良の未完了仮説を finished=False で返す
    """
    hypotheses = beam_search(model, memory, beam, max_len)
    finished = [h for h in hypotheses if h.finished]
    best = finished[0] if finished else hypotheses[0]
    if not finished:
        logger.warning(f"{max_len}トークン以内にEOSが出ませんでした")
    tokens = [t for t in best.tokens if t != EOS_ID]
    return DecodeResult(
        text=detokenize(tokens, model.vocab),
        tokens=tokens,
        log_prob=best.log_prob,
        score=best.score(),
        finished=best.finished,
    )


def decode_split(model: EncoderDecoderModel, history_memory: Union[Tensor, np.ndarray],
                 action_memory: Union[Tensor, np.ndarray], beam: int = 3, max_len: int = 256) -> SplitDecodeResult:
    """
    [履歴メモリ ; SEP ; 行動メモリ] を復号し、最初のSEPより後ろを行動テキストとして返す
    Args:
        model: Repeatモデル
        history_memory: "Repeat : H_t" 部分のエンコード行
        action_memory: 行動部分のエンコード行
    Returns:
        SplitDecodeResult: (履歴テキスト, 行動テキスト) とフラグ
    """
    history = _as_memory(model, history_memory)
    action = _as_memory(model, action_memory)
    joined = np.concatenate([history, model.sep_memory(), action], axis=0)
    result = decode(model, joined, beam, max_len)

    if SEP_ID in result.tokens:
        cut = result.tokens.index(SEP_ID)
        return SplitDecodeResult(
            history_text=detokenize(result.tokens[:cut], model.vocab),
            action_text=detokenize(result.tokens[cut + 1:], model.vocab),
            log_prob=result.log_prob,
            no_eos=not result.finished,
        )

    logger.warning("SEPが復号されなかったため行動メモリだけで復号し直します")
    fallback = decode(model, action, beam, max_len)
    return SplitDecodeResult(
        history_text="",
        action_text=fallback.text,
        log_prob=fallback.log_prob,
        no_eos=not fallback.finished,
        no_sep=True,
    )


def reconstruction_rate(model: EncoderDecoderModel, texts: Sequence[str], beam: int = 3, max_len: int = 256) -> float:
    """decode(encode("Repeat : x")) == x となる割合"""
    if not texts:
        return 0.0
    hits = 0
    for text in texts:
        memory = encode(model, repeat_prompt(text))
        if decode(model, memory, beam, max_len).text == text:
            hits += 1
    return hits / len(texts)


def mean_pooled(model: EncoderDecoderModel, text: str) -> np.ndarray:
    """平均プーリングしたエンコード（類似度計算用）"""
    block = encode(model, text).data
    if block.shape[0] == 0:
        return np.zeros(model.dim, dtype=nx.DEFAULT_DTYPE)
    return block.mean(axis=0)


def save_repeat_model(model: EncoderDecoderModel, checkpoint_dir: Path, seed: int,
                      metrics: Optional[Dict[str, float]] = None) -> Path:
    """
    Repeatモデルを保存する（repeat.ntck + vocab.json + repeat_manifest.json）
    Returns:
        Path: マニフェストのパス
    """
    checkpoint_dir = Path(checkpoint_dir)
    weights = save_module(model, checkpoint_dir / "repeat.ntck", "repeat")
    vocab_path = model.vocab.save(checkpoint_dir / "vocab.json")
    return write_manifest(checkpoint_dir / "repeat_manifest.json", {
        "kind": "repeat",
        "vocab_sha256": model.vocab.digest(),
        "vocab_path": vocab_path.name,
        "weights": weights.name,
        "weights_sha256": file_sha256(weights),
        "model": model.cfg.dict(),
        "seed": seed,
        "metrics": metrics or {},
    })


def load_repeat_model(checkpoint_dir: Path) -> EncoderDecoderModel:
    """保存済みのRepeatモデルを読み込む（語彙ハッシュを照合する）"""
    checkpoint_dir = Path(checkpoint_dir)
    manifest = read_manifest(checkpoint_dir / "repeat_manifest.json")
    vocab = Vocabulary.load(checkpoint_dir / manifest["vocab_path"])
    if vocab.digest() != manifest["vocab_sha256"]:
        raise DataError("語彙ハッシュがマニフェストと一致しません", context=str(checkpoint_dir))
    model = EncoderDecoderModel(vocab, TransformerConfig(**manifest["model"]), seed=manifest["seed"])
    load_module(model, checkpoint_dir / manifest["weights"], "repeat")
    logger.info(f"Repeatモデルを読み込みました: {checkpoint_dir}")
    return model
