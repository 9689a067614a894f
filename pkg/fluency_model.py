import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

import numerics as nx
from checkpoint import file_sha256, load_module, read_manifest, save_module, write_manifest
from config import TrainConfig, TransformerConfig
from exceptions import DataError
from layers import DecoderStack, Embedding, Module, causal_mask, sinusoidal_positions
from numerics import ContractError, SeededRng, Tensor, no_grad
from trainer import pad_batch, train_epochs
from vocabulary import BOS_ID, EOS_ID, Vocabulary, tokenize


class FluencyModel(Module):
    """流暢さ評価用の小さな因果言語モデル（デコーダのみ）"""

    def __init__(self, vocab: Vocabulary, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        rng = SeededRng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.dim = cfg.dim
        self.embedding = Embedding(len(vocab), cfg.dim, rng)
        self.decoder = DecoderStack(cfg.dim, cfg.num_heads, cfg.ff_dim, cfg.decoder_layers, rng, cfg.dropout,
                                    cross_attention=False)
        self.positions = sinusoidal_positions(cfg.max_len + 2, cfg.dim)

    def logits(self, ids: np.ndarray, rng: SeededRng = None) -> Tensor:
        length = ids.shape[1]
        if length > self.positions.shape[0]:
            raise nx.DimensionError(f"系列が長すぎます: {length} > {self.positions.shape[0]}")
        x = self.embedding(ids) * math.sqrt(self.dim) + Tensor._wrap(self.positions[:length])
        hidden = self.decoder(x, None, causal_mask(length), None, rng)
        return nx.matmul(hidden, nx.transpose(self.embedding.weight))


def _lm_batch_loss(model: FluencyModel, batch: List[List[int]], rng: SeededRng) -> Tensor:
    inputs, _ = pad_batch([[BOS_ID] + ids for ids in batch])
    targets, pad = pad_batch([ids + [EOS_ID] for ids in batch])
    return nx.cross_entropy(model.logits(inputs, rng), targets, weights=(~pad).astype(np.float32))


def train_fluency(model: FluencyModel, corpus: Sequence[str], cfg: TrainConfig) -> Tuple[FluencyModel, List[float]]:
    """
    コーパス（正負両方の文）で次単語予測を学習する
    Returns:
        学習済みモデルと損失曲線
    """
    examples = [tokenize(text, model.vocab) for text in corpus if text.strip()]
    logger.info(f"流暢さモデルの学習を開始します: {len(examples)}文, {cfg.epochs}エポック")
    curve = train_epochs(model, examples, lambda b, r: _lm_batch_loss(model, b, r), cfg, desc="fluency")
    return model, curve


def nll(model: FluencyModel, text: str) -> float:
    """
    トークンあたりの平均負の対数尤度（BOSから条件付け、EOSは含めない）
    Args:
        model: 流暢さモデル
        text: 評価するテキスト
    Returns:
        float: 平均NLL（0以上）
    """
    ids = tokenize(text, model.vocab)
    if not ids:
        raise ContractError("空のテキストのNLLは定義されません")
    with no_grad():
        logits = model.logits(np.array([[BOS_ID] + ids[:-1]], dtype=np.int64))
        return max(0.0, nx.cross_entropy(logits, np.array([ids], dtype=np.int64)).item())


def perplexity(model: FluencyModel, text: str) -> float:
    return math.exp(nll(model, text))


def save_fluency_model(model: FluencyModel, checkpoint_dir: Path, seed: int,
                       metrics: Optional[Dict[str, float]] = None) -> Path:
    checkpoint_dir = Path(checkpoint_dir)
    weights = save_module(model, checkpoint_dir / "fluency.ntck", "fluency")
    return write_manifest(checkpoint_dir / "fluency_manifest.json", {
        "kind": "fluency",
        "vocab_sha256": model.vocab.digest(),
        "weights": weights.name,
        "weights_sha256": file_sha256(weights),
        "model": model.cfg.dict(),
        "seed": seed,
        "metrics": metrics or {},
    })


def load_fluency_model(checkpoint_dir: Path, vocab: Vocabulary) -> FluencyModel:
    """保存済みの流暢さモデルを読み込む（Repeatモデルと同じ語彙であること）"""
    checkpoint_dir = Path(checkpoint_dir)
    manifest = read_manifest(checkpoint_dir / "fluency_manifest.json")
    if vocab.digest() != manifest["vocab_sha256"]:
        raise DataError("流暢さモデルの語彙がRepeatモデルと一致しません", context=str(checkpoint_dir))
    model = FluencyModel(vocab, TransformerConfig(**manifest["model"]), seed=manifest["seed"])
    load_module(model, checkpoint_dir / manifest["weights"], "fluency")
    logger.info(f"流暢さモデルを読み込みました: {checkpoint_dir}")
    return model
