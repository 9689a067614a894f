from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel

import numerics as nx
from checkpoint import load_module, save_module
from config import ClassifierTrainConfig
from exceptions import DataError
from layers import EncoderStack, Linear, Module, padding_mask
from numerics import ContractError, SeededRng, Tensor, no_grad
from repeat_model import EncoderDecoderModel, encode, repeat_prompt
from trainer import train_epochs
from trajectory import History, StageDataset
from vocabulary import SEP, tokenize

POSITIVE_CLASS = 1


class StageInput(BaseModel):
    """"Repeat : H_t SEP a_t" のエンコードと行動トークンの範囲"""
    text: str
    block: np.ndarray
    span: Tuple[int, int]

    class Config:
        arbitrary_types_allowed = True

    @property
    def action_rows(self) -> np.ndarray:
        return self.block[self.span[0]: self.span[1]]

    @property
    def history_rows(self) -> np.ndarray:
        # SEPの行は含めない（decode_splitが単独のSEP埋め込みを挟む）
        return self.block[: self.span[0] - 1]


class FitReport(BaseModel):
    stage: int
    rows: int
    positives: int
    accuracy: float
    loss_curve: List[float]
    weighted: bool = False


class StageClassifier(Module):
    """
    段ごとのQ関数近似 f_t
    入力はRepeatエンコーダの出力列、平均プーリング後に2クラスを出力する
    """

    def __init__(self, input_dim: int, cfg: ClassifierTrainConfig, seed: int = 0):
        super().__init__()
        rng = SeededRng(seed)
        self.input_dim = input_dim
        self.cfg = cfg
        self.projection = Linear(input_dim, cfg.hidden, rng)
        self.encoder = EncoderStack(cfg.hidden, cfg.num_heads, 4 * cfg.hidden, cfg.num_layers, rng, cfg.dropout)
        self.head = Linear(cfg.hidden, 2, rng)

    def logits(self, blocks: Tensor, pad_flags: Optional[np.ndarray] = None, rng: Optional[SeededRng] = None) -> Tensor:
        """
        Args:
            blocks: (B, L, d) の入力列
            pad_flags: (B, L) のPADフラグ
        Returns:
            Tensor: (B, 2)
        """
        if blocks.ndim != 3 or blocks.shape[-1] != self.input_dim:
            raise nx.DimensionError(f"入力幅が一致しません: {blocks.shape} (期待: (*, *, {self.input_dim}))")
        batch, length, _ = blocks.shape
        if pad_flags is None:
            pad_flags = np.zeros((batch, length), dtype=bool)
        hidden = self.encoder(self.projection(blocks), padding_mask(pad_flags), rng)

        # PADを除いた平均プーリング
        keep = (~pad_flags).astype(nx.DEFAULT_DTYPE)
        counts = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        pooled = nx.reduce_sum(hidden * Tensor._wrap(keep[:, :, None]), axis=1) / Tensor._wrap(counts)
        return self.head(pooled)


def build_stage_input(repeat_model: EncoderDecoderModel, history: History, action: str) -> StageInput:
    """
    分類器の入力 encode("Repeat : " + H_t + " SEP " + a_t) を作る
    Args:
        repeat_model: Repeatモデル
        history: 履歴 (L_1, A_1, ..., L_t)
        action: 行動テキスト
    Returns:
        StageInput: エンコード結果と行動トークンの範囲 [start, end)
    """
    flat = history.flatten()
    text = repeat_prompt(" ".join(t for t in (flat, SEP, action) if t))
    prefix_length = len(tokenize(repeat_prompt(" ".join(t for t in (flat, SEP) if t)), repeat_model.vocab))
    action_length = len(tokenize(action, repeat_model.vocab))
    block = encode(repeat_model, text).data
    span = (prefix_length, prefix_length + action_length)
    if span[1] != block.shape[0]:
        raise ContractError(f"行動範囲がエンコード長と一致しません: {span} / {block.shape[0]}")
    return StageInput(text=text, block=block, span=span)


def _pad_blocks(blocks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    length = max(b.shape[0] for b in blocks)
    dim = blocks[0].shape[1]
    batch = np.zeros((len(blocks), length, dim), dtype=nx.DEFAULT_DTYPE)
    pad = np.ones((len(blocks), length), dtype=bool)
    for i, block in enumerate(blocks):
        batch[i, : block.shape[0]] = block
        pad[i, : block.shape[0]] = False
    return batch, pad


def predict_q_batch(f: StageClassifier, blocks: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """複数入力の P(y+) をまとめて計算する"""
    f.eval()
    values = []
    with no_grad():
        for i in range(0, len(blocks), batch_size):
            batch, pad = _pad_blocks(blocks[i: i + batch_size])
            logits = f.logits(Tensor._wrap(batch), pad)
            values.append(nx.softmax(logits, axis=-1).data[:, POSITIVE_CLASS])
    return np.concatenate(values).astype(np.float64) if values else np.zeros(0)


def predict_q(f: StageClassifier, block: Union[np.ndarray, Tensor, StageInput]) -> float:
    """
    P(y+) を返す（推論時はドロップアウトなし）
    Args:
        f: 段の分類器
        block: (L, d) の入力列
    Returns:
        float: [0, 1] の確率
    """
    if isinstance(block, StageInput):
        block = block.block
    data = block.data if isinstance(block, Tensor) else np.asarray(block, dtype=nx.DEFAULT_DTYPE)
    if data.ndim != 2 or data.shape[1] != f.input_dim:
        raise nx.DimensionError(f"入力幅が一致しません: {data.shape} (期待: (*, {f.input_dim}))")
    return float(predict_q_batch(f, [data])[0])


def binarize_outcome(y: int, num_stages: int, threshold: Optional[int] = None) -> int:
    """
    結果（有効段数）を二値化する（既定は全段有効のときだけ1）
    """
    if not 0 <= y <= num_stages:
        raise ContractError(f"outcomeが範囲外です: {y} (0..{num_stages})")
    threshold = num_stages if threshold is None else threshold
    return int(y >= threshold)


def _targets(dataset: StageDataset, soft: bool) -> np.ndarray:
    values = np.array([row.pseudo_value for row in dataset.rows], dtype=nx.DEFAULT_DTYPE)
    if not soft:
        values = np.array([row.pseudo_label for row in dataset.rows], dtype=nx.DEFAULT_DTYPE)
    return np.stack([1.0 - values, values], axis=1)


def _class_weights(labels: np.ndarray, threshold: float) -> Optional[np.ndarray]:
    # 多数派が閾値を超えたら逆頻度で重み付け
    positives = labels.mean()
    if max(positives, 1.0 - positives) <= threshold:
        return None
    counts = np.array([np.sum(labels == 0), np.sum(labels == 1)], dtype=np.float64)
    per_class = len(labels) / (2.0 * counts)
    return per_class[labels].astype(nx.DEFAULT_DTYPE)


def fit_stage_classifier(dataset: StageDataset, blocks: Sequence[np.ndarray], cfg: ClassifierTrainConfig,
                         input_dim: int) -> Tuple[StageClassifier, FitReport]:
    """
    擬似結果に対して段の分類器を学習する
    Args:
        dataset: 段のデータセット
        blocks: 各行の入力列（build_stage_inputの結果）
        cfg: 学習設定
        input_dim: 入力幅 d
    Returns:
        学習済み分類器と学習レポート
    """
    if not dataset.rows:
        raise DataError(f"段{dataset.stage}の学習データが空です")
    if len(blocks) != len(dataset.rows):
        raise ContractError("行数と入力列の数が一致しません")

    labels = np.array([row.pseudo_label for row in dataset.rows], dtype=np.int64)
    targets = _targets(dataset, cfg.soft_targets)
    # ソフトターゲットでは値がばらついていれば学習できる
    single_class = labels.min() == labels.max()
    if single_class and (not cfg.soft_targets or np.ptp(targets[:, 1]) == 0.0):
        raise DataError(f"段{dataset.stage}のデータが1クラスしかないため分類器を学習できません (label={labels[0]})")

    weights = None if single_class else _class_weights(labels, cfg.imbalance_threshold)
    if weights is not None:
        logger.warning(f"段{dataset.stage}: クラスの偏りが大きいため逆頻度の重みを使います (正例率 {labels.mean():.2f})")

    classifier = StageClassifier(input_dim, cfg, seed=cfg.seed)
    examples = list(range(len(blocks)))

    def _batch_loss(batch: List[int], rng: SeededRng) -> Tensor:
        inputs, pad = _pad_blocks([blocks[i] for i in batch])
        logits = classifier.logits(Tensor._wrap(inputs), pad, rng)
        row_weights = weights[batch] if weights is not None else None
        return nx.cross_entropy(logits, targets[batch], weights=row_weights)

    curve = train_epochs(classifier, examples, _batch_loss, cfg, desc=f"q stage{dataset.stage}")

    predictions = (predict_q_batch(classifier, blocks) >= 0.5).astype(np.int64)
    accuracy = float(np.mean(predictions == labels))
    logger.info(f"段{dataset.stage}の分類器: 学習精度 {accuracy:.3f} ({len(labels)}行)")
    return classifier, FitReport(
        stage=dataset.stage,
        rows=len(labels),
        positives=int(labels.sum()),
        accuracy=accuracy,
        loss_curve=curve,
        weighted=weights is not None,
    )


def save_stage_classifier(f: StageClassifier, checkpoint_dir: Path, stage: int) -> Path:
    return save_module(f, Path(checkpoint_dir) / f"qf_stage{stage}.ntck", f"qf/stage{stage}")


def load_stage_classifier(checkpoint_dir: Path, stage: int, input_dim: int, cfg: ClassifierTrainConfig) -> StageClassifier:
    classifier = StageClassifier(input_dim, cfg, seed=cfg.seed)
    return load_module(classifier, Path(checkpoint_dir) / f"qf_stage{stage}.ntck", f"qf/stage{stage}")
