from typing import Callable, List, Sequence, Tuple, TypeVar

import numpy as np
from loguru import logger
from tqdm import tqdm

from config import TrainConfig
from exceptions import TrainingDivergenceError
from layers import Module
from numerics import AdamOptimizer, NumericalError, SeededRng, Tape, Tensor, no_grad
from vocabulary import PAD_ID

Example = TypeVar("Example")
BatchLoss = Callable[[List[Example], SeededRng], Tensor]


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tuple[np.ndarray, np.ndarray]:
    """
    可変長のID列をパディングする
    Returns:
        (ids (B, L), pad_flags (B, L))
    """
    length = max(1, max((len(s) for s in sequences), default=1))
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
    return ids, ids == pad_id


def batches(examples: Sequence[Example], batch_size: int, order: Sequence[int]) -> List[List[Example]]:
    return [[examples[j] for j in order[i: i + batch_size]] for i in range(0, len(order), batch_size)]


def train_epochs(model: Module, examples: Sequence[Example], batch_loss: BatchLoss, cfg: TrainConfig,
                 desc: str = "train", initial_batches: int = 8) -> List[float]:
    """
    ミニバッチ学習を行う
    Args:
        model: 学習するモデル
        examples: 学習例
        batch_loss: (バッチ, ドロップアウト用乱数) -> スカラー損失
        cfg: 学習設定
        desc: 進捗表示名
        initial_batches: 初期損失を測るバッチ数
    Returns:
        List[float]: 損失曲線（先頭は学習前、以降はエポック平均）
    """
    if not examples:
        raise ValueError(f"{desc}: 学習例が空です")

    rng = SeededRng(cfg.seed)
    params = model.named_parameters()
    optimizer = AdamOptimizer(params, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)

    model.eval()
    with no_grad():
        head = batches(examples, cfg.batch_size, list(range(len(examples))))[:initial_batches]
        initial = float(np.mean([batch_loss(b, rng.derive(0, i)).item() for i, b in enumerate(head)]))
    curve = [initial]
    logger.info(f"{desc}: 学習前の損失 {initial:.4f} (パラメータ数 {model.num_parameters():,})")

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.derive(epoch).permutation(len(examples))
        losses = []
        progress = tqdm(batches(examples, cfg.batch_size, order), desc=f"{desc} {epoch}/{cfg.epochs}", leave=False)
        for step, batch in enumerate(progress):
            optimizer.zero_grad()
            try:
                with Tape() as tape:
                    loss = batch_loss(batch, rng.derive(epoch, step, 1))
                tape.backward(loss, params.values())
                optimizer.step()
            except NumericalError as e:
                model.eval()
                raise TrainingDivergenceError(
                    f"学習が発散しました (epoch={epoch}, step={step}, 直前の平均損失="
                    f"{np.mean(losses) if losses else float('nan'):.4f}): {e}",
                    context=desc,
                )
            losses.append(loss.item())
            progress.set_postfix(loss=f"{losses[-1]:.4f}")
        curve.append(float(np.mean(losses)))
        logger.info(f"{desc}: epoch {epoch}/{cfg.epochs} 平均損失 {curve[-1]:.4f}")

    model.eval()
    return curve
