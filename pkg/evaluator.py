import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel

from checkpoint import load_module, save_module
from config import ClassifierTrainConfig
from exceptions import DataError
from fluency_model import FluencyModel, perplexity
from numerics import ContractError
from q_learner import StageClassifier, fit_stage_classifier, predict_q_batch
from repeat_model import EncoderDecoderModel, encode, mean_pooled, repeat_prompt
from signal_grammar import SignalGrammar, scan_signals
from trajectory import History, StageDataset, StageRow, Trajectory


class MetricDomainError(ValueError):
    """集計できない値（fluency <= e など）"""


class MetricReport(BaseModel):
    """自動評価の結果（フィールド順はJSONの列順）"""
    similarity: float
    strength: float
    fluency: float
    gm: Optional[float]
    hm: Optional[float]
    n: int
    skipped: int = 0
    # GM/HMを計算できなかった理由（計算できた場合はNone）
    gm_hm_undefined: Optional[str] = None


class StageSignal(BaseModel):
    converted: float
    deleted: float
    n: int


class SignalReport(BaseModel):
    """信号語による正解率（converted <= deleted）"""
    converted: float
    deleted: float
    n: int
    per_stage: Dict[str, StageSignal] = {}


def sentence_blocks(repeat_model: EncoderDecoderModel, texts: Sequence[str]) -> List[np.ndarray]:
    return [encode(repeat_model, repeat_prompt(text)).data for text in texts]


class EvalClassifier:
    """書き換えとは独立に学習する文単位の評価用分類器"""

    def __init__(self, classifier: StageClassifier, repeat_model: EncoderDecoderModel):
        self.classifier = classifier
        self.repeat_model = repeat_model

    def blocks(self, texts: Sequence[str]) -> List[np.ndarray]:
        return sentence_blocks(self.repeat_model, texts)

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        """各テキストの P(y+)"""
        if not texts:
            return np.zeros(0)
        return predict_q_batch(self.classifier, self.blocks(texts))

    def is_positive(self, texts: Sequence[str]) -> np.ndarray:
        return self.predict(texts) >= 0.5

    def save(self, path: Path) -> Path:
        return save_module(self.classifier, path, "eval")


def single_sentences(trajectories: Sequence[Trajectory]) -> List[Tuple[str, int]]:
    """ラベル付きの全ての単文（重複は除く、初出順）"""
    seen = set()
    sentences = []
    for trajectory in trajectories:
        for stage in trajectory.stages:
            if stage.label is None or stage.source in seen:
                continue
            seen.add(stage.source)
            sentences.append((stage.source, stage.label))
    return sentences


def train_eval_classifier(trajectories: Sequence[Trajectory], repeat_model: EncoderDecoderModel,
                          cfg: ClassifierTrainConfig) -> EvalClassifier:
    """
    学習用の単文とその段ラベルで評価用分類器を学習する
    Args:
        trajectories: 学習用の軌跡
        repeat_model: Repeatモデル（入力のエンコードに使う）
        cfg: 学習設定
    Returns:
        EvalClassifier: 学習済みの評価用分類器
    """
    sentences = single_sentences(trajectories)
    if not sentences:
        raise DataError("評価用分類器の学習に使えるラベル付きの文がありません")

    rows = [
        StageRow(trajectory_id=f"s-{i:06d}", history=History.empty(), action=text,
                 pseudo_label=label, pseudo_value=float(label))
        for i, (text, label) in enumerate(sentences)
    ]
    blocks = sentence_blocks(repeat_model, [text for text, _ in sentences])
    hard_cfg = cfg.copy(update={"soft_targets": False})
    classifier, report = fit_stage_classifier(StageDataset(stage=0, rows=rows), blocks, hard_cfg, repeat_model.dim)
    logger.info(f"評価用分類器を学習しました: {report.rows}文, 学習精度 {report.accuracy:.3f}")
    return EvalClassifier(classifier, repeat_model)


def load_eval_classifier(path: Path, repeat_model: EncoderDecoderModel, cfg: ClassifierTrainConfig) -> EvalClassifier:
    classifier = StageClassifier(repeat_model.dim, cfg.copy(update={"soft_targets": False}), seed=cfg.seed)
    return EvalClassifier(load_module(classifier, path, "eval"), repeat_model)


def transfer_strength(outputs: Sequence[str], classifier: EvalClassifier) -> float:
    """正と判定された出力の割合（%）"""
    if not outputs:
        raise ContractError("評価する出力がありません")
    return 100.0 * float(np.mean(classifier.is_positive(outputs)))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b) / norm)


def similarity(originals: Sequence[str], outputs: Sequence[str], repeat_model: EncoderDecoderModel) -> float:
    """
    元の文と出力の類似度（平均プーリングしたエンコードのコサイン、[0,1]に丸めて%）
    """
    if len(originals) != len(outputs):
        raise ContractError(f"元の文と出力の数が一致しません: {len(originals)} != {len(outputs)}")
    if not originals:
        raise ContractError("評価する出力がありません")
    scores = [
        min(1.0, max(0.0, _cosine(mean_pooled(repeat_model, a).astype(np.float64),
                                  mean_pooled(repeat_model, b).astype(np.float64))))
        for a, b in zip(originals, outputs)
    ]
    return 100.0 * float(np.mean(scores))


def fluency(outputs: Sequence[str], fluency_model: FluencyModel) -> Tuple[float, int]:
    """
    出力の平均パープレキシティ
    Returns:
        (平均パープレキシティ, 空のためスキップした数)
    """
    values = []
    skipped = 0
    for text in outputs:
        if not text.strip():
            skipped += 1
            continue
        values.append(perplexity(fluency_model, text))
    if skipped:
        logger.warning(f"空の出力を{skipped}件スキップしました")
    if not values:
        raise ContractError("パープレキシティを計算できる出力がありません")
    return float(np.mean(values)), skipped


def aggregate(similarity_score: float, strength: float, fluency_score: float) -> Tuple[float, float]:
    """
    類似度・転換強度・100/ln(fluency) の幾何平均と調和平均
    Args:
        similarity_score: 類似度 (0, 100]
        strength: 転換強度 (0, 100]
        fluency_score: パープレキシティ（e より大きいこと）
    Returns:
        (gm, hm)
    """
    if fluency_score <= math.e:
        raise MetricDomainError(f"fluencyはeより大きい必要があります: {fluency_score}")
    for name, value in (("similarity", similarity_score), ("strength", strength)):
        if not 0.0 < value <= 100.0:
            raise MetricDomainError(f"{name}は(0, 100]の範囲である必要があります: {value}")
    transformed = 100.0 / math.log(fluency_score)
    components = (similarity_score, strength, transformed)
    gm = float(np.prod(components) ** (1.0 / 3.0))
    hm = 3.0 / sum(1.0 / c for c in components)
    return gm, hm


def _signal_counts(texts: Sequence[str], grammar: SignalGrammar) -> Tuple[int, int]:
    converted = deleted = 0
    for text in texts:
        positives, negatives = scan_signals(text, grammar)
        if not negatives:
            deleted += 1
            if positives:
                converted += 1
    return converted, deleted


def signal_accuracy(refined: Sequence[str], grammar: SignalGrammar,
                    stages: Optional[Sequence[int]] = None) -> SignalReport:
    """
    信号語で判定した書き換えの成功率
    Args:
        refined: 書き換え後のテキスト
        grammar: 文法（信号語の辞書）
        stages: 各テキストの段番号（段ごとの内訳を出す場合）
    Returns:
        SignalReport: converted（正の信号語あり・負なし）と deleted（負の信号語なし）
    """
    n = len(refined)
    converted, deleted = _signal_counts(refined, grammar)
    per_stage: Dict[str, StageSignal] = {}
    if stages is not None:
        for stage in sorted(set(stages)):
            texts = [t for t, s in zip(refined, stages) if s == stage]
            c, d = _signal_counts(texts, grammar)
            per_stage[str(stage)] = StageSignal(converted=c / len(texts), deleted=d / len(texts), n=len(texts))
    return SignalReport(
        converted=converted / n if n else 0.0,
        deleted=deleted / n if n else 0.0,
        n=n,
        per_stage=per_stage,
    )


class RefinementScorer:
    """書き換え結果の自動評価"""

    def __init__(self, classifier: EvalClassifier, repeat_model: EncoderDecoderModel, fluency_model: FluencyModel,
                 grammar: Optional[SignalGrammar] = None):
        self.classifier = classifier
        self.repeat_model = repeat_model
        self.fluency_model = fluency_model
        self.grammar = grammar

    def score(self, originals: Sequence[str], outputs: Sequence[str],
              stages: Optional[Sequence[int]] = None) -> Tuple[MetricReport, Optional[SignalReport]]:
        """
        書き換え対象だった文の評価
        Args:
            originals: 元の文
            outputs: 書き換え後の文
            stages: 各文の段番号
        Returns:
            (MetricReport, SignalReport)（文法がなければSignalReportはNone）
        """
        if not outputs:
            raise DataError("評価する書き換え結果がありません")

        sim = round(similarity(originals, outputs, self.repeat_model), 4)
        strength = round(transfer_strength(outputs, self.classifier), 4)
        flu, skipped = fluency(outputs, self.fluency_model)
        flu = round(flu, 4)
        undefined = None
        try:
            gm, hm = aggregate(sim, strength, flu)
        except MetricDomainError as e:
            logger.warning(f"GM/HMを計算できません: {e}")
            gm = hm = None
            undefined = str(e)

        report = MetricReport(
            similarity=sim,
            strength=strength,
            fluency=flu,
            gm=gm,
            hm=hm,
            n=len(outputs),
            skipped=skipped,
            gm_hm_undefined=undefined,
        )
        logger.info(f"評価結果: similarity={report.similarity:.1f}, strength={report.strength:.1f}, "
                    f"fluency={report.fluency:.1f}, GM={format_metric(report.gm)}, "
                    f"HM={format_metric(report.hm)} (n={report.n})")

        signals = signal_accuracy(outputs, self.grammar, stages) if self.grammar is not None else None
        return report, signals


def format_metric(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.1f}"


def write_report(path: Path, report: BaseModel) -> Path:
    """レポートをJSONで書き出す（フィールド順固定、NaNは書かない）"""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(report.dict(), ensure_ascii=False, indent=2, allow_nan=False) + "\n")
    return path


def read_report(path: Path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"レポートが見つかりません: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
